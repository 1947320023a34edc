#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace ncalab {

// Stable scalar primitives. Residuals reach |f| ~ 30 late in training, so
// nothing here evaluates exp() of an unbounded positive argument.

/// log(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log σ(z) = -softplus(-z).
inline double log_sigmoid(double z) { return -softplus(-z); }

/// Max-shifted log Σ e^{v_i}. Returns -inf for an empty range.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

inline std::vector<double> log_softmax(std::span<const double> v) {
  const double lse = log_sum_exp(v);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> v) {
  auto out = log_softmax(v);
  for (double& x : out) x = std::exp(x);
  return out;
}

}  // namespace ncalab
