#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/numeric.hpp"
#include "ncalab/policy.hpp"

namespace ncalab {

enum class LossType { infonca, nca, dpo, nca_preference };

inline std::string_view to_string(LossType t) {
  switch (t) {
    case LossType::infonca: return "infonca";
    case LossType::nca: return "nca";
    case LossType::dpo: return "dpo";
    case LossType::nca_preference: return "nca_preference";
  }
  return "?";
}

inline LossType parse_loss_type(std::string_view s) {
  if (s == "infonca") return LossType::infonca;
  if (s == "nca") return LossType::nca;
  if (s == "dpo") return LossType::dpo;
  if (s == "nca_preference" || s == "nca-preference") return LossType::nca_preference;
  throw ValidationError("unknown loss type '" + std::string(s) +
                        "' (expected infonca, nca, dpo or nca_preference)");
}

/// DPO and the NCA preference loss consume (winner, loser) pairs.
constexpr bool is_preference_loss(LossType t) {
  return t == LossType::dpo || t == LossType::nca_preference;
}

/// Smallest K a loss accepts.
constexpr std::size_t min_responses(LossType t) { return t == LossType::nca ? 1 : 2; }

class SoftLabels;
inline SoftLabels soft_labels(std::span<const double> rewards, double alpha, bool hard_limit = false);

/// Target distribution over the K responses of one record.
class SoftLabels {
 public:
  /// Wraps caller-provided probabilities; they must be non-negative and sum
  /// to one within 1e-9.
  static SoftLabels from_probabilities(std::vector<double> p) {
    if (p.empty()) throw ValidationError("soft labels must be non-empty");
    double total = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("soft labels must be non-negative");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("soft labels must sum to one");
    return SoftLabels(std::move(p));
  }

  std::span<const double> values() const noexcept { return p_; }
  std::size_t size() const noexcept { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }

 private:
  explicit SoftLabels(std::vector<double> p) : p_(std::move(p)) {}
  std::vector<double> p_;

  friend SoftLabels soft_labels(std::span<const double>, double, bool);
};

/// softmax(rewards / alpha), or in the hard limit the indicator of the
/// maximal reward with ties sharing mass equally.
inline SoftLabels soft_labels(std::span<const double> rewards, double alpha, bool hard_limit) {
  if (rewards.empty()) throw ValidationError("soft labels need at least one reward");
  for (double r : rewards)
    if (!std::isfinite(r)) throw ValidationError("rewards must be finite");
  std::vector<double> p(rewards.size(), 0.0);
  if (hard_limit) {
    double best = rewards[0];
    for (double r : rewards) best = std::max(best, r);
    std::size_t ties = 0;
    for (double r : rewards) ties += (r == best);
    for (std::size_t i = 0; i < rewards.size(); ++i)
      if (rewards[i] == best) p[i] = 1.0 / static_cast<double>(ties);
    return SoftLabels(std::move(p));
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ValidationError("alpha must be positive unless the hard-label limit is requested");
  for (std::size_t i = 0; i < rewards.size(); ++i) p[i] = rewards[i] / alpha;
  return SoftLabels(softmax(p));
}

namespace detail {

inline void check_sizes(std::span<const double> f, std::span<const double> labels, std::size_t min_k) {
  if (f.size() != labels.size())
    throw ValidationError("residuals and labels differ in length (" + std::to_string(f.size()) +
                          " vs " + std::to_string(labels.size()) + ")");
  if (f.size() < min_k)
    throw ValidationError("loss needs K >= " + std::to_string(min_k) + ", got K=" +
                          std::to_string(f.size()));
}

/// Σ_i w_i softplus(-f_i) + reg · softplus(f_i). With w = labels and
/// reg = 1/K this is the NCA loss; the exact-expectation trainer reuses it
/// with importance weights e^{r/α}/Z and reg = 1.
inline double nca_terms(std::span<const double> f, std::span<const double> w, double reg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += w[i] * softplus(-f[i]) + reg * softplus(f[i]);
  return acc;
}

inline void nca_terms_gradient(std::span<const double> f, std::span<const double> w, double reg,
                               std::span<double> out) {
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = -w[i] * sigmoid(-f[i]) + reg * sigmoid(f[i]);
}

inline double infonca_raw(std::span<const double> f, std::span<const double> labels) {
  if (f.size() == 2)  // softplus form; keeps the DPO identity bit-exact
    return labels[0] * softplus(f[1] - f[0]) + labels[1] * softplus(f[0] - f[1]);
  const double lse = log_sum_exp(f);
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += labels[i] * (lse - f[i]);
  return acc;
}

inline void infonca_raw_gradient(std::span<const double> f, std::span<const double> labels,
                                 std::span<double> out) {
  const auto p = softmax(f);
  double mass = 0.0;
  for (double l : labels) mass += l;
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = mass * p[i] - labels[i];
}

}  // namespace detail

/// Soft-label cross entropy against softmax(residuals).
inline double infonca_loss(std::span<const double> residuals, const SoftLabels& labels) {
  detail::check_sizes(residuals, labels.values(), 2);
  return detail::infonca_raw(residuals, labels.values());
}

/// -Σ_i [ labels_i log σ(f_i) + (1/K) log σ(-f_i) ].
inline double nca_loss(std::span<const double> residuals, const SoftLabels& labels) {
  detail::check_sizes(residuals, labels.values(), 1);
  return detail::nca_terms(residuals, labels.values(), 1.0 / static_cast<double>(residuals.size()));
}

/// -log σ(f_w - f_l).
inline double dpo_loss(double residual_w, double residual_l) {
  return softplus(residual_l - residual_w);
}

/// -log σ(f_w) - ½ log σ(-f_w) - ½ log σ(-f_l).
inline double nca_preference_loss(double residual_w, double residual_l) {
  return (softplus(-residual_w) + 0.5 * softplus(residual_w)) + 0.5 * softplus(residual_l);
}

/// Loss of one record. For the preference losses `residuals` is
/// (winner, loser) and `labels` must have size two; its values are unused.
inline double loss_value(LossType type, std::span<const double> residuals, const SoftLabels& labels) {
  switch (type) {
    case LossType::infonca: return infonca_loss(residuals, labels);
    case LossType::nca: return nca_loss(residuals, labels);
    case LossType::dpo:
      detail::check_sizes(residuals, labels.values(), 2);
      if (residuals.size() != 2) throw ValidationError("dpo loss takes exactly two residuals");
      return dpo_loss(residuals[0], residuals[1]);
    case LossType::nca_preference:
      detail::check_sizes(residuals, labels.values(), 2);
      if (residuals.size() != 2) throw ValidationError("nca_preference loss takes exactly two residuals");
      return nca_preference_loss(residuals[0], residuals[1]);
  }
  throw ValidationError("unknown loss type");
}

/// ∂loss/∂residuals, same conventions as loss_value.
inline std::vector<double> loss_gradient_residuals(LossType type, std::span<const double> residuals,
                                                   const SoftLabels& labels) {
  std::vector<double> g(residuals.size(), 0.0);
  switch (type) {
    case LossType::infonca:
      detail::check_sizes(residuals, labels.values(), 2);
      detail::infonca_raw_gradient(residuals, labels.values(), g);
      return g;
    case LossType::nca:
      detail::check_sizes(residuals, labels.values(), 1);
      detail::nca_terms_gradient(residuals, labels.values(),
                                 1.0 / static_cast<double>(residuals.size()), g);
      return g;
    case LossType::dpo: {
      detail::check_sizes(residuals, labels.values(), 2);
      if (residuals.size() != 2) throw ValidationError("dpo loss takes exactly two residuals");
      const double s = sigmoid(residuals[1] - residuals[0]);
      g[0] = -s;
      g[1] = s;
      return g;
    }
    case LossType::nca_preference:
      detail::check_sizes(residuals, labels.values(), 2);
      if (residuals.size() != 2) throw ValidationError("nca_preference loss takes exactly two residuals");
      g[0] = -sigmoid(-residuals[0]) + 0.5 * sigmoid(residuals[0]);
      g[1] = 0.5 * sigmoid(residuals[1]);
      return g;
  }
  throw ValidationError("unknown loss type");
}

// ---------------------------------------------------------------------------
// Record-level losses through the residual model f = β (log π_θ - log μ).

namespace detail {

inline std::vector<ResponseId> record_responses(const RewardRecord& r) { return r.responses; }
inline std::vector<ResponseId> record_responses(const PreferenceRecord& r) { return {r.winner, r.loser}; }

}  // namespace detail

template <EnumerablePolicy P, class Record>
std::vector<double> record_residuals(const ResidualModel<P>& model, const Record& record) {
  const std::size_t x = instruction_index(record.instruction_id);
  std::vector<double> f;
  for (ResponseId y : detail::record_responses(record)) f.push_back(model.residual(x, y));
  return f;
}

template <EnumerablePolicy P, class Record>
double record_loss(LossType type, const ResidualModel<P>& model, const Record& record,
                   const SoftLabels& labels) {
  return loss_value(type, record_residuals(model, record), labels);
}

/// Gradient of one record's loss with respect to every logit of π_θ.
template <EnumerablePolicy P, class Record>
std::vector<double> loss_gradient_logits(LossType type, const ResidualModel<P>& model,
                                         const Record& record, const SoftLabels& labels) {
  const std::size_t x = instruction_index(record.instruction_id);
  const auto responses = detail::record_responses(record);
  const auto f = record_residuals(model, record);
  const auto g = loss_gradient_residuals(type, f, labels);
  std::vector<double> coeff(model.policy.support_size(), 0.0);
  for (std::size_t i = 0; i < responses.size(); ++i) coeff[responses[i]] += model.beta * g[i];
  std::vector<double> grad(model.policy.num_params(), 0.0);
  model.policy.backprop_log_probs(x, coeff, grad);
  return grad;
}

}  // namespace ncalab
