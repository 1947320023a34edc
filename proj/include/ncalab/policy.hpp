#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ncalab/error.hpp"
#include "ncalab/numeric.hpp"
#include "ncalab/random.hpp"

namespace ncalab {

/// Index of a response in its instruction's canonical response enumeration.
/// Tabular policies use 0..M-1; autoregressive policies use shortlex order
/// over token sequences (see AutoregressivePolicy).
using ResponseId = std::size_t;

inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;

namespace detail {

inline void check_finite_logits(std::span<const double> logits) {
  for (double v : logits)
    if (!std::isfinite(v)) throw ValidationError("policy logits must be finite");
}

}  // namespace detail

/// Conditional categorical policy with one logit row per instruction.
class TabularPolicy {
 public:
  TabularPolicy(std::size_t num_instructions, std::size_t num_responses,
                std::vector<double> logits)
      : num_instructions_(num_instructions),
        num_responses_(num_responses),
        logits_(std::move(logits)) {
    if (num_instructions_ == 0 || num_responses_ == 0)
      throw ValidationError("tabular policy needs at least one instruction and one response");
    if (logits_.size() != num_instructions_ * num_responses_)
      throw ValidationError("tabular policy logit count does not match dimensions");
    detail::check_finite_logits(logits_);
  }

  static TabularPolicy uniform(std::size_t n, std::size_t m) {
    return {n, m, std::vector<double>(n * m, 0.0)};
  }

  /// Logits drawn i.i.d. from N(0, scale^2).
  static TabularPolicy random(std::size_t n, std::size_t m, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    std::vector<double> logits(n * m);
    for (double& v : logits) v = scale * rng.normal();
    return {n, m, std::move(logits)};
  }

  /// All mass on `y` for every instruction. Other logits sit 1000 nats below,
  /// so their probabilities underflow to exactly zero.
  static TabularPolicy point_mass(std::size_t n, std::size_t m, ResponseId y) {
    if (y >= m) throw ValidationError("point-mass response out of range");
    std::vector<double> logits(n * m, -1000.0);
    for (std::size_t x = 0; x < n; ++x) logits[x * m + y] = 0.0;
    return {n, m, std::move(logits)};
  }

  /// Logits = log p; every probability must be positive.
  static TabularPolicy from_probabilities(std::size_t n, std::size_t m,
                                          std::span<const double> probs) {
    if (probs.size() != n * m) throw ValidationError("probability table has wrong size");
    std::vector<double> logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (!(probs[i] > 0.0)) throw ValidationError("probabilities must be positive");
      logits[i] = std::log(probs[i]);
    }
    return {n, m, std::move(logits)};
  }

  std::size_t num_instructions() const noexcept { return num_instructions_; }
  std::size_t num_responses() const noexcept { return num_responses_; }
  std::size_t support_size() const noexcept { return num_responses_; }
  std::size_t num_params() const noexcept { return logits_.size(); }

  std::span<const double> logits() const noexcept { return logits_; }
  std::span<double> logits() noexcept { return logits_; }

  std::span<const double> row(std::size_t x) const {
    check_instruction(x);
    return std::span<const double>(logits_).subspan(x * num_responses_, num_responses_);
  }

  double log_prob(std::size_t x, ResponseId y) const {
    check_response(y);
    const auto r = row(x);
    return r[y] - log_sum_exp(r);
  }

  /// log π(y|x) for every y in the support.
  std::vector<double> log_probs(std::size_t x) const { return log_softmax(row(x)); }

  /// grad += Σ_y coeff[y] · ∂ log π(y|x) / ∂ logits.
  void backprop_log_probs(std::size_t x, std::span<const double> coeff,
                          std::span<double> grad) const {
    if (coeff.size() != num_responses_ || grad.size() != logits_.size())
      throw ValidationError("backprop buffer size mismatch");
    const auto probs = softmax(row(x));
    double total = 0.0;
    for (double c : coeff) total += c;
    double* g = grad.data() + x * num_responses_;
    for (std::size_t k = 0; k < num_responses_; ++k) g[k] += coeff[k] - total * probs[k];
  }

  ResponseId sample(std::size_t x, Rng& rng) const {
    const auto probs = softmax(row(x));
    return rng.categorical(probs);
  }

  bool same_shape(const TabularPolicy& o) const noexcept {
    return num_instructions_ == o.num_instructions_ && num_responses_ == o.num_responses_;
  }

  void check_instruction(std::size_t x) const {
    if (x >= num_instructions_)
      throw ValidationError("instruction index " + std::to_string(x) + " out of range");
  }
  void check_response(ResponseId y) const {
    if (y >= num_responses_)
      throw ValidationError("response id " + std::to_string(y) + " outside the response space");
  }

 private:
  std::size_t num_instructions_;
  std::size_t num_responses_;
  std::vector<double> logits_;
};

/// Toy autoregressive policy over token sequences.
///
/// The vocabulary has V symbols; symbol V-1 is end-of-sequence and the others
/// are content tokens. A response is a sequence of at most T content tokens.
/// Shorter responses end with an explicit EOS factor; a response reaching T
/// tokens terminates without one. Responses are numbered in shortlex order
/// (by length, then lexicographically), so the empty response is id 0.
///
/// Each instruction owns one V-wide logit row per prefix of length < T. A
/// prefix shares its id with the response of the same tokens, so rows are
/// indexed by response ids 0..num_prefixes()-1. An empty logit vector means
/// all-zero logits.
class AutoregressivePolicy {
 public:
  static constexpr std::size_t kMaxTableEntries = 50'000'000;

  AutoregressivePolicy(std::size_t num_instructions, std::size_t vocab, std::size_t max_length,
                       std::vector<double> logits)
      : num_instructions_(num_instructions), vocab_(vocab), max_length_(max_length) {
    if (num_instructions_ == 0) throw ValidationError("autoregressive policy needs an instruction");
    if (vocab_ < 2) throw ValidationError("vocabulary must hold EOS plus at least one token");
    if (max_length_ < 1) throw ValidationError("maximum length must be at least 1");
    // offsets_[n] = number of sequences shorter than n.
    offsets_.push_back(0);
    std::size_t level = 1;
    for (std::size_t n = 0; n <= max_length_; ++n) {
      if (offsets_.back() > kMaxTableEntries) break;
      offsets_.push_back(offsets_.back() + level);
      level *= (vocab_ - 1);
    }
    if (offsets_.size() != max_length_ + 2 ||
        num_instructions_ * offsets_[max_length_] * vocab_ > kMaxTableEntries)
      throw EnumerationCapError(
          "autoregressive logit table too large; reduce vocabulary or maximum length");
    if (logits.empty()) logits.assign(num_params(), 0.0);
    if (logits.size() != num_params())
      throw ValidationError("autoregressive policy logit count does not match dimensions");
    detail::check_finite_logits(logits);
    logits_ = std::move(logits);
  }

  /// Uniform next-token distribution everywhere.
  static AutoregressivePolicy uniform(std::size_t n, std::size_t vocab, std::size_t max_length) {
    return {n, vocab, max_length, {}};
  }

  static AutoregressivePolicy random(std::size_t n, std::size_t vocab, std::size_t max_length,
                                     std::uint64_t seed, double scale = 1.0) {
    auto p = uniform(n, vocab, max_length);
    Rng rng(seed);
    for (double& v : p.logits_) v = scale * rng.normal();
    return p;
  }

  std::size_t num_instructions() const noexcept { return num_instructions_; }
  std::size_t vocab() const noexcept { return vocab_; }
  std::size_t max_length() const noexcept { return max_length_; }
  std::size_t eos() const noexcept { return vocab_ - 1; }
  std::size_t support_size() const noexcept { return offsets_[max_length_ + 1]; }
  std::size_t num_prefixes() const noexcept { return offsets_[max_length_]; }
  std::size_t num_params() const noexcept { return num_instructions_ * num_prefixes() * vocab_; }

  std::span<const double> logits() const noexcept { return logits_; }
  std::span<double> logits() noexcept { return logits_; }

  std::span<const double> row(std::size_t x, std::size_t prefix) const {
    check_instruction(x);
    return std::span<const double>(logits_).subspan(row_offset(x, prefix), vocab_);
  }

  std::size_t length_of(ResponseId y) const {
    check_response(y);
    std::size_t n = 0;
    while (offsets_[n + 1] <= y) ++n;
    return n;
  }

  std::vector<std::size_t> tokens_of(ResponseId y) const {
    const std::size_t n = length_of(y);
    std::vector<std::size_t> tokens(n);
    std::size_t local = y - offsets_[n];
    for (std::size_t i = n; i-- > 0;) {
      tokens[i] = local % (vocab_ - 1);
      local /= (vocab_ - 1);
    }
    return tokens;
  }

  ResponseId id_of(std::span<const std::size_t> tokens) const {
    if (tokens.size() > max_length_) throw ValidationError("sequence longer than maximum length");
    std::size_t local = 0;
    for (std::size_t t : tokens) {
      if (t >= eos()) throw ValidationError("sequence contains EOS or an out-of-vocabulary token");
      local = local * (vocab_ - 1) + t;
    }
    return offsets_[tokens.size()] + local;
  }

  /// Sum over positions of per-token conditional log-probabilities.
  double log_prob(std::size_t x, ResponseId y) const {
    const auto tokens = tokens_of(y);
    double lp = 0.0;
    ResponseId prefix = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      lp += token_log_prob(x, prefix, tokens[i]);
      prefix = child(prefix, i, tokens[i]);
    }
    if (tokens.size() < max_length_) lp += token_log_prob(x, prefix, eos());
    return lp;
  }

  double token_log_prob(std::size_t x, ResponseId prefix, std::size_t token) const {
    const auto r = row(x, prefix);
    return r[token] - log_sum_exp(r);
  }

  std::vector<double> log_probs(std::size_t x) const {
    check_instruction(x);
    std::vector<double> out(support_size(), 0.0);
    std::vector<double> prefix_lp(num_prefixes(), 0.0);
    for (ResponseId p = 0; p < num_prefixes(); ++p) {
      const std::size_t n = length_of(p);
      const auto ls = log_softmax(row(x, p));
      out[p] = prefix_lp[p] + ls[eos()];
      for (std::size_t a = 0; a < eos(); ++a) {
        const ResponseId c = child(p, n, a);
        if (n + 1 < max_length_)
          prefix_lp[c] = prefix_lp[p] + ls[a];
        else
          out[c] = prefix_lp[p] + ls[a];
      }
    }
    return out;
  }

  void backprop_log_probs(std::size_t x, std::span<const double> coeff,
                          std::span<double> grad) const {
    check_instruction(x);
    if (coeff.size() != support_size() || grad.size() != num_params())
      throw ValidationError("backprop buffer size mismatch");
    // Collect per-row token counts, then apply d log softmax once per row.
    std::vector<double> counts(num_prefixes() * vocab_, 0.0);
    for (ResponseId y = 0; y < coeff.size(); ++y) {
      const double c = coeff[y];
      if (c == 0.0) continue;
      std::size_t n = length_of(y);
      if (n < max_length_) counts[y * vocab_ + eos()] += c;
      ResponseId node = y;
      while (n > 0) {
        const std::size_t local = node - offsets_[n];
        const ResponseId parent = offsets_[n - 1] + local / (vocab_ - 1);
        counts[parent * vocab_ + local % (vocab_ - 1)] += c;
        node = parent;
        --n;
      }
    }
    for (ResponseId p = 0; p < num_prefixes(); ++p) {
      const double* cnt = counts.data() + p * vocab_;
      double total = 0.0;
      for (std::size_t k = 0; k < vocab_; ++k) total += cnt[k];
      if (total == 0.0 && std::all_of(cnt, cnt + vocab_, [](double v) { return v == 0.0; }))
        continue;
      const auto probs = softmax(row(x, p));
      double* g = grad.data() + row_offset(x, p);
      for (std::size_t k = 0; k < vocab_; ++k) g[k] += cnt[k] - total * probs[k];
    }
  }

  ResponseId sample(std::size_t x, Rng& rng) const {
    check_instruction(x);
    ResponseId node = 0;
    for (std::size_t n = 0; n < max_length_; ++n) {
      const auto probs = softmax(row(x, node));
      const std::size_t tok = rng.categorical(probs);
      if (tok == eos()) return node;
      node = child(node, n, tok);
    }
    return node;
  }

  bool same_shape(const AutoregressivePolicy& o) const noexcept {
    return num_instructions_ == o.num_instructions_ && vocab_ == o.vocab_ &&
           max_length_ == o.max_length_;
  }

  void check_instruction(std::size_t x) const {
    if (x >= num_instructions_)
      throw ValidationError("instruction index " + std::to_string(x) + " out of range");
  }
  void check_response(ResponseId y) const {
    if (y >= support_size())
      throw ValidationError("response id " + std::to_string(y) + " outside the response space");
  }

 private:
  ResponseId child(ResponseId prefix, std::size_t len, std::size_t token) const {
    return offsets_[len + 1] + (prefix - offsets_[len]) * (vocab_ - 1) + token;
  }
  std::size_t row_offset(std::size_t x, ResponseId prefix) const {
    return (x * num_prefixes() + prefix) * vocab_;
  }

  std::size_t num_instructions_;
  std::size_t vocab_;
  std::size_t max_length_;
  std::vector<std::size_t> offsets_;
  std::vector<double> logits_;
};

/// What the trainer, oracle and losses need from a policy family.
template <class P>
concept EnumerablePolicy =
    std::copy_constructible<P> &&
    requires(const P& p, P& mp, std::size_t x, ResponseId y, Rng& rng,
             std::span<const double> coeff, std::span<double> grad) {
      { p.num_instructions() } -> std::convertible_to<std::size_t>;
      { p.support_size() } -> std::convertible_to<std::size_t>;
      { p.num_params() } -> std::convertible_to<std::size_t>;
      { p.log_prob(x, y) } -> std::convertible_to<double>;
      { p.log_probs(x) } -> std::convertible_to<std::vector<double>>;
      { p.sample(x, rng) } -> std::convertible_to<ResponseId>;
      { p.same_shape(p) } -> std::convertible_to<bool>;
      { mp.logits() } -> std::convertible_to<std::span<double>>;
      p.backprop_log_probs(x, coeff, grad);
    };

static_assert(EnumerablePolicy<TabularPolicy>);
static_assert(EnumerablePolicy<AutoregressivePolicy>);

using AnyPolicy = std::variant<TabularPolicy, AutoregressivePolicy>;

inline const char* family_name(const TabularPolicy&) { return "tabular"; }
inline const char* family_name(const AutoregressivePolicy&) { return "autoregressive"; }

template <EnumerablePolicy P>
double log_prob(const P& policy, std::size_t x, ResponseId y) {
  return policy.log_prob(x, y);
}

/// `n` i.i.d. draws from π(·|x), deterministic in `seed`.
template <EnumerablePolicy P>
std::vector<ResponseId> sample(const P& policy, std::size_t x, std::uint64_t seed, std::size_t n) {
  if (n == 0) throw ValidationError("sample count must be at least 1");
  Rng rng(seed);
  std::vector<ResponseId> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(policy.sample(x, rng));
  return out;
}

struct SupportEntry {
  ResponseId response;
  double probability;
};

template <EnumerablePolicy P>
void check_enumerable(const P& policy, std::size_t cap) {
  if (policy.support_size() > cap)
    throw EnumerationCapError("response space of size " + std::to_string(policy.support_size()) +
                              " exceeds the enumeration cap " + std::to_string(cap) +
                              "; use a tabular policy or a smaller vocabulary/maximum length");
}

/// Every response with non-zero probability under π(·|x).
template <EnumerablePolicy P>
std::vector<SupportEntry> enumerate_support(const P& policy, std::size_t x,
                                            std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(policy, cap);
  const auto lp = policy.log_probs(x);
  std::vector<SupportEntry> out;
  for (ResponseId y = 0; y < lp.size(); ++y) {
    const double p = std::exp(lp[y]);
    if (p > 0.0) out.push_back({y, p});
  }
  return out;
}

/// KL(π(·|x) || μ(·|x)) by enumeration.
template <EnumerablePolicy P>
double exact_kl(const P& pi, const P& mu, std::size_t x, std::size_t cap = kDefaultEnumerationCap) {
  if (!pi.same_shape(mu)) throw ValidationError("KL between policies of different shape");
  check_enumerable(pi, cap);
  const auto lp = pi.log_probs(x);
  const auto lq = mu.log_probs(x);
  double kl = 0.0;
  for (std::size_t y = 0; y < lp.size(); ++y) {
    const double p = std::exp(lp[y]);
    if (p == 0.0) continue;
    if (std::exp(lq[y]) == 0.0)
      throw ValidationError("support of pi is not contained in support of mu (response " +
                            std::to_string(y) + ")");
    kl += p * (lp[y] - lq[y]);
  }
  return std::max(kl, 0.0);
}

/// The pair (π_θ, μ) with coefficient β, realizing f = β (log π_θ - log μ).
template <EnumerablePolicy P>
struct ResidualModel {
  P policy;
  P reference;
  double beta = 1.0;

  ResidualModel(P policy_, P reference_, double beta_)
      : policy(std::move(policy_)), reference(std::move(reference_)), beta(beta_) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be positive");
    if (!policy.same_shape(reference))
      throw ValidationError("policy and reference must share family and dimensions");
  }

  /// π_θ = μ, so f ≡ 0.
  static ResidualModel at_reference(const P& mu, double beta) { return {mu, mu, beta}; }

  double residual(std::size_t x, ResponseId y) const {
    const double ref = reference.log_prob(x, y);
    if (std::exp(ref) == 0.0)
      throw ValidationError("reference probability is zero for response " + std::to_string(y));
    return beta * (policy.log_prob(x, y) - ref);
  }

  /// Residuals over the full support of x.
  std::vector<double> residuals(std::size_t x) const {
    auto lp = policy.log_probs(x);
    const auto lq = reference.log_probs(x);
    for (std::size_t y = 0; y < lp.size(); ++y) lp[y] = beta * (lp[y] - lq[y]);
    return lp;
  }
};

template <EnumerablePolicy P>
double residual_reward(const ResidualModel<P>& model, std::size_t x, ResponseId y) {
  return model.residual(x, y);
}

}  // namespace ncalab
