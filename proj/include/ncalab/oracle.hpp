#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/losses.hpp"
#include "ncalab/numeric.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/reward.hpp"

namespace ncalab {

// Brute-force ground truth for the KL-regularized objective
//
//   max_π  E_x [ E_π r(x,y) - α KL(π(·|x) || μ(·|x)) ]
//
// whose maximizer is π*(y|x) = μ(y|x) e^{r(x,y)/α} / Z(x),
// Z(x) = E_μ e^{r(x,y)/α}. Everything is evaluated in log space.

struct Partition {
  double log_z = 0.0;
  double z = 1.0;  // may overflow to +inf when r/α is large; log_z stays exact
};

template <EnumerablePolicy P>
Partition exact_partition(const P& mu, const RewardModel& reward, double alpha, std::size_t x,
                          std::size_t cap = kDefaultEnumerationCap) {
  if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");
  check_enumerable(mu, cap);
  reward.check_compatible(mu);
  const auto lmu = mu.log_probs(x);
  std::vector<double> terms;
  terms.reserve(lmu.size());
  for (ResponseId y = 0; y < lmu.size(); ++y)
    if (std::exp(lmu[y]) > 0.0) terms.push_back(lmu[y] + reward(x, y) / alpha);
  const double log_z = log_sum_exp(terms);
  return {log_z, std::exp(log_z)};
}

/// (1/K) Σ_i e^{r_i/α} over rewards of K responses sampled from μ.
inline Partition mc_partition_estimate(std::span<const double> sample_rewards, double alpha) {
  if (sample_rewards.empty()) throw ValidationError("Monte-Carlo estimate needs at least one sample");
  if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");
  std::vector<double> scaled(sample_rewards.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = sample_rewards[i] / alpha;
  const double log_z = log_sum_exp(scaled) - std::log(static_cast<double>(scaled.size()));
  return {log_z, std::exp(log_z)};
}

/// π*(·|x) over the full response space (zero outside the support of μ).
template <EnumerablePolicy P>
std::vector<double> optimal_policy(const P& mu, const RewardModel& reward, double alpha,
                                   std::size_t x, std::size_t cap = kDefaultEnumerationCap) {
  const auto part = exact_partition(mu, reward, alpha, x, cap);
  const auto lmu = mu.log_probs(x);
  std::vector<double> out(lmu.size(), 0.0);
  for (ResponseId y = 0; y < lmu.size(); ++y)
    if (std::exp(lmu[y]) > 0.0) out[y] = std::exp(lmu[y] + reward(x, y) / alpha - part.log_z);
  return out;
}

/// NCA optimum f*(x,y) = r(x,y)/α - log Z(x) for every response.
template <EnumerablePolicy P>
std::vector<double> optimal_residual_nca(const P& mu, const RewardModel& reward, double alpha,
                                         std::size_t x, std::size_t cap = kDefaultEnumerationCap) {
  const auto part = exact_partition(mu, reward, alpha, x, cap);
  std::vector<double> out(mu.support_size());
  for (ResponseId y = 0; y < out.size(); ++y) out[y] = reward(x, y) / alpha - part.log_z;
  return out;
}

template <EnumerablePolicy P>
double expected_reward(const P& pi, const RewardModel& reward, std::size_t x,
                       std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(pi, cap);
  reward.check_compatible(pi);
  const auto lp = pi.log_probs(x);
  double acc = 0.0;
  for (ResponseId y = 0; y < lp.size(); ++y) acc += std::exp(lp[y]) * reward(x, y);
  return acc;
}

/// Mean over instructions of E_π r(x,y); used as the sweep's reward axis.
template <EnumerablePolicy P>
double expected_reward(const P& pi, const RewardModel& reward) {
  double acc = 0.0;
  for (std::size_t x = 0; x < pi.num_instructions(); ++x) acc += expected_reward(pi, reward, x);
  return acc / static_cast<double>(pi.num_instructions());
}

/// E_x [ E_π r - α KL(π || μ) ] with x uniform over the instruction set.
template <EnumerablePolicy P>
double rl_objective_value(const P& pi, const P& mu, const RewardModel& reward, double alpha,
                          std::size_t cap = kDefaultEnumerationCap) {
  if (!(alpha >= 0.0)) throw ValidationError("alpha must be non-negative");
  double acc = 0.0;
  for (std::size_t x = 0; x < pi.num_instructions(); ++x) {
    acc += expected_reward(pi, reward, x, cap);
    if (alpha > 0.0) acc -= alpha * exact_kl(pi, mu, x, cap);
  }
  return acc / static_cast<double>(pi.num_instructions());
}

// ---------------------------------------------------------------------------
// Realizing a target distribution as a policy of the same family.

/// Tabular policy with π(·|x) = target[x] (entries must be positive).
inline TabularPolicy policy_from_distributions(const TabularPolicy& shape,
                                               const std::vector<std::vector<double>>& target) {
  std::vector<double> logits;
  logits.reserve(shape.num_params());
  for (std::size_t x = 0; x < shape.num_instructions(); ++x)
    for (double p : target.at(x)) {
      if (!(p > 0.0)) throw ValidationError("target distribution must be strictly positive");
      logits.push_back(std::log(p));
    }
  return {shape.num_instructions(), shape.num_responses(), std::move(logits)};
}

/// Autoregressive policy whose sequence distribution equals target[x]; the
/// next-token logits are log masses of the completion subtrees.
inline AutoregressivePolicy policy_from_distributions(const AutoregressivePolicy& shape,
                                                      const std::vector<std::vector<double>>& target) {
  const std::size_t v = shape.vocab();
  const std::size_t t_max = shape.max_length();
  std::vector<double> logits(shape.num_params(), 0.0);
  for (std::size_t x = 0; x < shape.num_instructions(); ++x) {
    const auto& p = target.at(x);
    if (p.size() != shape.support_size()) throw ValidationError("target distribution has wrong size");
    for (double q : p)
      if (!(q > 0.0)) throw ValidationError("target distribution must be strictly positive");
    // subtree[y] = probability of all responses extending y (including y itself).
    std::vector<double> subtree(p.begin(), p.end());
    for (ResponseId y = shape.support_size(); y-- > 1;) {
      const auto tokens = shape.tokens_of(y);
      std::vector<std::size_t> parent(tokens.begin(), tokens.end() - 1);
      subtree[shape.id_of(parent)] += subtree[y];
    }
    for (ResponseId prefix = 0; prefix < shape.num_prefixes(); ++prefix) {
      auto tokens = shape.tokens_of(prefix);
      double* row = logits.data() + (x * shape.num_prefixes() + prefix) * v;
      row[shape.eos()] = std::log(p[prefix]);
      tokens.push_back(0);
      for (std::size_t a = 0; a + 1 < v; ++a) {
        tokens.back() = a;
        row[a] = std::log(subtree[shape.id_of(tokens)]);
      }
    }
  }
  return {shape.num_instructions(), v, t_max, std::move(logits)};
}

/// The policy π* itself, in μ's family.
template <EnumerablePolicy P>
P optimal_policy_model(const P& mu, const RewardModel& reward, double alpha,
                       std::size_t cap = kDefaultEnumerationCap) {
  std::vector<std::vector<double>> target;
  for (std::size_t x = 0; x < mu.num_instructions(); ++x)
    target.push_back(optimal_policy(mu, reward, alpha, x, cap));
  return policy_from_distributions(mu, target);
}

// ---------------------------------------------------------------------------
// Theorem verification

/// Which optimum a trained model is checked against. InfoNCA (and DPO) only
/// pin residuals up to a per-instruction constant; NCA pins them absolutely.
enum class TheoremKind { infonca, nca };

constexpr TheoremKind theorem_for(LossType t) {
  return (t == LossType::nca || t == LossType::nca_preference) ? TheoremKind::nca
                                                               : TheoremKind::infonca;
}

inline std::string_view to_string(TheoremKind k) {
  return k == TheoremKind::infonca ? "infonca" : "nca";
}

struct Tolerances {
  double residual = 1e-3;
  double policy = 1e-3;

  static Tolerances exact() { return {1e-3, 1e-3}; }
  static Tolerances stochastic() { return {5e-2, 5e-2}; }
};

struct OracleReport {
  std::string instruction_id;
  TheoremKind kind = TheoremKind::infonca;
  double max_abs_residual_error = 0.0;    // max |f - f*_nca|
  double max_pairwise_diff_error = 0.0;   // max |(f_i - f_j) - (r_i - r_j)/α|
  double policy_total_variation = 0.0;    // TV(model policy, π*)
  double policy_kl = 0.0;                 // KL(renormalized model policy || π*)
  double self_normalization_error = 0.0;  // |E_μ e^f - 1|
  double f_best = 0.0;                    // f at the highest-reward response
  bool f_best_nonneg = true;
  bool residual_passed = false;
  bool policy_passed = false;
  bool passed = false;
};

/// Checks a trained residual model against the closed-form optimum, one
/// report per instruction. The model policy is μ e^f renormalized for
/// InfoNCA and μ e^f as-is for NCA.
template <EnumerablePolicy P>
std::vector<OracleReport> verify_theorems(const ResidualModel<P>& trained, const P& mu,
                                          const RewardModel& reward, double alpha,
                                          TheoremKind kind, Tolerances tol = {},
                                          std::size_t cap = kDefaultEnumerationCap) {
  if (!trained.reference.same_shape(mu) || !trained.policy.same_shape(mu))
    throw ValidationError("trained model and reference policy differ in family or dimensions");
  std::vector<OracleReport> out;
  for (std::size_t x = 0; x < mu.num_instructions(); ++x) {
    OracleReport rep;
    rep.instruction_id = instruction_name(x);
    rep.kind = kind;

    const auto part = exact_partition(mu, reward, alpha, x, cap);
    const auto target = optimal_policy(mu, reward, alpha, x, cap);
    const auto lmu = mu.log_probs(x);
    const auto f = trained.residuals(x);

    double dmin = std::numeric_limits<double>::infinity();
    double dmax = -dmin;
    std::vector<double> log_q;  // log μ e^f over the support
    std::vector<ResponseId> support;
    ResponseId best = 0;
    bool have_best = false;
    for (ResponseId y = 0; y < f.size(); ++y) {
      if (std::exp(lmu[y]) == 0.0) continue;
      const double t = reward(x, y) / alpha;
      const double d = f[y] - t;
      dmin = std::min(dmin, d);
      dmax = std::max(dmax, d);
      rep.max_abs_residual_error = std::max(rep.max_abs_residual_error, std::abs(f[y] - (t - part.log_z)));
      if (!have_best || reward(x, y) > reward(x, best)) {
        best = y;
        have_best = true;
      }
      support.push_back(y);
      log_q.push_back(lmu[y] + f[y]);
    }
    rep.max_pairwise_diff_error = dmax - dmin;
    rep.f_best = f[best];
    rep.f_best_nonneg = rep.f_best >= -tol.residual;

    const double log_mass = log_sum_exp(log_q);
    rep.self_normalization_error = std::abs(std::exp(log_mass) - 1.0);
    const double shift = kind == TheoremKind::infonca ? log_mass : 0.0;
    double tv = 0.0;
    double kl = 0.0;
    for (std::size_t i = 0; i < support.size(); ++i) {
      const double q = std::exp(log_q[i] - shift);
      tv += std::abs(q - target[support[i]]);
      const double qn = std::exp(log_q[i] - log_mass);
      if (qn > 0.0) kl += qn * ((log_q[i] - log_mass) - std::log(target[support[i]]));
    }
    rep.policy_total_variation = 0.5 * tv;
    rep.policy_kl = std::max(kl, 0.0);

    rep.policy_passed = rep.policy_total_variation < tol.policy;
    if (kind == TheoremKind::infonca) {
      rep.residual_passed = rep.max_pairwise_diff_error < tol.residual;
    } else {
      rep.residual_passed = rep.max_abs_residual_error < tol.residual && rep.f_best_nonneg;
    }
    rep.passed = rep.residual_passed && rep.policy_passed;
    out.push_back(std::move(rep));
  }
  return out;
}

inline bool all_passed(const std::vector<OracleReport>& reports) {
  return std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
}

// Serialization: a human-readable block and CSV rows.

inline void write_report_text(std::ostream& os, const OracleReport& r) {
  std::ostringstream s;
  s.precision(6);
  s << std::scientific;
  s << "[oracle-report]\n"
    << "instruction              " << r.instruction_id << '\n'
    << "theorem                  " << to_string(r.kind) << '\n'
    << "max_abs_residual_error   " << r.max_abs_residual_error << '\n'
    << "max_pairwise_diff_error  " << r.max_pairwise_diff_error << '\n'
    << "policy_total_variation   " << r.policy_total_variation << '\n'
    << "policy_kl                " << r.policy_kl << '\n'
    << "self_normalization_error " << r.self_normalization_error << '\n'
    << "f_best                   " << r.f_best << '\n'
    << "f_best_nonneg            " << (r.f_best_nonneg ? "true" : "false") << '\n'
    << "passed                   " << (r.passed ? "true" : "false") << '\n';
  os << s.str();
}

inline constexpr const char* kReportCsvHeader =
    "instruction,theorem,max_abs_residual_error,max_pairwise_diff_error,policy_total_variation,"
    "policy_kl,self_normalization_error,f_best,f_best_nonneg,residual_passed,policy_passed,passed";

inline void write_report_csv_row(std::ostream& os, const OracleReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << r.instruction_id << ',' << to_string(r.kind) << ',' << r.max_abs_residual_error << ','
    << r.max_pairwise_diff_error << ',' << r.policy_total_variation << ',' << r.policy_kl << ','
    << r.self_normalization_error << ',' << r.f_best << ',' << int(r.f_best_nonneg) << ','
    << int(r.residual_passed) << ',' << int(r.policy_passed) << ',' << int(r.passed) << '\n';
  os << s.str();
}

}  // namespace ncalab
