#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/losses.hpp"
#include "ncalab/oracle.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/reward.hpp"

namespace ncalab {

enum class BatchMode { exact_expectation, stochastic };

inline std::string_view to_string(BatchMode m) {
  return m == BatchMode::exact_expectation ? "exact" : "stochastic";
}

inline BatchMode parse_batch_mode(std::string_view s) {
  if (s == "exact" || s == "exact_expectation") return BatchMode::exact_expectation;
  if (s == "stochastic") return BatchMode::stochastic;
  throw ValidationError("unknown batch mode '" + std::string(s) + "' (expected exact or stochastic)");
}

/// Everything that determines a training run.
struct AlignmentConfig {
  LossType loss = LossType::infonca;
  std::size_t k = 4;
  double alpha = 1.0;        // reward temperature
  bool hard_labels = false;  // α → 0 limit
  double beta = 1.0;         // residual scale
  double learning_rate = 0.5;
  std::size_t steps = 100;
  BatchMode batch_mode = BatchMode::exact_expectation;
  std::uint64_t seed = 0;
  std::size_t metrics_every = 10;
  double divergence_limit = 50.0;
  std::size_t enumeration_cap = kDefaultEnumerationCap;

  /// Preference losses always train on hard (winner, loser) labels.
  bool uses_hard_labels() const { return hard_labels || is_preference_loss(loss); }

  void validate() const {
    if (k < min_responses(loss))
      throw ValidationError(std::string(to_string(loss)) + " requires K >= " +
                            std::to_string(min_responses(loss)) + ", got K=" + std::to_string(k));
    if (is_preference_loss(loss) && k != 2)
      throw ValidationError(std::string(to_string(loss)) + " works on pairs and requires K = 2");
    if (!uses_hard_labels() && !(alpha > 0.0 && std::isfinite(alpha)))
      throw ValidationError("alpha must be positive (or enable hard labels)");
    if (!(beta > 0.0 && std::isfinite(beta))) throw ValidationError("beta must be positive");
    if (!(learning_rate > 0.0 && std::isfinite(learning_rate)))
      throw ValidationError("learning rate must be positive");
    if (metrics_every == 0) throw ValidationError("metrics cadence must be at least 1");
    if (!(divergence_limit > 0.0)) throw ValidationError("divergence limit must be positive");
  }
};

/// Telemetry for one step. Per-response vectors are ordered by descending
/// reward within each record (chosen then rejected for pairs) and averaged
/// over records.
struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<double> mean_log_probs;
  std::vector<double> mean_residuals;
  double margin = 0.0;  // mean f(best) - f(worst)
  double kl = 0.0;      // mean over instructions of KL(π_θ || μ)
  double rl_objective = 0.0;
  double expected_reward = 0.0;
};

template <EnumerablePolicy P>
struct TrainRunResult {
  P policy;
  std::vector<MetricsRecord> trajectory;
  AlignmentConfig config;
  double wall_seconds = 0.0;
};

// ---------------------------------------------------------------------------
// Metric views

/// A group of responses of one instruction in the order metrics report them.
struct MetricSample {
  std::size_t x = 0;
  std::vector<ResponseId> ordered;
};

inline std::vector<MetricSample> metric_samples(const std::vector<RewardRecord>& records) {
  std::vector<MetricSample> out;
  for (const auto& r : records) {
    std::vector<std::size_t> idx(r.k());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return r.rewards[a] > r.rewards[b]; });
    MetricSample s{instruction_index(r.instruction_id), {}};
    for (std::size_t i : idx) s.ordered.push_back(r.responses[i]);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<MetricSample> metric_samples(const std::vector<PreferenceRecord>& pairs) {
  std::vector<MetricSample> out;
  for (const auto& p : pairs) out.push_back({instruction_index(p.instruction_id), {p.winner, p.loser}});
  return out;
}

/// Every response of every instruction, best first.
inline std::vector<MetricSample> metric_samples(const RewardModel& reward) {
  std::vector<MetricSample> out;
  for (std::size_t x = 0; x < reward.num_instructions(); ++x) {
    const auto r = reward.row(x);
    MetricSample s{x, std::vector<ResponseId>(r.size())};
    std::iota(s.ordered.begin(), s.ordered.end(), 0);
    std::stable_sort(s.ordered.begin(), s.ordered.end(),
                     [&](ResponseId a, ResponseId b) { return r[a] > r[b]; });
    out.push_back(std::move(s));
  }
  return out;
}

template <EnumerablePolicy P>
MetricsRecord record_metrics(const ResidualModel<P>& model, const std::vector<MetricSample>& samples,
                             const RewardModel& reward, double alpha, double loss = 0.0,
                             std::size_t step = 0, std::size_t cap = kDefaultEnumerationCap) {
  MetricsRecord m;
  m.step = step;
  m.loss = loss;
  const std::size_t width = samples.empty() ? 0 : samples.front().ordered.size();
  m.mean_log_probs.assign(width, 0.0);
  m.mean_residuals.assign(width, 0.0);
  for (const auto& s : samples) {
    if (s.ordered.size() != width) throw ValidationError("metric samples differ in length");
    for (std::size_t i = 0; i < width; ++i) {
      m.mean_log_probs[i] += model.policy.log_prob(s.x, s.ordered[i]);
      m.mean_residuals[i] += model.residual(s.x, s.ordered[i]);
    }
    if (width > 0)
      m.margin += model.residual(s.x, s.ordered.front()) - model.residual(s.x, s.ordered.back());
  }
  if (!samples.empty()) {
    const double n = static_cast<double>(samples.size());
    for (double& v : m.mean_log_probs) v /= n;
    for (double& v : m.mean_residuals) v /= n;
    m.margin /= n;
  }
  const std::size_t nx = model.policy.num_instructions();
  for (std::size_t x = 0; x < nx; ++x) {
    m.kl += exact_kl(model.policy, model.reference, x, cap);
    m.expected_reward += expected_reward(model.policy, reward, x, cap);
  }
  m.kl /= static_cast<double>(nx);
  m.expected_reward /= static_cast<double>(nx);
  m.rl_objective = m.expected_reward - alpha * m.kl;
  return m;
}

// ---------------------------------------------------------------------------
// Objective

/// A weighted sum of per-record losses over fixed-size groups of responses.
///
/// Dataset mode holds one group per record with weight 1/n. Exact mode holds
/// the population objective: for InfoNCA-type losses every ordered K-tuple of
/// the support with weight p(x) Π μ(y_i|x) and per-tuple soft labels, stored
/// once per sorted tuple; for
/// NCA one group per response with weight p(x) μ(y|x), importance weight
/// e^{r/α}/Z(x) and regularizer weight 1.
template <EnumerablePolicy P>
class Objective {
 public:
  /// Population objective under μ and `reward`.
  static Objective exact(const AlignmentConfig& config, const P& mu, const RewardModel& reward) {
    config.validate();
    check_enumerable(mu, config.enumeration_cap);
    reward.check_compatible(mu);
    Objective obj(config, mu);
    const std::size_t nx = mu.num_instructions();
    const double px = 1.0 / static_cast<double>(nx);

    if (config.loss == LossType::nca) {
      obj.width_ = 1;
      for (std::size_t x = 0; x < nx; ++x) {
        const auto lmu = mu.log_probs(x);
        std::vector<double> w(lmu.size(), 0.0);
        if (config.uses_hard_labels()) {
          double best = -std::numeric_limits<double>::infinity();
          for (ResponseId y = 0; y < lmu.size(); ++y)
            if (std::exp(lmu[y]) > 0.0) best = std::max(best, reward(x, y));
          double mass = 0.0;
          for (ResponseId y = 0; y < lmu.size(); ++y)
            if (std::exp(lmu[y]) > 0.0 && reward(x, y) == best) mass += std::exp(lmu[y]);
          for (ResponseId y = 0; y < lmu.size(); ++y)
            if (std::exp(lmu[y]) > 0.0 && reward(x, y) == best) w[y] = 1.0 / mass;
        } else {
          const auto part = exact_partition(mu, reward, config.alpha, x, config.enumeration_cap);
          for (ResponseId y = 0; y < lmu.size(); ++y)
            w[y] = std::exp(reward(x, y) / config.alpha - part.log_z);
        }
        for (ResponseId y = 0; y < lmu.size(); ++y) {
          const double p = std::exp(lmu[y]);
          if (p == 0.0) continue;
          obj.add_group(x, std::span<const ResponseId>(&y, 1), std::span<const double>(&w[y], 1),
                        1.0, px * p);
        }
      }
      return obj;
    }

    const std::size_t k = config.k;
    const std::size_t m = mu.support_size();
    double tuples = 1.0;
    for (std::size_t i = 0; i < k; ++i) tuples *= static_cast<double>(m);
    if (tuples > static_cast<double>(config.enumeration_cap))
      throw EnumerationCapError("exact expectation needs " + std::to_string(m) + "^" +
                                std::to_string(k) + " tuples per instruction, above the cap " +
                                std::to_string(config.enumeration_cap));
    // The per-tuple loss is symmetric in its K entries, so each sorted tuple
    // stands in for all of its orderings with a multinomial weight.
    obj.width_ = k;
    const double reg = 1.0 / static_cast<double>(k);
    std::vector<double> log_fact(k + 1, 0.0);
    for (std::size_t i = 1; i <= k; ++i) log_fact[i] = log_fact[i - 1] + std::log(static_cast<double>(i));
    std::vector<ResponseId> tuple(k, 0);
    std::vector<double> rewards(k);
    for (std::size_t x = 0; x < nx; ++x) {
      const auto lmu = mu.log_probs(x);
      std::fill(tuple.begin(), tuple.end(), 0);
      while (true) {
        double lw = log_fact[k];
        std::size_t run = 0;
        for (std::size_t i = 0; i < k; ++i) {
          lw += lmu[tuple[i]];
          rewards[i] = reward(x, tuple[i]);
          run = (i > 0 && tuple[i] == tuple[i - 1]) ? run + 1 : 1;
          if (i + 1 == k || tuple[i + 1] != tuple[i]) lw -= log_fact[run];
        }
        const double w = std::exp(lw);
        if (w > 0.0) {
          const auto labels = soft_labels(rewards, config.alpha, config.uses_hard_labels());
          obj.add_group(x, tuple, labels.values(), reg, px * w);
        }
        std::size_t pos = k;
        while (pos > 0 && tuple[pos - 1] + 1 == m) --pos;
        if (pos == 0) break;
        const ResponseId next = tuple[pos - 1] + 1;
        std::fill(tuple.begin() + static_cast<std::ptrdiff_t>(pos - 1), tuple.end(), next);
      }
    }
    return obj;
  }

  /// Mean loss over reward records (InfoNCA / NCA).
  static Objective from_records(const AlignmentConfig& config, const P& mu,
                                const std::vector<RewardRecord>& records) {
    config.validate();
    if (is_preference_loss(config.loss))
      throw ValidationError("preference losses train on pairs; convert with to_preference_pairs");
    const std::size_t k = uniform_k(records);
    if (k != config.k)
      throw ValidationError("dataset has K=" + std::to_string(k) + " but the config asks for K=" +
                            std::to_string(config.k));
    Objective obj(config, mu);
    obj.width_ = k;
    const double w = 1.0 / static_cast<double>(records.size());
    for (const auto& r : records) {
      r.validate();
      const auto labels = soft_labels(r.rewards, config.alpha, config.uses_hard_labels());
      obj.add_group(instruction_index(r.instruction_id), r.responses, labels.values(),
                    1.0 / static_cast<double>(k), w);
    }
    return obj;
  }

  /// Mean loss over preference pairs (DPO / NCA preference).
  static Objective from_pairs(const AlignmentConfig& config, const P& mu,
                              const std::vector<PreferenceRecord>& pairs) {
    config.validate();
    if (!is_preference_loss(config.loss))
      throw ValidationError("reward losses train on reward records, not pairs");
    if (pairs.empty()) throw ValidationError("dataset is empty");
    Objective obj(config, mu);
    obj.width_ = 2;
    const double w = 1.0 / static_cast<double>(pairs.size());
    const double hard[2] = {1.0, 0.0};
    for (const auto& p : pairs) {
      const ResponseId ys[2] = {p.winner, p.loser};
      obj.add_group(instruction_index(p.instruction_id), ys, hard, 0.5, w);
    }
    return obj;
  }

  std::size_t num_groups() const noexcept { return weights_.size(); }

  /// Objective value at `policy`; when `grad` is non-empty, also writes the
  /// gradient with respect to the policy logits into it (overwriting).
  double evaluate(const P& policy, std::span<double> grad = {}) const {
    return evaluate_impl(policy, grad, std::numeric_limits<double>::infinity(), 0);
  }

  /// As evaluate(), but raises TrainingError when a residual on μ's support
  /// exceeds `limit` in magnitude or the loss is not finite.
  double evaluate_guarded(const P& policy, std::span<double> grad, double limit, long step) const {
    return evaluate_impl(policy, grad, limit, step);
  }

 private:
  Objective(const AlignmentConfig& config, const P& mu)
      : contrastive_(config.loss == LossType::infonca || config.loss == LossType::dpo),
        beta_(config.beta),
        mu_(mu) {
    for (std::size_t x = 0; x < mu.num_instructions(); ++x) mu_log_probs_.push_back(mu.log_probs(x));
  }

  void add_group(std::size_t x, std::span<const ResponseId> ys, std::span<const double> labels,
                 double reg, double weight) {
    mu_.check_instruction(x);
    for (ResponseId y : ys) {
      if (y >= mu_.support_size())
        throw ValidationError("response id " + std::to_string(y) + " outside the response space");
      if (std::exp(mu_log_probs_[x][y]) == 0.0)
        throw ValidationError("response " + std::to_string(y) + " of " + instruction_name(x) +
                              " lies outside the support of the reference policy");
    }
    instr_.push_back(x);
    responses_.insert(responses_.end(), ys.begin(), ys.end());
    labels_.insert(labels_.end(), labels.begin(), labels.end());
    regs_.push_back(reg);
    weights_.push_back(weight);
  }

  double evaluate_impl(const P& policy, std::span<double> grad, double limit, long step) const {
    const std::size_t nx = policy.num_instructions();
    std::vector<std::vector<double>> f(nx);
    std::vector<std::vector<double>> coeff(nx);
    for (std::size_t x = 0; x < nx; ++x) {
      f[x] = policy.log_probs(x);
      for (ResponseId y = 0; y < f[x].size(); ++y) {
        f[x][y] = beta_ * (f[x][y] - mu_log_probs_[x][y]);
        if (std::abs(f[x][y]) > limit && std::exp(mu_log_probs_[x][y]) > 0.0)
          throw TrainingError("residual magnitude exceeded " + std::to_string(limit) + " at step " +
                              std::to_string(step), step);
      }
      if (!grad.empty()) coeff[x].assign(f[x].size(), 0.0);
    }
    std::vector<double> fk(width_), gk(width_);
    double loss = 0.0;
    for (std::size_t gi = 0; gi < weights_.size(); ++gi) {
      const std::size_t x = instr_[gi];
      const ResponseId* ys = responses_.data() + gi * width_;
      const std::span<const double> labels(labels_.data() + gi * width_, width_);
      for (std::size_t i = 0; i < width_; ++i) fk[i] = f[x][ys[i]];
      const double w = weights_[gi];
      if (contrastive_) {
        loss += w * detail::infonca_raw(fk, labels);
        if (!grad.empty()) detail::infonca_raw_gradient(fk, labels, gk);
      } else {
        loss += w * detail::nca_terms(fk, labels, regs_[gi]);
        if (!grad.empty()) detail::nca_terms_gradient(fk, labels, regs_[gi], gk);
      }
      if (!grad.empty())
        for (std::size_t i = 0; i < width_; ++i) coeff[x][ys[i]] += w * beta_ * gk[i];
    }
    if (!std::isfinite(loss))
      throw TrainingError("non-finite loss at step " + std::to_string(step), step);
    if (!grad.empty()) {
      if (grad.size() != policy.num_params()) throw ValidationError("gradient buffer has wrong size");
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t x = 0; x < nx; ++x) policy.backprop_log_probs(x, coeff[x], grad);
    }
    return loss;
  }

  bool contrastive_;
  double beta_;
  P mu_;
  std::vector<std::vector<double>> mu_log_probs_;
  std::size_t width_ = 0;
  std::vector<std::size_t> instr_;
  std::vector<ResponseId> responses_;
  std::vector<double> labels_;
  std::vector<double> regs_;
  std::vector<double> weights_;
};

/// Gradient of the population objective at `policy` (μ itself by default).
template <EnumerablePolicy P>
std::vector<double> exact_expectation_gradient(const AlignmentConfig& config, const P& mu,
                                               const RewardModel& reward,
                                               const std::optional<P>& policy = std::nullopt) {
  const auto obj = Objective<P>::exact(config, mu, reward);
  const P& at = policy ? *policy : mu;
  std::vector<double> grad(at.num_params(), 0.0);
  obj.evaluate(at, grad);
  return grad;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

template <EnumerablePolicy P>
TrainRunResult<P> run_descent(const AlignmentConfig& config, const P& mu, const RewardModel& reward,
                              const Objective<P>& objective,
                              const std::vector<MetricSample>& samples) {
  const auto start = std::chrono::steady_clock::now();
  ResidualModel<P> model = ResidualModel<P>::at_reference(mu, config.beta);
  std::vector<double> grad(mu.num_params(), 0.0);
  TrainRunResult<P> result{mu, {}, config, 0.0};
  for (std::size_t step = 0;; ++step) {
    const double loss = objective.evaluate_guarded(model.policy, grad, config.divergence_limit,
                                                   static_cast<long>(step));
    if (step % config.metrics_every == 0 || step == config.steps)
      result.trajectory.push_back(record_metrics(model, samples, reward, config.alpha, loss, step,
                                                 config.enumeration_cap));
    if (step == config.steps) break;
    auto logits = model.policy.logits();
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] -= config.learning_rate * grad[i];
    for (double v : logits)
      if (!std::isfinite(v))
        throw TrainingError("non-finite logits after step " + std::to_string(step), static_cast<long>(step));
  }
  result.policy = std::move(model.policy);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace detail

/// Exact-expectation training on the population objective; π_θ starts at μ.
template <EnumerablePolicy P>
TrainRunResult<P> train(const AlignmentConfig& config, const P& mu, const RewardModel& reward) {
  config.validate();
  if (config.batch_mode != BatchMode::exact_expectation)
    throw ValidationError("stochastic training needs a dataset");
  const auto objective = Objective<P>::exact(config, mu, reward);
  return detail::run_descent(config, mu, reward, objective, metric_samples(reward));
}

/// Training on reward records. Preference losses first convert the records
/// with to_preference_pairs(records, config.seed). In exact mode the records
/// only define the metric view.
template <EnumerablePolicy P>
TrainRunResult<P> train(const AlignmentConfig& config, const P& mu, const RewardModel& reward,
                        const std::vector<RewardRecord>& records) {
  config.validate();
  if (is_preference_loss(config.loss)) {
    if (config.batch_mode == BatchMode::exact_expectation)
      return detail::run_descent(config, mu, reward, Objective<P>::exact(config, mu, reward),
                                 metric_samples(to_preference_pairs(records, config.seed)));
    const auto pairs = to_preference_pairs(records, config.seed);
    return detail::run_descent(config, mu, reward, Objective<P>::from_pairs(config, mu, pairs),
                               metric_samples(pairs));
  }
  if (config.batch_mode == BatchMode::exact_expectation)
    return detail::run_descent(config, mu, reward, Objective<P>::exact(config, mu, reward),
                               metric_samples(records));
  return detail::run_descent(config, mu, reward, Objective<P>::from_records(config, mu, records),
                             metric_samples(records));
}

template <EnumerablePolicy P>
TrainRunResult<P> train(const AlignmentConfig& config, const P& mu, const RewardModel& reward,
                        const std::vector<PreferenceRecord>& pairs) {
  config.validate();
  const auto objective = config.batch_mode == BatchMode::exact_expectation
                             ? Objective<P>::exact(config, mu, reward)
                             : Objective<P>::from_pairs(config, mu, pairs);
  return detail::run_descent(config, mu, reward, objective, metric_samples(pairs));
}

}  // namespace ncalab
