#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <variant>
#include <vector>

#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/instance.hpp"
#include "ncalab/oracle.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/random.hpp"
#include "ncalab/reward.hpp"
#include "ncalab/trainer.hpp"

namespace ncalab {

// ---------------------------------------------------------------------------
// Single runs on an instance

/// Config actually handed to the trainer. Preference losses always train on
/// pairs, so their K is 2 regardless of how many responses each record has.
inline AlignmentConfig effective_config(const Instance& inst) {
  AlignmentConfig c = inst.train;
  if (is_preference_loss(c.loss)) c.k = 2;
  return c;
}

/// The dataset an instance trains on: reward losses draw records with
/// K = train.k, preference losses draw synthesis.k responses per record.
template <EnumerablePolicy P>
std::vector<RewardRecord> instance_dataset(const Instance& inst, const P& mu, const RewardModel& reward) {
  SynthesisSpec spec = inst.synthesis;
  spec.reward = inst.reward;
  if (!is_preference_loss(inst.train.loss)) spec.responses_per_instruction = inst.train.k;
  return synthesize_dataset(spec, mu, reward);
}

struct RunArtifacts {
  AnyPolicy reference;
  AnyPolicy policy;
  RewardModel reward;
  AlignmentConfig config;
  std::vector<MetricsRecord> trajectory;
  double wall_seconds = 0.0;
  std::size_t num_records = 0;  // 0 in exact mode without data
  std::size_t num_pairs = 0;    // records converted to preference pairs
  std::uint64_t fingerprint = 0;
};

/// Trains on `inst`. Stochastic runs use `records` when given and otherwise
/// synthesize them; exact runs use `records` only for the metric view.
inline RunArtifacts run_instance(const Instance& inst,
                                 const std::optional<std::vector<RewardRecord>>& records = std::nullopt) {
  const AnyPolicy mu_any = make_reference(inst.reference);
  RewardModel reward = make_reward(inst, mu_any);
  const AlignmentConfig config = effective_config(inst);
  config.validate();
  return std::visit(
      [&](const auto& mu) -> RunArtifacts {
        using P = std::decay_t<decltype(mu)>;
        RunArtifacts out{mu_any, mu_any, reward, config, {}, 0.0, 0, 0, 0};
        std::optional<TrainRunResult<P>> run;
        if (config.batch_mode == BatchMode::exact_expectation && !records) {
          run = train(config, mu, reward);
        } else {
          const auto data = records ? *records : instance_dataset(inst, mu, reward);
          out.num_records = data.size();
          out.fingerprint = dataset_fingerprint(data);
          if (is_preference_loss(config.loss)) {
            const auto pairs = to_preference_pairs(data, config.seed);
            out.num_pairs = pairs.size();
            out.fingerprint = dataset_fingerprint(pairs);
          }
          run = train(config, mu, reward, data);
        }
        out.policy = run->policy;
        out.trajectory = std::move(run->trajectory);
        out.wall_seconds = run->wall_seconds;
        return out;
      },
      mu_any);
}

/// Theorem reports for a trained policy against the instance's μ and reward.
inline std::vector<OracleReport> verify_policy(const AnyPolicy& trained, const Instance& inst,
                                               TheoremKind kind, Tolerances tol = {}) {
  const AnyPolicy mu_any = make_reference(inst.reference);
  const RewardModel reward = make_reward(inst, mu_any);
  return std::visit(
      [&](const auto& pi, const auto& mu) -> std::vector<OracleReport> {
        using A = std::decay_t<decltype(pi)>;
        using B = std::decay_t<decltype(mu)>;
        if constexpr (!std::is_same_v<A, B>) {
          throw ValidationError(std::string("checkpoint family ") + family_name(pi) +
                                " does not match the instance family " + family_name(mu));
        } else {
          if (!pi.same_shape(mu))
            throw ValidationError("checkpoint dimensions do not match the instance");
          const ResidualModel<A> model{pi, mu, inst.train.beta};
          return verify_theorems(model, mu, reward, inst.train.alpha, kind, tol,
                                 inst.train.enumeration_cap);
        }
      },
      trained, mu_any);
}

/// A policy whose residuals β log(π/μ) equal r/α - log Z up to a constant,
/// μ e^{r/(αβ)} normalized. At β = 1 this is π* itself.
inline AnyPolicy instance_optimum(const Instance& inst) {
  const AnyPolicy mu_any = make_reference(inst.reference);
  const RewardModel reward = make_reward(inst, mu_any);
  const double t = inst.train.alpha * inst.train.beta;
  return std::visit([&](const auto& mu) -> AnyPolicy { return optimal_policy_model(mu, reward, t); },
                    mu_any);
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Columns: step,loss,margin,kl,rl_objective,expected_reward, then
/// logp_1..logp_W and residual_1..residual_W in descending-reward order.
inline void write_trajectory_csv(std::ostream& os, const std::vector<MetricsRecord>& trajectory) {
  const std::size_t w = trajectory.empty() ? 0 : trajectory.front().mean_log_probs.size();
  os << "step,loss,margin,kl,rl_objective,expected_reward";
  for (std::size_t i = 1; i <= w; ++i) os << ",logp_" << i;
  for (std::size_t i = 1; i <= w; ++i) os << ",residual_" << i;
  os << '\n';
  for (const auto& m : trajectory) {
    os << m.step << ',' << detail::fmt(m.loss) << ',' << detail::fmt(m.margin) << ','
       << detail::fmt(m.kl) << ',' << detail::fmt(m.rl_objective) << ','
       << detail::fmt(m.expected_reward);
    for (double v : m.mean_log_probs) os << ',' << detail::fmt(v);
    for (double v : m.mean_residuals) os << ',' << detail::fmt(v);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sweeps

/// A temperature setting: a positive α or the hard-label limit.
struct AlphaSetting {
  double value = 1.0;
  bool hard = false;

  std::string label() const { return hard ? "hard" : detail::fmt(value); }
  friend bool operator<(const AlphaSetting& a, const AlphaSetting& b) {
    return std::tie(a.hard, a.value) < std::tie(b.hard, b.value);
  }
};

inline AlphaSetting parse_alpha_setting(std::string_view s) {
  if (s == "hard") return {1.0, true};
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(s), &used);
    if (used != s.size() || !(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("");
    return {v, false};
  } catch (const std::exception&) {
    throw ValidationError("alpha must be a positive number or 'hard', got '" + std::string(s) + "'");
  }
}

struct SweepGrid {
  std::vector<LossType> losses{LossType::infonca};
  std::vector<std::size_t> ks{4};
  std::vector<AlphaSetting> alphas{{1.0, false}};
  std::vector<double> betas{1.0};
  std::size_t replicates = 1;
  Instance base = shipped_instance("stochastic");
  std::size_t job_cap = 4096;

  std::size_t grid_size() const { return losses.size() * ks.size() * alphas.size() * betas.size(); }
  std::size_t num_runs() const { return grid_size() * replicates; }

  void validate() const {
    if (grid_size() == 0) throw ValidationError("sweep grid is empty");
    if (replicates == 0) throw ValidationError("replicates must be positive");
    if (num_runs() > job_cap)
      throw ValidationError("sweep has " + std::to_string(num_runs()) + " runs, above the job cap " +
                            std::to_string(job_cap));
  }
};

struct SweepRow {
  LossType loss = LossType::infonca;
  std::size_t k = 0;
  AlphaSetting alpha;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::size_t run_index = 0;
  bool ok = false;
  std::string error;
  double final_expected_reward = std::numeric_limits<double>::quiet_NaN();
  double final_kl = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

/// Instance for run `index` of the grid, enumerated loss-major then K, α, β
/// and replicate. The run seed is derive_seed(base train seed, index) and
/// drives both data synthesis and pair conversion.
inline Instance sweep_run_instance(const SweepGrid& grid, std::size_t index, SweepRow* row = nullptr) {
  std::size_t i = index;
  i /= grid.replicates;
  const double beta = grid.betas[i % grid.betas.size()];
  i /= grid.betas.size();
  const AlphaSetting alpha = grid.alphas[i % grid.alphas.size()];
  i /= grid.alphas.size();
  const std::size_t k = grid.ks[i % grid.ks.size()];
  i /= grid.ks.size();
  const LossType loss = grid.losses[i];

  Instance inst = grid.base;
  const std::uint64_t seed = derive_seed(grid.base.train.seed, index);
  inst.train.loss = loss;
  inst.train.k = k;
  inst.synthesis.responses_per_instruction = k;
  inst.train.alpha = alpha.value;
  inst.train.hard_labels = alpha.hard;
  inst.train.beta = beta;
  inst.train.seed = seed;
  inst.synthesis.seed = seed;
  inst.train.metrics_every = std::max<std::size_t>(1, inst.train.steps);
  if (row) {
    row->loss = loss;
    row->k = k;
    row->alpha = alpha;
    row->beta = beta;
    row->seed = seed;
    row->run_index = index;
  }
  return inst;
}

/// Runs every grid point on up to `jobs` threads. Failed runs become rows
/// with ok = false. Rows come back sorted by (loss, K, α, β, seed).
inline std::vector<SweepRow> run_sweep(const SweepGrid& grid, std::size_t jobs = 1) {
  grid.validate();
  const std::size_t n = grid.num_runs();
  std::vector<SweepRow> rows(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      SweepRow& row = rows[i];
      try {
        const Instance inst = sweep_run_instance(grid, i, &row);
        const auto run = run_instance(inst);
        const auto& last = run.trajectory.back();
        row.final_expected_reward = last.expected_reward;
        row.final_kl = last.kl;
        row.final_loss = last.loss;
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, n);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    const auto la = static_cast<int>(a.loss);
    const auto lb = static_cast<int>(b.loss);
    return std::tie(la, a.k, a.alpha, a.beta, a.seed, a.run_index) <
           std::tie(lb, b.k, b.alpha, b.beta, b.seed, b.run_index);
  });
  return rows;
}

inline constexpr const char* kSweepCsvHeader =
    "loss,K,alpha,beta,seed,status,final_expected_reward,final_kl,final_loss,error";

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << kSweepCsvHeader << '\n';
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << to_string(r.loss) << ',' << r.k << ',' << r.alpha.label() << ',' << detail::fmt(r.beta)
       << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ','
       << detail::fmt(r.final_expected_reward) << ',' << detail::fmt(r.final_kl) << ','
       << detail::fmt(r.final_loss) << ',' << err << '\n';
  }
}

/// Mean final expected reward of the successful rows matching `k`.
inline double mean_final_reward(const std::vector<SweepRow>& rows, std::size_t k) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.ok && r.k == k) {
      sum += r.final_expected_reward;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// DPO against NCA on identical preference data

struct Fig2Result {
  std::uint64_t dpo_fingerprint = 0;
  std::uint64_t nca_fingerprint = 0;
  std::size_t num_pairs = 0;
  std::vector<MetricsRecord> dpo;
  std::vector<MetricsRecord> nca;
  std::vector<double> nca_final_chosen_residual;      // mean per instruction
  std::vector<double> nca_min_final_chosen_residual;  // min per instruction
  std::vector<double> dpo_final_chosen_residual;
  double wall_seconds = 0.0;

  double dpo_initial_chosen_logp() const { return dpo.front().mean_log_probs.at(0); }
  double dpo_final_chosen_logp() const { return dpo.back().mean_log_probs.at(0); }
  bool dpo_likelihood_fell() const { return dpo_final_chosen_logp() < dpo_initial_chosen_logp(); }
  bool dpo_margin_grew() const { return dpo.back().margin > dpo.front().margin; }
  bool nca_chosen_nonnegative() const {
    return std::all_of(nca_final_chosen_residual.begin(), nca_final_chosen_residual.end(),
                       [](double f) { return f >= 0.0; });
  }
};

namespace detail {

template <EnumerablePolicy P>
void chosen_residual_by_instruction(const ResidualModel<P>& model,
                                    const std::vector<PreferenceRecord>& pairs, std::size_t nx,
                                    std::vector<double>& mean, std::vector<double>* minimum) {
  mean.assign(nx, 0.0);
  std::vector<std::size_t> count(nx, 0);
  if (minimum) minimum->assign(nx, std::numeric_limits<double>::infinity());
  for (const auto& p : pairs) {
    const std::size_t x = instruction_index(p.instruction_id);
    const double f = model.residual(x, p.winner);
    mean[x] += f;
    ++count[x];
    if (minimum) (*minimum)[x] = std::min((*minimum)[x], f);
  }
  std::vector<double> kept, kept_min;
  for (std::size_t x = 0; x < nx; ++x) {
    if (count[x] == 0) continue;
    kept.push_back(mean[x] / static_cast<double>(count[x]));
    if (minimum) kept_min.push_back((*minimum)[x]);
  }
  mean = std::move(kept);
  if (minimum) *minimum = std::move(kept_min);
}

}  // namespace detail

/// Trains DPO and NCA (preference form) from μ on the same pairs, derived
/// from the instance's synthesized records with the instance train seed.
inline Fig2Result run_fig2(const Instance& inst) {
  const auto start = std::chrono::steady_clock::now();
  const AnyPolicy mu_any = make_reference(inst.reference);
  const RewardModel reward = make_reward(inst, mu_any);
  Fig2Result out;
  std::visit(
      [&](const auto& mu) {
        using P = std::decay_t<decltype(mu)>;
        Instance data_inst = inst;
        data_inst.train.loss = LossType::dpo;
        const auto records = instance_dataset(data_inst, mu, reward);

        AlignmentConfig dpo_cfg = effective_config(data_inst);
        dpo_cfg.batch_mode = BatchMode::stochastic;
        AlignmentConfig nca_cfg = dpo_cfg;
        nca_cfg.loss = LossType::nca_preference;

        const auto dpo_pairs = to_preference_pairs(records, dpo_cfg.seed);
        const auto nca_pairs = to_preference_pairs(records, nca_cfg.seed);
        out.dpo_fingerprint = dataset_fingerprint(dpo_pairs);
        out.nca_fingerprint = dataset_fingerprint(nca_pairs);
        if (out.dpo_fingerprint != out.nca_fingerprint)
          throw Error("DPO and NCA runs received different datasets");
        out.num_pairs = dpo_pairs.size();

        auto dpo = train(dpo_cfg, mu, reward, dpo_pairs);
        auto nca = train(nca_cfg, mu, reward, nca_pairs);
        const std::size_t nx = mu.num_instructions();
        detail::chosen_residual_by_instruction(ResidualModel<P>{dpo.policy, mu, dpo_cfg.beta},
                                               dpo_pairs, nx, out.dpo_final_chosen_residual, nullptr);
        detail::chosen_residual_by_instruction(ResidualModel<P>{nca.policy, mu, nca_cfg.beta},
                                               nca_pairs, nx, out.nca_final_chosen_residual,
                                               &out.nca_min_final_chosen_residual);
        out.dpo = std::move(dpo.trajectory);
        out.nca = std::move(nca.trajectory);
      },
      mu_any);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline constexpr const char* kFig2CsvHeader =
    "step,dpo_chosen_logp,dpo_rejected_logp,dpo_margin,dpo_chosen_residual,dpo_rejected_residual,"
    "nca_chosen_logp,nca_rejected_logp,nca_margin,nca_chosen_residual,nca_rejected_residual";

inline void write_fig2_csv(std::ostream& os, const Fig2Result& r) {
  os << kFig2CsvHeader << '\n';
  const std::size_t n = std::min(r.dpo.size(), r.nca.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& d = r.dpo[i];
    const auto& c = r.nca[i];
    if (d.step != c.step) throw Error("fig2 trajectories are not aligned");
    os << d.step;
    for (const auto* m : {&d, &c})
      os << ',' << detail::fmt(m->mean_log_probs[0]) << ',' << detail::fmt(m->mean_log_probs[1])
         << ',' << detail::fmt(m->margin) << ',' << detail::fmt(m->mean_residuals[0]) << ','
         << detail::fmt(m->mean_residuals[1]);
    os << '\n';
  }
}

}  // namespace ncalab
