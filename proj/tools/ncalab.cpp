// ncalab command-line front end: synth, train, verify, sweep, fig2, report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ncalab/ncalab.hpp"

namespace fs = std::filesystem;
using namespace ncalab;

namespace {

struct Globals {
  std::string out = "ncalab-out";
  std::uint64_t seed = 0;
  std::string config;
  CLI::Option* seed_opt = nullptr;
};

/// Flags shared by the commands that build an instance. Each one only
/// applies when given on the command line.
struct InstanceFlags {
  std::string instance;
  std::string family;
  std::size_t n = 0, m = 0, vocab = 0, max_length = 0;
  std::string reward;
  std::uint64_t reward_seed = 0;
  std::string loss;
  std::size_t k = 0;
  double alpha = 1.0;
  bool hard = false;
  double beta = 1.0;
  double lr = 0.5;
  std::size_t steps = 0;
  std::string batch;
  std::size_t metrics_every = 1;
  std::size_t records_per_instruction = 1;

  std::map<std::string, CLI::Option*> opts;

  void add_reference(CLI::App* app) {
    opts["instance"] = app->add_option("--instance", instance,
                                       "Preset: tabular, fig2, stochastic or autoregressive");
    opts["family"] = app->add_option("--family", family, "Reference family: tabular or autoregressive");
    opts["n"] = app->add_option("--n", n, "Number of instructions");
    opts["m"] = app->add_option("--m", m, "Responses per instruction (tabular)");
    opts["vocab"] = app->add_option("--vocab", vocab, "Vocabulary size including EOS (autoregressive)");
    opts["max-length"] = app->add_option("--max-length", max_length, "Maximum response length");
    opts["reward"] = app->add_option("--reward", reward, "Reward model: linear, random-table or bimodal");
    opts["reward-seed"] = app->add_option("--reward-seed", reward_seed, "Reward table seed");
  }

  void add_training(CLI::App* app) {
    opts["loss"] = app->add_option("--loss", loss, "infonca, nca, dpo or nca_preference");
    opts["k"] = app->add_option("--k", k, "Responses per record");
    opts["alpha"] = app->add_option("--alpha", alpha, "Reward temperature");
    opts["hard"] = app->add_flag("--hard", hard, "Use hard labels (alpha -> 0 limit)");
    opts["beta"] = app->add_option("--beta", beta, "Residual scale");
    opts["lr"] = app->add_option("--lr", lr, "Learning rate");
    opts["steps"] = app->add_option("--steps", steps, "Gradient steps");
    opts["batch"] = app->add_option("--batch", batch, "exact or stochastic");
    opts["metrics-every"] = app->add_option("--metrics-every", metrics_every, "Metrics cadence in steps");
    opts["records-per-instruction"] = app->add_option(
        "--records-per-instruction", records_per_instruction, "Records drawn per instruction");
  }

  bool given(const std::string& key) const {
    const auto it = opts.find(key);
    return it != opts.end() && it->second->count() > 0;
  }

  /// Preset, then flags, then the --config file.
  Instance build(const Globals& g, const std::string& default_instance) const {
    Instance inst = shipped_instance(given("instance") ? instance : default_instance);
    auto& r = inst.reference;
    if (given("family")) r.family = family;
    if (given("n")) {
      r.num_instructions = n;
      inst.synthesis.num_instructions = n;
    }
    if (given("m")) r.num_responses = m;
    if (given("vocab")) r.vocab = vocab;
    if (given("max-length")) r.max_length = max_length;
    if (given("reward")) inst.reward.name = reward;
    if (given("reward-seed")) inst.reward.seed = reward_seed;
    inst.synthesis.reward = inst.reward;
    auto& t = inst.train;
    if (given("loss")) t.loss = parse_loss_type(loss);
    if (given("k")) {
      t.k = k;
      inst.synthesis.responses_per_instruction = k;
    }
    if (given("alpha")) t.alpha = alpha;
    if (given("hard")) t.hard_labels = hard;
    if (given("beta")) t.beta = beta;
    if (given("lr")) t.learning_rate = lr;
    if (given("steps")) t.steps = steps;
    if (given("batch")) t.batch_mode = parse_batch_mode(batch);
    if (given("metrics-every")) t.metrics_every = metrics_every;
    if (given("records-per-instruction")) inst.synthesis.records_per_instruction = records_per_instruction;
    if (g.seed_opt->count() > 0) {
      t.seed = g.seed;
      inst.synthesis.seed = g.seed;
    }
    if (!g.config.empty()) apply_config(inst, load_config_file(g.config));
    return inst;
  }
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir + "': " + ec.message());
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, const InstanceFlags& f, const std::string& data_path,
              const std::string& loss_hint) {
  Instance inst = f.build(g, "tabular");
  if (!loss_hint.empty()) {
    const LossType hint = parse_loss_type(loss_hint);
    if (inst.synthesis.responses_per_instruction < min_responses(hint))
      std::cerr << "warning: " << to_string(hint) << " requires K >= " << min_responses(hint)
                << "; this dataset has K=" << inst.synthesis.responses_per_instruction << '\n';
  }
  if (inst.synthesis.num_instructions > inst.reference.num_instructions)
    inst.reference.num_instructions = inst.synthesis.num_instructions;
  const AnyPolicy mu = make_reference(inst.reference);
  const RewardModel reward = make_reward(inst, mu);
  const auto records =
      std::visit([&](const auto& p) { return synthesize_dataset(inst.synthesis, p, reward); }, mu);

  const std::string path = data_path.empty() ? (fs::path(g.out) / "dataset.jsonl").string() : data_path;
  if (fs::path(path).has_parent_path()) ensure_dir(fs::path(path).parent_path().string());
  save_reward_dataset(path, records);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : records)
    for (double v : r.rewards) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
      ++count;
    }
  std::cout << "wrote " << records.size() << " records to " << path << '\n'
            << "instructions " << inst.synthesis.num_instructions << ", K "
            << inst.synthesis.responses_per_instruction << ", records per instruction "
            << inst.synthesis.records_per_instruction << '\n'
            << "reward " << inst.reward.name << ": min " << lo << ", mean " << sum / count << ", max " << hi
            << '\n'
            << "fingerprint " << hex(dataset_fingerprint(records)) << '\n';
  return 0;
}

int cmd_train(const Globals& g, const InstanceFlags& f, const std::string& data_path) {
  Instance inst = f.build(g, "tabular");
  std::optional<std::vector<RewardRecord>> records;
  if (!data_path.empty()) {
    records = load_reward_dataset(data_path);
    std::size_t need = 0;
    for (const auto& r : *records) need = std::max(need, instruction_index(r.instruction_id) + 1);
    inst.reference.num_instructions = std::max(inst.reference.num_instructions, need);
    if (!is_preference_loss(inst.train.loss) && !f.given("k") && !records->empty())
      inst.train.k = uniform_k(*records);
  }
  const auto run = run_instance(inst, records);
  if (run.num_pairs > 0)
    std::cout << "converted " << run.num_records << " records to " << run.num_pairs
              << " preference pairs\n";

  ensure_dir(g.out);
  const fs::path dir(g.out);
  {
    std::ofstream csv(dir / "trajectory.csv");
    write_trajectory_csv(csv, run.trajectory);
  }
  save_checkpoint((dir / "policy.ckpt").string(), run.policy);
  const auto& last = run.trajectory.back();
  nlohmann::json meta = to_json(inst);
  meta["result"] = {{"steps_recorded", run.trajectory.size()},
                    {"wall_seconds", run.wall_seconds},
                    {"num_records", run.num_records},
                    {"num_pairs", run.num_pairs},
                    {"dataset_fingerprint", hex(run.fingerprint)},
                    {"final_loss", last.loss},
                    {"final_kl", last.kl},
                    {"final_expected_reward", last.expected_reward},
                    {"final_rl_objective", last.rl_objective}};
  write_file(dir / "run.json", meta.dump(2) + "\n");

  std::cout << "loss " << to_string(run.config.loss) << ", " << run.config.steps << " steps in "
            << run.wall_seconds << " s\n"
            << "final loss " << last.loss << ", KL " << last.kl << ", expected reward "
            << last.expected_reward << '\n'
            << "artifacts in " << dir.string() << '\n';
  return 0;
}

int cmd_verify(const Globals& g, const InstanceFlags& f, const std::string& run_dir,
               std::string checkpoint, const std::string& theorem, double tol,
               const std::string& emit_optimal) {
  Instance inst = f.build(g, "tabular");
  if (!run_dir.empty()) {
    inst = instance_from_config(load_config_file((fs::path(run_dir) / "run.json").string()));
    if (checkpoint.empty()) checkpoint = (fs::path(run_dir) / "policy.ckpt").string();
  }
  if (!emit_optimal.empty()) {
    save_checkpoint(emit_optimal, instance_optimum(inst));
    std::cout << "wrote optimal policy to " << emit_optimal << '\n';
    if (checkpoint.empty()) return 0;
  }
  if (checkpoint.empty()) throw ValidationError("verify needs --run DIR or --checkpoint FILE");
  TheoremKind kind = theorem_for(inst.train.loss);
  if (theorem == "infonca") kind = TheoremKind::infonca;
  else if (theorem == "nca") kind = TheoremKind::nca;
  else if (!theorem.empty()) throw ValidationError("--theorem must be infonca or nca");

  const auto reports = verify_policy(load_checkpoint(checkpoint), inst, kind, {tol, tol});
  for (const auto& r : reports) write_report_text(std::cout, r);
  ensure_dir(g.out);
  std::ofstream csv(fs::path(g.out) / "verify.csv");
  csv << kReportCsvHeader << '\n';
  for (const auto& r : reports) write_report_csv_row(csv, r);
  const bool ok = all_passed(reports);
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : 1;
}

template <class T, class F>
std::vector<T> parse_list(const std::string& s, F parse) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse(item));
  if (out.empty()) throw ValidationError("empty list '" + s + "'");
  return out;
}

int cmd_sweep(const Globals& g, const InstanceFlags& f, const std::string& losses,
              const std::string& ks, const std::string& alphas, const std::string& betas,
              std::size_t replicates, std::size_t jobs, std::size_t job_cap) {
  SweepGrid grid;
  grid.base = f.build(g, "stochastic");
  grid.losses = parse_list<LossType>(losses, [](const std::string& s) { return parse_loss_type(s); });
  grid.ks = parse_list<std::size_t>(ks, [](const std::string& s) { return std::stoul(s); });
  grid.alphas = parse_list<AlphaSetting>(alphas, [](const std::string& s) { return parse_alpha_setting(s); });
  grid.betas = parse_list<double>(betas, [](const std::string& s) { return std::stod(s); });
  grid.replicates = replicates;
  grid.job_cap = job_cap;
  const auto rows = run_sweep(grid, jobs);

  ensure_dir(g.out);
  const auto path = fs::path(g.out) / "sweep.csv";
  std::ofstream csv(path);
  write_sweep_csv(csv, rows);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.ok;
  std::cout << "wrote " << rows.size() << " rows (" << failed << " failed) to " << path.string() << '\n';
  for (std::size_t k : grid.ks)
    std::cout << "K=" << k << " mean final expected reward " << mean_final_reward(rows, k) << '\n';
  return 0;
}

int cmd_fig2(const Globals& g, const InstanceFlags& f) {
  const Instance inst = f.build(g, "fig2");
  const auto r = run_fig2(inst);
  ensure_dir(g.out);
  const auto path = fs::path(g.out) / "fig2.csv";
  {
    std::ofstream csv(path);
    write_fig2_csv(csv, r);
  }
  std::cout << "dataset hash dpo " << hex(r.dpo_fingerprint) << ", nca " << hex(r.nca_fingerprint)
            << (r.dpo_fingerprint == r.nca_fingerprint ? " (identical)" : " (MISMATCH)") << '\n'
            << r.num_pairs << " preference pairs, " << r.wall_seconds << " s\n"
            << "dpo chosen log-likelihood " << r.dpo_initial_chosen_logp() << " -> "
            << r.dpo_final_chosen_logp() << ", margin " << r.dpo.front().margin << " -> "
            << r.dpo.back().margin << '\n'
            << "nca final chosen residual by instruction:";
  for (double v : r.nca_final_chosen_residual) std::cout << ' ' << v;
  std::cout << "\nwrote " << path.string() << '\n';
  return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& inputs) {
  ensure_dir(g.out);
  for (const auto& in : inputs) {
    const auto table = load_csv(in);
    const auto svg = fs::path(g.out) / (fs::path(in).stem().string() + ".svg");
    std::ofstream out(svg);
    if (!out) throw Error("cannot write '" + svg.string() + "'");
    const auto kind = render_csv_svg(table, out);
    std::cout << "wrote " << kind << " plot " << svg.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-contrastive alignment lab"};
  app.require_subcommand(1);
  // Global flags may also follow the subcommand name.
  app.fallthrough();
  Globals g;
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  g.seed_opt = app.add_option("--seed", g.seed, "Base seed for data synthesis, pair conversion and sweeps");
  app.add_option("--config", g.config, "JSON config applied on top of the preset and flags")
      ->check(CLI::ExistingFile);

  InstanceFlags synth_f, train_f, verify_f, sweep_f, fig2_f;

  auto* synth = app.add_subcommand("synth", "Write a synthetic reward dataset");
  synth_f.add_reference(synth);
  synth_f.add_training(synth);
  std::string synth_data, loss_hint;
  synth->add_option("--data", synth_data, "Dataset path (default OUT/dataset.jsonl)");
  synth->add_option("--loss-hint", loss_hint, "Warn when K is too small for this loss");

  auto* train = app.add_subcommand("train", "Train a policy and write trajectory.csv, policy.ckpt, run.json");
  train_f.add_reference(train);
  train_f.add_training(train);
  std::string train_data;
  train->add_option("--data", train_data, "Reward dataset to train on (stochastic mode)")
      ->check(CLI::ExistingFile);

  auto* verify = app.add_subcommand("verify", "Check a checkpoint against the closed-form optimum");
  verify_f.add_reference(verify);
  verify_f.add_training(verify);
  std::string run_dir, checkpoint, theorem, emit_optimal;
  double tol = 1e-3;
  verify->add_option("--run", run_dir, "Run directory written by train")->check(CLI::ExistingDirectory);
  verify->add_option("--checkpoint", checkpoint, "Policy checkpoint")->check(CLI::ExistingFile);
  verify->add_option("--theorem", theorem, "infonca or nca (default follows the loss)");
  verify->add_option("--tol", tol, "Residual and total-variation tolerance")->capture_default_str();
  verify->add_option("--emit-optimal", emit_optimal, "Write the analytic optimum to this checkpoint");

  auto* sweep = app.add_subcommand("sweep", "Grid over loss, K, alpha and beta; writes sweep.csv");
  sweep_f.add_reference(sweep);
  sweep_f.add_training(sweep);
  std::string losses = "infonca", ks = "2,4", alphas = "1", betas = "1";
  std::size_t replicates = 5, jobs = 1, job_cap = 4096;
  sweep->add_option("--losses", losses, "Comma-separated losses")->capture_default_str();
  sweep->add_option("--ks", ks, "Comma-separated K values")->capture_default_str();
  sweep->add_option("--alphas", alphas, "Comma-separated alphas or 'hard'")->capture_default_str();
  sweep->add_option("--betas", betas, "Comma-separated betas")->capture_default_str();
  sweep->add_option("--replicates", replicates, "Seeds per grid point")->capture_default_str();
  sweep->add_option("--jobs", jobs, "Concurrent runs")->capture_default_str();
  sweep->add_option("--job-cap", job_cap, "Maximum number of runs")->capture_default_str();

  auto* fig2 = app.add_subcommand("fig2", "DPO against NCA on identical preference data; writes fig2.csv");
  fig2_f.add_reference(fig2);
  fig2_f.add_training(fig2);

  auto* report = app.add_subcommand("report", "Render CSV outputs as SVG plots into OUT");
  std::vector<std::string> inputs;
  report->add_option("csv", inputs, "CSV files")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(g, synth_f, synth_data, loss_hint);
    if (*train) return cmd_train(g, train_f, train_data);
    if (*verify) return cmd_verify(g, verify_f, run_dir, checkpoint, theorem, tol, emit_optimal);
    if (*sweep) return cmd_sweep(g, sweep_f, losses, ks, alphas, betas, replicates, jobs, job_cap);
    if (*fig2) return cmd_fig2(g, fig2_f);
    if (*report) return cmd_report(g, inputs);
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
