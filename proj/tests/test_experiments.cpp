#include <gtest/gtest.h>

#include <sstream>
#include <string>

#include "ncalab/ncalab.hpp"

using namespace ncalab;

namespace {

SweepGrid small_grid() {
  SweepGrid g;
  g.base.train.steps = 20;
  g.ks = {2, 4};
  g.replicates = 2;
  return g;
}

std::vector<double> logits_of(const AnyPolicy& p) {
  return std::visit([](const auto& q) { return std::vector<double>(q.logits().begin(), q.logits().end()); }, p);
}

}  // namespace

// ---------------------------------------------------------------------------
// Instances and configuration

TEST(Instances, ShippedPresetsBuild) {
  for (const char* name : {"tabular", "fig2", "stochastic", "autoregressive"}) {
    const auto inst = shipped_instance(name);
    EXPECT_NO_THROW(effective_config(inst).validate()) << name;
    const auto mu = make_reference(inst.reference);
    EXPECT_NO_THROW(make_reward(inst, mu)) << name;
  }
  EXPECT_THROW(shipped_instance("imagenet"), ValidationError);
}

TEST(Instances, TabularPresetMatchesItsDescription) {
  const auto inst = shipped_instance("tabular");
  const auto mu = std::get<TabularPolicy>(make_reference(inst.reference));
  EXPECT_EQ(mu.num_responses(), 8u);
  EXPECT_EQ(inst.train.k, 4u);
  EXPECT_EQ(inst.train.alpha, 1.0);
  const auto rw = make_reward(inst, mu);
  for (std::size_t x = 0; x < mu.num_instructions(); ++x) {
    for (double p : mu.log_probs(x)) EXPECT_GT(std::exp(p), 0.0);
    for (double r : rw.row(x)) {
      EXPECT_GE(r, 0.0);
      EXPECT_LE(r, 10.0);
    }
  }
}

TEST(Instances, ConfigOverridesPreset) {
  const auto j = nlohmann::json::parse(R"({
    "instance": "stochastic",
    "reference": {"num_responses": 5},
    "train": {"loss": "nca", "k": 2, "alpha": 0.5, "batch_mode": "exact", "steps": 7}
  })");
  const auto inst = instance_from_config(j);
  EXPECT_EQ(inst.reference.num_responses, 5u);
  EXPECT_EQ(inst.train.loss, LossType::nca);
  EXPECT_EQ(inst.train.k, 2u);
  EXPECT_EQ(inst.train.alpha, 0.5);
  EXPECT_EQ(inst.train.batch_mode, BatchMode::exact_expectation);
  EXPECT_EQ(inst.train.steps, 7u);
  EXPECT_EQ(inst.reference.seed, shipped_instance("stochastic").reference.seed);
}

TEST(Instances, JsonRoundTrip) {
  for (const char* name : {"tabular", "fig2", "stochastic", "autoregressive"}) {
    const auto inst = shipped_instance(name);
    const auto back = instance_from_config(to_json(inst), "tabular");
    EXPECT_EQ(to_json(back), to_json(inst)) << name;
  }
}

TEST(Instances, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(instance_from_config(nlohmann::json::parse(R"({"train":{"loss":"ppo"}})")), Error);
  EXPECT_THROW(instance_from_config(nlohmann::json::parse(R"({"reference":{"family":"transformer"}})")),
               Error);
}

// ---------------------------------------------------------------------------
// Single runs

TEST(RunInstance, ExactTabularRunProducesATrajectory) {
  auto inst = shipped_instance("tabular");
  inst.train.steps = 30;
  inst.train.metrics_every = 10;
  const auto run = run_instance(inst);
  ASSERT_EQ(run.trajectory.size(), 4u);
  EXPECT_EQ(run.num_records, 0u);
  EXPECT_LT(run.trajectory.back().loss, run.trajectory.front().loss);
}

TEST(RunInstance, PreferenceRunCountsPairs) {
  auto inst = shipped_instance("fig2");
  inst.train.steps = 5;
  const auto run = run_instance(inst);
  EXPECT_EQ(run.num_records, 4u * 32u);
  EXPECT_EQ(run.num_pairs, run.num_records);
}

TEST(RunInstance, OptimumPassesVerification) {
  for (const char* name : {"tabular", "autoregressive"}) {
    const auto inst = shipped_instance(name);
    for (auto kind : {TheoremKind::infonca, TheoremKind::nca})
      EXPECT_TRUE(all_passed(verify_policy(instance_optimum(inst), inst, kind))) << name;
  }
}

TEST(RunInstance, VerifyRejectsMismatchedCheckpoints) {
  const auto inst = shipped_instance("tabular");
  EXPECT_THROW(verify_policy(AnyPolicy(TabularPolicy::uniform(4, 5)), inst, TheoremKind::nca),
               ValidationError);
  EXPECT_THROW(verify_policy(AnyPolicy(AutoregressivePolicy::uniform(4, 3, 2)), inst, TheoremKind::nca),
               ValidationError);
}

TEST(RunInstance, TrajectoryCsvHasTheDocumentedColumns) {
  auto inst = shipped_instance("tabular");
  inst.train.steps = 2;
  inst.train.metrics_every = 1;
  std::ostringstream os;
  write_trajectory_csv(os, run_instance(inst).trajectory);
  std::istringstream in(os.str());
  const auto t = read_csv(in);
  EXPECT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.header.front(), "step");
  EXPECT_GE(t.column("kl"), 0);
  EXPECT_GE(t.column("rl_objective"), 0);
  EXPECT_GE(t.column("logp_1"), 0);
  EXPECT_GE(t.column("residual_1"), 0);
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(Sweep, OneRowPerRun) {
  const auto g = small_grid();
  const auto rows = run_sweep(g, 2);
  EXPECT_EQ(rows.size(), g.num_runs());
  for (const auto& r : rows) EXPECT_TRUE(r.ok) << r.error;
}

TEST(Sweep, FailedRunsKeepTheirRows) {
  auto g = small_grid();
  g.ks = {1, 2};
  const auto rows = run_sweep(g, 1);
  ASSERT_EQ(rows.size(), 4u);
  std::size_t failed = 0;
  for (const auto& r : rows)
    if (!r.ok) {
      ++failed;
      EXPECT_EQ(r.k, 1u);
      EXPECT_NE(r.error.find("K >= 2"), std::string::npos) << r.error;
    }
  EXPECT_EQ(failed, 2u);
  std::ostringstream os;
  write_sweep_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kSweepCsvHeader);
  EXPECT_NE(os.str().find(",failed,"), std::string::npos);
}

TEST(Sweep, RowsAreSorted) {
  auto g = small_grid();
  g.losses = {LossType::nca, LossType::infonca};
  const auto rows = run_sweep(g, 3);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i - 1];
    const auto& b = rows[i];
    EXPECT_LE(std::make_tuple(static_cast<int>(a.loss), a.k, a.seed),
              std::make_tuple(static_cast<int>(b.loss), b.k, b.seed));
  }
}

TEST(Sweep, SingleCellEqualsDirectRun) {
  SweepGrid g;
  g.base.train.steps = 15;
  const auto rows = run_sweep(g, 1);
  ASSERT_EQ(rows.size(), 1u);
  const auto run = run_instance(sweep_run_instance(g, 0));
  EXPECT_EQ(rows[0].final_expected_reward, run.trajectory.back().expected_reward);
  EXPECT_EQ(rows[0].final_kl, run.trajectory.back().kl);
}

TEST(Sweep, ResultsDoNotDependOnThreadCount) {
  const auto g = small_grid();
  std::ostringstream a, b;
  write_sweep_csv(a, run_sweep(g, 1));
  write_sweep_csv(b, run_sweep(g, 4));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Sweep, JobCapIsEnforced) {
  auto g = small_grid();
  g.job_cap = 3;
  EXPECT_THROW(run_sweep(g), ValidationError);
}

TEST(Sweep, AlphaSettingsParse) {
  EXPECT_TRUE(parse_alpha_setting("hard").hard);
  EXPECT_EQ(parse_alpha_setting("0.25").value, 0.25);
  EXPECT_THROW(parse_alpha_setting("-1"), ValidationError);
  EXPECT_THROW(parse_alpha_setting("warm"), ValidationError);
}

// ---------------------------------------------------------------------------
// DPO against NCA

TEST(Fig2, BothLossesSeeTheSameData) {
  auto inst = shipped_instance("fig2");
  inst.train.steps = 20;
  const auto r = run_fig2(inst);
  EXPECT_EQ(r.dpo_fingerprint, r.nca_fingerprint);
  EXPECT_EQ(r.num_pairs, 4u * 32u);
  EXPECT_EQ(r.dpo.size(), r.nca.size());
  std::ostringstream os;
  write_fig2_csv(os, r);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kFig2CsvHeader);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, TrajectoryTableRendersPanels) {
  std::istringstream in("step,loss,chosen_logp,rejected_logp\n0,1,-2,-2\n10,0.5,-2.5,-4\n");
  std::ostringstream svg;
  EXPECT_EQ(render_csv_svg(read_csv(in), svg), "trajectory");
  EXPECT_EQ(svg.str().rfind("<svg", 0), 0u);
  EXPECT_NE(svg.str().find("polyline"), std::string::npos);
}

TEST(Report, SweepTableRendersFrontier) {
  std::istringstream in(std::string(kSweepCsvHeader) +
                        "\ninfonca,2,1,1,5,ok,6.5,0.3,1.1,\ninfonca,4,1,1,6,ok,7.5,0.4,1.2,\n"
                        "infonca,1,1,1,7,failed,nan,nan,nan,bad K\n");
  std::ostringstream svg;
  EXPECT_EQ(render_csv_svg(read_csv(in), svg), "frontier");
  EXPECT_NE(svg.str().find("K=4"), std::string::npos);
}

TEST(Report, UnknownTableIsAnError) {
  std::istringstream in("a,b\n1,2\n");
  std::ostringstream svg;
  EXPECT_THROW(render_csv_svg(read_csv(in), svg), Error);
}

TEST(Report, RaggedRowsAreAParseError) {
  std::istringstream in("step,loss\n0\n");
  EXPECT_THROW(read_csv(in), ParseError);
}

// ---------------------------------------------------------------------------
// Checkpoints of trained runs

TEST(Checkpoint, TrainedPolicyRoundTripsExactly) {
  auto inst = shipped_instance("autoregressive");
  inst.train.steps = 10;
  const auto run = run_instance(inst);
  std::stringstream io;
  write_checkpoint(io, run.policy);
  EXPECT_EQ(logits_of(read_checkpoint(io)), logits_of(run.policy));
}
