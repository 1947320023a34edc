#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <variant>

#include <nlohmann/json.hpp>

#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/reward.hpp"
#include "ncalab/trainer.hpp"

namespace ncalab {

/// Parameters of a reference policy μ.
struct PolicySpec {
  std::string family = "tabular";  // tabular | autoregressive
  std::size_t num_instructions = 4;
  std::size_t num_responses = 8;   // tabular
  std::size_t vocab = 3;           // autoregressive, EOS included
  std::size_t max_length = 3;      // autoregressive
  double logit_scale = 0.5;        // logits ~ N(0, scale^2)
  std::uint64_t seed = 2024;
};

inline AnyPolicy make_reference(const PolicySpec& s) {
  if (s.family == "tabular")
    return TabularPolicy::random(s.num_instructions, s.num_responses, s.seed, s.logit_scale);
  if (s.family == "autoregressive")
    return AutoregressivePolicy::random(s.num_instructions, s.vocab, s.max_length, s.seed,
                                        s.logit_scale);
  throw ValidationError("unknown policy family '" + s.family + "'");
}

/// A complete synthetic problem: μ, the reward function, how to draw data
/// from it and how to train on it.
struct Instance {
  std::string name = "custom";
  PolicySpec reference;
  RewardSpec reward;
  SynthesisSpec synthesis;
  AlignmentConfig train;
};

inline RewardModel make_reward(const Instance& inst, const AnyPolicy& mu) {
  return std::visit([&](const auto& p) { return RewardModel::make(inst.reward, p); }, mu);
}

/// Shipped instances.
///
///   tabular         M=8 responses, 4 instructions, rewards in [0,10], α=1,
///                   K=4; exact-expectation theorem checks
///   fig2            bimodal rewards, 32 records per instruction, DPO vs NCA
///                   on the same preference pairs
///   stochastic      8 instructions, 4 sampled records each; K sweeps
///   autoregressive  V=3 (two tokens + EOS), T=3, 15 responses
inline Instance shipped_instance(std::string_view name) {
  Instance inst;
  inst.name = std::string(name);
  if (name == "tabular") {
    inst.reference = {"tabular", 4, 8, 3, 3, 0.5, 2024};
    inst.reward = {"random-table", 7};
    inst.synthesis = {4, 4, 1, inst.reward, 11};
    inst.train.loss = LossType::infonca;
    inst.train.k = 4;
    inst.train.alpha = 1.0;
    inst.train.beta = 1.0;
    inst.train.learning_rate = 5.0;
    inst.train.steps = 40000;
    inst.train.batch_mode = BatchMode::exact_expectation;
    inst.train.metrics_every = 1000;
  } else if (name == "fig2") {
    inst.reference = {"tabular", 4, 8, 3, 3, 1.0, 5};
    inst.reward = {"bimodal", 17};
    inst.synthesis = {4, 4, 32, inst.reward, 23};
    inst.train.loss = LossType::dpo;
    inst.train.k = 2;
    inst.train.alpha = 1.0;
    inst.train.beta = 0.5;
    inst.train.learning_rate = 2.0;
    inst.train.steps = 3000;
    inst.train.batch_mode = BatchMode::stochastic;
    inst.train.seed = 31;
    inst.train.metrics_every = 50;
  } else if (name == "stochastic") {
    inst.reference = {"tabular", 8, 8, 3, 3, 0.5, 99};
    inst.reward = {"random-table", 41};
    inst.synthesis = {8, 4, 4, inst.reward, 0};
    inst.train.loss = LossType::infonca;
    inst.train.k = 4;
    inst.train.alpha = 1.0;
    inst.train.beta = 1.0;
    inst.train.learning_rate = 1.0;
    inst.train.steps = 500;
    inst.train.batch_mode = BatchMode::stochastic;
    inst.train.seed = 1;
    inst.train.metrics_every = 50;
  } else if (name == "autoregressive") {
    inst.reference = {"autoregressive", 2, 0, 3, 3, 0.5, 8};
    inst.reward = {"random-table", 3};
    inst.synthesis = {2, 2, 8, inst.reward, 5};
    inst.train.loss = LossType::infonca;
    inst.train.k = 2;
    inst.train.alpha = 1.0;
    inst.train.beta = 1.0;
    inst.train.learning_rate = 30.0;
    inst.train.steps = 4000;
    inst.train.batch_mode = BatchMode::exact_expectation;
    inst.train.metrics_every = 200;
  } else {
    throw ValidationError("unknown instance '" + std::string(name) +
                          "' (expected tabular, fig2, stochastic or autoregressive)");
  }
  return inst;
}

// ---------------------------------------------------------------------------
// JSON config
//
// {
//   "instance": "tabular",                       base preset (optional)
//   "reference": {"family": ..., "num_instructions": ..., "num_responses": ...,
//                 "vocab": ..., "max_length": ..., "logit_scale": ..., "seed": ...},
//   "reward":    {"name": ..., "seed": ...},
//   "synthesis": {"num_instructions": ..., "k": ..., "records_per_instruction": ..., "seed": ...},
//   "train":     {"loss": ..., "k": ..., "alpha": ..., "hard_labels": ..., "beta": ...,
//                 "learning_rate": ..., "steps": ..., "batch_mode": ..., "seed": ...,
//                 "metrics_every": ...}
// }
//
// Every key is optional; present keys override the base.

namespace detail {

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void apply_config(Instance& inst, const nlohmann::json& j) {
  try {
    if (j.contains("reference")) {
      const auto& r = j["reference"];
      detail::maybe(r, "family", inst.reference.family);
      detail::maybe(r, "num_instructions", inst.reference.num_instructions);
      detail::maybe(r, "num_responses", inst.reference.num_responses);
      detail::maybe(r, "vocab", inst.reference.vocab);
      detail::maybe(r, "max_length", inst.reference.max_length);
      detail::maybe(r, "logit_scale", inst.reference.logit_scale);
      detail::maybe(r, "seed", inst.reference.seed);
    }
    if (j.contains("reward")) {
      detail::maybe(j["reward"], "name", inst.reward.name);
      detail::maybe(j["reward"], "seed", inst.reward.seed);
    }
    inst.synthesis.reward = inst.reward;
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      detail::maybe(s, "num_instructions", inst.synthesis.num_instructions);
      detail::maybe(s, "k", inst.synthesis.responses_per_instruction);
      detail::maybe(s, "records_per_instruction", inst.synthesis.records_per_instruction);
      detail::maybe(s, "seed", inst.synthesis.seed);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (t.contains("loss")) inst.train.loss = parse_loss_type(t["loss"].get<std::string>());
      if (t.contains("batch_mode"))
        inst.train.batch_mode = parse_batch_mode(t["batch_mode"].get<std::string>());
      detail::maybe(t, "k", inst.train.k);
      detail::maybe(t, "alpha", inst.train.alpha);
      detail::maybe(t, "hard_labels", inst.train.hard_labels);
      detail::maybe(t, "beta", inst.train.beta);
      detail::maybe(t, "learning_rate", inst.train.learning_rate);
      detail::maybe(t, "steps", inst.train.steps);
      detail::maybe(t, "seed", inst.train.seed);
      detail::maybe(t, "metrics_every", inst.train.metrics_every);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (inst.reference.family != "tabular" && inst.reference.family != "autoregressive")
    throw ValidationError("unknown policy family '" + inst.reference.family + "'");
}

inline Instance instance_from_config(const nlohmann::json& j, std::string_view fallback = "tabular") {
  Instance inst = shipped_instance(j.contains("instance") ? j["instance"].get<std::string>()
                                                          : std::string(fallback));
  apply_config(inst, j);
  return inst;
}

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
}

inline nlohmann::json to_json(const Instance& inst) {
  const auto& r = inst.reference;
  const auto& t = inst.train;
  return {
      {"instance", inst.name},
      {"reference",
       {{"family", r.family},
        {"num_instructions", r.num_instructions},
        {"num_responses", r.num_responses},
        {"vocab", r.vocab},
        {"max_length", r.max_length},
        {"logit_scale", r.logit_scale},
        {"seed", r.seed}}},
      {"reward", {{"name", inst.reward.name}, {"seed", inst.reward.seed}}},
      {"synthesis",
       {{"num_instructions", inst.synthesis.num_instructions},
        {"k", inst.synthesis.responses_per_instruction},
        {"records_per_instruction", inst.synthesis.records_per_instruction},
        {"seed", inst.synthesis.seed}}},
      {"train",
       {{"loss", std::string(to_string(t.loss))},
        {"k", t.k},
        {"alpha", t.alpha},
        {"hard_labels", t.hard_labels},
        {"beta", t.beta},
        {"learning_rate", t.learning_rate},
        {"steps", t.steps},
        {"batch_mode", std::string(to_string(t.batch_mode))},
        {"seed", t.seed},
        {"metrics_every", t.metrics_every}}},
  };
}

}  // namespace ncalab
