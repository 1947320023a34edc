#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ncalab/error.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/random.hpp"
#include "ncalab/reward.hpp"

namespace ncalab {

/// One instruction with K scored responses.
struct RewardRecord {
  std::string instruction_id;
  std::vector<ResponseId> responses;
  std::vector<double> rewards;

  std::size_t k() const noexcept { return responses.size(); }

  void validate() const {
    if (responses.empty()) throw ValidationError("record '" + instruction_id + "' has no responses");
    if (responses.size() != rewards.size())
      throw ValidationError("record '" + instruction_id + "' has " +
                            std::to_string(responses.size()) + " responses but " +
                            std::to_string(rewards.size()) + " rewards");
    for (double r : rewards)
      if (!std::isfinite(r)) throw ValidationError("record '" + instruction_id + "' has a non-finite reward");
  }

  bool operator==(const RewardRecord&) const = default;
};

/// Pairwise preference y_w > y_l for one instruction. Produced from reward
/// records, so `winner` and `loser` come from distinct positions; they can
/// share an identifier when the source record sampled the same response twice.
struct PreferenceRecord {
  std::string instruction_id;
  ResponseId winner = 0;
  ResponseId loser = 0;

  bool operator==(const PreferenceRecord&) const = default;
};

/// Instruction ids bind to policy rows as "x<k>" (or a bare "<k>").
inline std::string instruction_name(std::size_t x) { return "x" + std::to_string(x); }

inline std::size_t instruction_index(std::string_view id) {
  std::string_view digits = id;
  if (!digits.empty() && digits.front() == 'x') digits.remove_prefix(1);
  if (digits.empty() || digits.size() > 18)
    throw ValidationError("instruction id '" + std::string(id) + "' is not of the form x<k>");
  std::size_t v = 0;
  for (char c : digits) {
    if (c < '0' || c > '9')
      throw ValidationError("instruction id '" + std::string(id) + "' is not of the form x<k>");
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

// ---------------------------------------------------------------------------
// Line-delimited file format
//
//   {"format":"ncalab-rewards","version":1}
//   {"id":"x0","responses":[3,1,4,0],"rewards":[8.5,7.0,3.0,1.0]}
//   ...
//
// The header line is optional on input and always written on output. Blank
// lines are ignored. Errors name the offending physical line.

inline constexpr const char* kDatasetFormat = "ncalab-rewards";
inline constexpr int kDatasetVersion = 1;

namespace detail {

inline nlohmann::json parse_dataset_line(const std::string& line, std::size_t line_no) {
  const std::string where = " at line " + std::to_string(line_no);
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    // NaN/Infinity literals are not JSON; report them as the invariant they break.
    static const std::regex non_finite(R"(([-+]?\b(NaN|nan|Infinity|inf)\b))");
    const std::string patched = std::regex_replace(line, non_finite, "null");
    if (patched != line && nlohmann::json::accept(patched))
      throw ValidationError("non-finite reward" + where);
    throw ParseError("malformed record" + where + ": " + e.what());
  }
}

inline RewardRecord record_from_json(const nlohmann::json& j, std::size_t line_no) {
  const std::string where = " at line " + std::to_string(line_no);
  if (!j.is_object()) throw ParseError("record is not an object" + where);
  for (const char* key : {"id", "responses", "rewards"})
    if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'" + where);
  if (!j["id"].is_string()) throw ParseError("field 'id' must be a string" + where);
  if (!j["responses"].is_array() || !j["rewards"].is_array())
    throw ParseError("fields 'responses' and 'rewards' must be lists" + where);

  RewardRecord rec;
  rec.instruction_id = j["id"].get<std::string>();
  for (const auto& v : j["responses"]) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ParseError("response identifiers must be non-negative integers" + where);
    rec.responses.push_back(v.get<ResponseId>());
  }
  for (const auto& v : j["rewards"]) {
    if (v.is_null()) throw ValidationError("non-finite reward" + where);
    if (!v.is_number()) throw ParseError("rewards must be numbers" + where);
    const double r = v.get<double>();
    if (!std::isfinite(r)) throw ValidationError("non-finite reward" + where);
    rec.rewards.push_back(r);
  }
  if (rec.responses.empty()) throw ValidationError("record has no responses" + where);
  if (rec.responses.size() != rec.rewards.size())
    throw ValidationError("responses/rewards length mismatch" + where);
  return rec;
}

}  // namespace detail

inline std::vector<RewardRecord> read_reward_dataset(std::istream& in) {
  std::vector<RewardRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = detail::parse_dataset_line(line, line_no);
    if (j.is_object() && j.contains("format")) {
      if (j["format"] != kDatasetFormat)
        throw ParseError("unknown dataset format at line " + std::to_string(line_no));
      if (!j.contains("version") || j["version"] != kDatasetVersion)
        throw ParseError("unsupported dataset version at line " + std::to_string(line_no));
      continue;
    }
    out.push_back(detail::record_from_json(j, line_no));
  }
  return out;
}

inline std::vector<RewardRecord> load_reward_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  return read_reward_dataset(in);
}

inline void write_reward_dataset(std::ostream& out, const std::vector<RewardRecord>& records) {
  out << nlohmann::json{{"format", kDatasetFormat}, {"version", kDatasetVersion}}.dump() << '\n';
  for (const auto& r : records) {
    r.validate();
    nlohmann::json j;
    j["id"] = r.instruction_id;
    j["responses"] = r.responses;
    j["rewards"] = r.rewards;
    out << j.dump() << '\n';
  }
}

inline void save_reward_dataset(const std::string& path, const std::vector<RewardRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  write_reward_dataset(out, records);
  if (!out) throw Error("failed while writing dataset '" + path + "'");
}

/// Fingerprint of the serialized form; equal datasets hash equal.
inline std::uint64_t dataset_fingerprint(const std::vector<RewardRecord>& records) {
  std::ostringstream os;
  write_reward_dataset(os, records);
  return fnv1a(os.str());
}

inline std::uint64_t dataset_fingerprint(const std::vector<PreferenceRecord>& pairs) {
  std::ostringstream os;
  for (const auto& p : pairs) os << p.instruction_id << ' ' << p.winner << ' ' << p.loser << '\n';
  return fnv1a(os.str());
}

/// The common K of a dataset, or an error naming the first record that differs.
inline std::size_t uniform_k(const std::vector<RewardRecord>& records) {
  if (records.empty()) throw ValidationError("dataset is empty");
  const std::size_t k = records.front().k();
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].k() != k)
      throw ValidationError("record " + std::to_string(i) + " has K=" +
                            std::to_string(records[i].k()) + " but the dataset starts with K=" +
                            std::to_string(k));
  return k;
}

// ---------------------------------------------------------------------------
// Synthesis

struct SynthesisSpec {
  std::size_t num_instructions = 1;
  std::size_t responses_per_instruction = 4;  // K
  /// Independent records drawn per instruction (1 gives one record each).
  std::size_t records_per_instruction = 1;
  RewardSpec reward;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_instructions == 0) throw ValidationError("num_instructions must be positive");
    if (responses_per_instruction == 0) throw ValidationError("K must be positive");
    if (records_per_instruction == 0) throw ValidationError("records_per_instruction must be positive");
  }
};

/// Records whose K responses are i.i.d. draws from μ(·|x), labelled by `reward`.
template <EnumerablePolicy P>
std::vector<RewardRecord> synthesize_dataset(const SynthesisSpec& spec, const P& mu,
                                             const RewardModel& reward) {
  spec.validate();
  if (spec.num_instructions > mu.num_instructions())
    throw ValidationError("synthesis asks for " + std::to_string(spec.num_instructions) +
                          " instructions but the reference policy has " +
                          std::to_string(mu.num_instructions()));
  reward.check_compatible(mu);
  Rng rng(spec.seed);
  std::vector<RewardRecord> out;
  out.reserve(spec.num_instructions * spec.records_per_instruction);
  for (std::size_t x = 0; x < spec.num_instructions; ++x) {
    for (std::size_t rep = 0; rep < spec.records_per_instruction; ++rep) {
      RewardRecord rec;
      rec.instruction_id = instruction_name(x);
      for (std::size_t i = 0; i < spec.responses_per_instruction; ++i) {
        const ResponseId y = mu.sample(x, rng);
        rec.responses.push_back(y);
        rec.rewards.push_back(reward(x, y));
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

template <EnumerablePolicy P>
std::vector<RewardRecord> synthesize_dataset(const SynthesisSpec& spec, const P& mu) {
  return synthesize_dataset(spec, mu, RewardModel::make(spec.reward, mu));
}

/// Best response (lowest index among ties) against a uniformly drawn
/// remaining response, one pair per record.
inline std::vector<PreferenceRecord> to_preference_pairs(const std::vector<RewardRecord>& records,
                                                         std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PreferenceRecord> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    rec.validate();
    if (rec.k() < 2)
      throw ValidationError("record " + std::to_string(i) + " ('" + rec.instruction_id +
                            "') has K=1; preference pairs need K >= 2");
    std::size_t best = 0;
    for (std::size_t j = 1; j < rec.k(); ++j)
      if (rec.rewards[j] > rec.rewards[best]) best = j;
    std::size_t other = rng.index(rec.k() - 1);
    if (other >= best) ++other;
    out.push_back({rec.instruction_id, rec.responses[best], rec.responses[other]});
  }
  return out;
}

}  // namespace ncalab
