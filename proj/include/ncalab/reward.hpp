#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ncalab/error.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/random.hpp"

namespace ncalab {

/// Named synthetic reward function, tabulated over (instruction, response).
///
///   linear        r(x, y) = y
///   random-table  r(x, y) ~ U[0, 10] i.i.d., seeded
///   bimodal       per instruction a random half of the responses score
///                 U[7, 10] and the rest U[0, 3], seeded
///
/// Rewards live on a 0..10 scale.
struct RewardSpec {
  std::string name = "random-table";
  std::uint64_t seed = 7;
};

class RewardModel {
 public:
  RewardModel(std::string name, std::vector<std::vector<double>> table)
      : name_(std::move(name)), table_(std::move(table)) {
    for (const auto& row : table_)
      for (double r : row)
        if (!std::isfinite(r)) throw ValidationError("reward table contains a non-finite value");
  }

  static RewardModel make(const RewardSpec& spec, std::size_t num_instructions,
                          std::size_t support_size) {
    std::vector<std::vector<double>> table(num_instructions, std::vector<double>(support_size));
    Rng rng(spec.seed);
    if (spec.name == "linear") {
      for (auto& row : table) std::iota(row.begin(), row.end(), 0.0);
    } else if (spec.name == "random-table") {
      for (auto& row : table)
        for (double& r : row) r = rng.uniform(0.0, 10.0);
    } else if (spec.name == "bimodal") {
      for (auto& row : table) {
        std::vector<std::size_t> order(support_size);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        const std::size_t high = std::max<std::size_t>(1, support_size / 2);
        for (std::size_t i = 0; i < support_size; ++i)
          row[order[i]] = i < high ? rng.uniform(7.0, 10.0) : rng.uniform(0.0, 3.0);
      }
    } else {
      throw ValidationError("unknown reward model '" + spec.name +
                            "' (expected linear, random-table or bimodal)");
    }
    return {spec.name, std::move(table)};
  }

  template <EnumerablePolicy P>
  static RewardModel make(const RewardSpec& spec, const P& policy) {
    return make(spec, policy.num_instructions(), policy.support_size());
  }

  /// Same reward for every response; handy for zero-force checks.
  static RewardModel constant(double c, std::size_t num_instructions, std::size_t support_size) {
    return {"constant",
            std::vector<std::vector<double>>(num_instructions, std::vector<double>(support_size, c))};
  }

  const std::string& name() const noexcept { return name_; }
  std::size_t num_instructions() const noexcept { return table_.size(); }
  std::size_t support_size() const noexcept { return table_.empty() ? 0 : table_.front().size(); }

  double operator()(std::size_t x, ResponseId y) const {
    if (x >= table_.size() || y >= table_[x].size())
      throw ValidationError("reward lookup outside the tabulated space");
    return table_[x][y];
  }

  std::span<const double> row(std::size_t x) const {
    if (x >= table_.size()) throw ValidationError("reward lookup outside the tabulated space");
    return table_[x];
  }

  template <EnumerablePolicy P>
  void check_compatible(const P& policy) const {
    if (num_instructions() != policy.num_instructions() ||
        support_size() != policy.support_size())
      throw ValidationError("reward table shape does not match the policy");
  }

 private:
  std::string name_;
  std::vector<std::vector<double>> table_;
};

}  // namespace ncalab
