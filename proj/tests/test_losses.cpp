#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ncalab/losses.hpp"
#include "ncalab/random.hpp"
#include "support/oracles.hpp"

using namespace ncalab;

namespace {

SoftLabels labels(std::vector<double> p) { return SoftLabels::from_probabilities(std::move(p)); }

std::vector<double> random_vector(Rng& rng, std::size_t k, double lo, double hi) {
  std::vector<double> v(k);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

SoftLabels random_labels(Rng& rng, std::size_t k) {
  return soft_labels(random_vector(rng, k, -3.0, 3.0), rng.uniform(0.2, 3.0));
}

}  // namespace

// ---------------------------------------------------------------------------
// Soft labels

TEST(SoftLabels, EqualRewardsGiveUniform) {
  const auto l = soft_labels(std::vector<double>{3, 3, 3, 3}, 1.0);
  for (double v : l.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(SoftLabels, HardLimitIsTheIndicator) {
  const auto l = soft_labels(std::vector<double>{1, 0}, 0.0, true);
  EXPECT_EQ(l[0], 1.0);
  EXPECT_EQ(l[1], 0.0);
}

TEST(SoftLabels, HardLimitSplitsTies) {
  const auto l = soft_labels(std::vector<double>{2, 5, 5, 1}, 0.0, true);
  EXPECT_EQ(l[1], 0.5);
  EXPECT_EQ(l[2], 0.5);
  EXPECT_EQ(l[0] + l[3], 0.0);
}

TEST(SoftLabels, TwoRewardSoftmax) {
  const auto l = soft_labels(std::vector<double>{1, 0}, 1.0);
  EXPECT_NEAR(l[0], 0.731059, 1e-6);
  EXPECT_NEAR(l[1], 0.268941, 1e-6);
}

TEST(SoftLabels, NonPositiveAlphaIsRejected) {
  const std::vector<double> r{1, 0};
  EXPECT_THROW(soft_labels(r, 0.0), ValidationError);
  EXPECT_THROW(soft_labels(r, -1.0), ValidationError);
  EXPECT_NO_THROW(soft_labels(r, 0.0, true));
}

TEST(SoftLabels, SumToOneAndShiftInvariant) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t k = 1 + rng.index(8);
    auto r = random_vector(rng, k, -20.0, 20.0);
    const double alpha = rng.uniform(0.05, 5.0);
    const auto a = soft_labels(r, alpha);
    double total = 0.0;
    for (double v : a.values()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);

    const double c = rng.uniform(-100.0, 100.0);
    for (double& v : r) v += c;
    const auto b = soft_labels(r, alpha);
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(SoftLabels, TemperatureEqualsRewardScaling) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto r = random_vector(rng, 4, 0.0, 10.0);
    const double alpha = rng.uniform(0.1, 4.0);
    std::vector<double> scaled(r);
    for (double& v : scaled) v /= alpha;
    const auto a = soft_labels(r, alpha);
    const auto b = soft_labels(scaled, 1.0);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// InfoNCA

TEST(InfoncaLoss, UniformAtInitialization) {
  EXPECT_NEAR(infonca_loss(std::vector<double>{0, 0, 0, 0}, labels({0.25, 0.25, 0.25, 0.25})), 1.386294,
              1e-6);
}

TEST(InfoncaLoss, TwoResponseValueMatchesDpoIdentity) {
  EXPECT_NEAR(infonca_loss(std::vector<double>{1, 0}, labels({1, 0})), 0.313262, 1e-6);
  EXPECT_NEAR(infonca_loss(std::vector<double>{1, 0}, labels({1, 0})), std::log1p(std::exp(-1.0)), 1e-15);
}

TEST(InfoncaLoss, FourResponseDirectValue) {
  // log(1 + 3 e^-2)
  EXPECT_NEAR(infonca_loss(std::vector<double>{2, 0, 0, 0}, labels({1, 0, 0, 0})), 0.340753, 1e-6);
  EXPECT_NEAR(infonca_loss(std::vector<double>{2, 0, 0, 0}, labels({1, 0, 0, 0})), std::log1p(3 * std::exp(-2.0)),
              1e-15);
}

TEST(InfoncaLoss, AgreesWithTermByTermOracle) {
  Rng rng(3);
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 2 + rng.index(7);
    const auto f = random_vector(rng, k, -5.0, 5.0);
    const auto l = random_labels(rng, k);
    EXPECT_NEAR(infonca_loss(f, l), oracle::infonca(f, l.values()), 1e-12);
  }
}

TEST(InfoncaLoss, SingleResponseIsRejected) {
  EXPECT_THROW(infonca_loss(std::vector<double>{0.0}, labels({1.0})), ValidationError);
}

TEST(InfoncaLoss, BoundedBelowByLabelEntropy) {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 2 + rng.index(5);
    const auto l = random_labels(rng, k);
    double entropy = 0.0;
    for (double p : l.values())
      if (p > 0) entropy -= p * std::log(p);
    EXPECT_GE(infonca_loss(random_vector(rng, k, -5, 5), l), entropy - 1e-12);
    std::vector<double> at_labels;
    for (double p : l.values()) at_labels.push_back(std::log(p));
    EXPECT_NEAR(infonca_loss(at_labels, l), entropy, 1e-12);
  }
}

TEST(InfoncaLoss, InvariantToConstantShift) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    const std::size_t k = 2 + rng.index(7);
    auto f = random_vector(rng, k, -10.0, 10.0);
    const auto l = random_labels(rng, k);
    const double before = infonca_loss(f, l);
    const double c = rng.uniform(-20.0, 20.0);
    for (double& v : f) v += c;
    EXPECT_NEAR(infonca_loss(f, l), before, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// NCA

TEST(NcaLoss, InitialValue) {
  EXPECT_NEAR(nca_loss(std::vector<double>{0, 0}, labels({0.5, 0.5})), 1.386294, 1e-6);
}

TEST(NcaLoss, TermByTermValue) {
  EXPECT_NEAR(nca_loss(std::vector<double>{1, -1}, labels({1, 0})), 1.126524, 1e-6);
}

TEST(NcaLoss, AgreesWithTermByTermOracle) {
  Rng rng(6);
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 1 + rng.index(8);
    const auto f = random_vector(rng, k, -8.0, 8.0);
    const auto l = random_labels(rng, k);
    EXPECT_NEAR(nca_loss(f, l), oracle::nca(f, l.values()), 1e-11);
  }
}

TEST(NcaLoss, SingleResponseIsAllowed) {
  EXPECT_NEAR(nca_loss(std::vector<double>{0.0}, labels({1.0})), 2.0 * std::log(2.0), 1e-15);
}

TEST(NcaLoss, EqualRewardsAtZeroHaveNoForce) {
  for (std::size_t k : {1u, 2u, 4u, 7u}) {
    const std::vector<double> f(k, 0.0), r(k, 4.2);
    const auto g = loss_gradient_residuals(LossType::nca, f, soft_labels(r, 1.0));
    for (double v : g) EXPECT_NEAR(v, 0.0, 1e-15);
  }
}

TEST(NcaLoss, ShiftChangesTheLoss) {
  Rng rng(7);
  for (int t = 0; t < 500; ++t) {
    const std::size_t k = 1 + rng.index(7);
    auto f = random_vector(rng, k, -3.0, 3.0);
    const auto l = random_labels(rng, k);
    const double before = nca_loss(f, l);
    for (double& v : f) v += 1.0;
    EXPECT_GT(std::abs(nca_loss(f, l) - before), 1e-9);
  }
}

TEST(NcaLoss, LengthMismatchIsRejected) {
  EXPECT_THROW(nca_loss(std::vector<double>{0, 0, 0}, labels({0.5, 0.5})), ValidationError);
}

// ---------------------------------------------------------------------------
// Preference losses

TEST(DpoLoss, KnownValues) {
  EXPECT_NEAR(dpo_loss(0, 0), 0.693147, 1e-6);
  EXPECT_NEAR(dpo_loss(2, 0), 0.126928, 1e-6);
}

TEST(DpoLoss, IsInfoncaWithHardLabels) {
  Rng rng(8);
  const auto hard = soft_labels(std::vector<double>{1, 0}, 0.0, true);
  for (int t = 0; t < 1000; ++t) {
    const double w = rng.uniform(-30, 30), l = rng.uniform(-30, 30);
    EXPECT_EQ(dpo_loss(w, l), infonca_loss(std::vector<double>{w, l}, hard));
  }
}

TEST(DpoLoss, IsTheColdLimitOfSoftInfonca) {
  Rng rng(13);
  for (int t = 0; t < 1000; ++t) {
    const double w = rng.uniform(-30, 30), l = rng.uniform(-30, 30);
    const double gap = rng.uniform(1.0, 10.0);
    const auto soft = soft_labels(std::vector<double>{gap, 0.0}, 1e-6);
    EXPECT_LT(std::abs(dpo_loss(w, l) - infonca_loss(std::vector<double>{w, l}, soft)), 1e-4);
  }
}

TEST(NcaPreferenceLoss, KnownValues) {
  EXPECT_NEAR(nca_preference_loss(0, 0), 1.386294, 1e-6);
  EXPECT_NEAR(nca_preference_loss(1, -1), 1.126524, 1e-6);
}

TEST(NcaPreferenceLoss, IsNcaWithHardLabels) {
  Rng rng(9);
  const auto hard = soft_labels(std::vector<double>{1, 0}, 0.0, true);
  for (int t = 0; t < 1000; ++t) {
    const double w = rng.uniform(-30, 30), l = rng.uniform(-30, 30);
    EXPECT_EQ(nca_preference_loss(w, l), nca_loss(std::vector<double>{w, l}, hard));
  }
}

TEST(Losses, AllNonNegative) {
  Rng rng(10);
  for (int t = 0; t < 500; ++t) {
    const std::size_t k = 2 + rng.index(5);
    const auto f = random_vector(rng, k, -20.0, 20.0);
    const auto l = random_labels(rng, k);
    EXPECT_GE(infonca_loss(f, l), 0.0);
    EXPECT_GE(nca_loss(f, l), 0.0);
    EXPECT_GE(dpo_loss(f[0], f[1]), 0.0);
    EXPECT_GE(nca_preference_loss(f[0], f[1]), 0.0);
  }
}

TEST(Losses, FiniteAtExtremeResiduals) {
  const std::vector<double> f{45.0, -45.0, 0.0};
  const auto l = labels({0.2, 0.3, 0.5});
  EXPECT_TRUE(std::isfinite(infonca_loss(f, l)));
  EXPECT_TRUE(std::isfinite(nca_loss(f, l)));
  EXPECT_TRUE(std::isfinite(dpo_loss(-700, 700)));
  EXPECT_TRUE(std::isfinite(nca_preference_loss(-700, 700)));
}

TEST(LossType, ParsesAndPrints) {
  for (auto t : {LossType::infonca, LossType::nca, LossType::dpo, LossType::nca_preference})
    EXPECT_EQ(parse_loss_type(to_string(t)), t);
  EXPECT_EQ(parse_loss_type("nca-preference"), LossType::nca_preference);
  EXPECT_THROW(parse_loss_type("ppo"), ValidationError);
}

// ---------------------------------------------------------------------------
// Residual gradients

TEST(ResidualGradient, InfoncaStationaryAtSymmetricPoint) {
  const auto g = loss_gradient_residuals(LossType::infonca, std::vector<double>{0.3, 0.3, 0.3},
                                         labels({1.0 / 3, 1.0 / 3, 1.0 / 3}));
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-16);
}

TEST(ResidualGradient, NcaFormula) {
  const auto g = loss_gradient_residuals(LossType::nca, std::vector<double>{0, 0}, labels({0.75, 0.25}));
  EXPECT_NEAR(g[0], -0.125, 1e-15);
  EXPECT_NEAR(g[1], 0.125, 1e-15);
}

TEST(ResidualGradient, MatchesFiniteDifferences) {
  Rng rng(11);
  for (auto type : {LossType::infonca, LossType::nca, LossType::dpo, LossType::nca_preference}) {
    for (int t = 0; t < 100; ++t) {
      const std::size_t k = is_preference_loss(type) ? 2 : 2 + rng.index(6);
      const auto f = random_vector(rng, k, -4.0, 4.0);
      const auto l = random_labels(rng, k);
      const auto g = loss_gradient_residuals(type, f, l);
      const auto fd = oracle::central_difference(
          [&](const std::vector<double>& v) { return loss_value(type, v, l); }, f);
      EXPECT_LT(oracle::max_relative_error(g, fd), 1e-5) << to_string(type);
    }
  }
}

// ---------------------------------------------------------------------------
// Logit gradients

namespace {

template <class P, class Record>
std::vector<double> logit_fd(LossType type, const ResidualModel<P>& model, const Record& rec,
                             const SoftLabels& l, const std::function<P(const std::vector<double>&)>& make) {
  const std::vector<double> at(model.policy.logits().begin(), model.policy.logits().end());
  return oracle::central_difference(
      [&](const std::vector<double>& logits) {
        const ResidualModel<P> m{make(logits), model.reference, model.beta};
        return record_loss(type, m, rec, l);
      },
      at);
}

}  // namespace

TEST(LogitGradient, ZeroAtReferenceWithEqualRewardsForNca) {
  const auto mu = TabularPolicy::random(2, 6, 1);
  const auto m = ResidualModel<TabularPolicy>::at_reference(mu, 0.5);
  const RewardRecord rec{"x1", {0, 3, 3, 5}, {2, 2, 2, 2}};
  for (double v : loss_gradient_logits(LossType::nca, m, rec, soft_labels(rec.rewards, 1.0)))
    EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(LogitGradient, DpoTabularMatchesFiniteDifferences) {
  const auto mu = TabularPolicy::random(1, 4, 2);
  const ResidualModel<TabularPolicy> m{TabularPolicy::random(1, 4, 3), mu, 1.0};
  const PreferenceRecord rec{"x0", 1, 3};
  const auto l = soft_labels(std::vector<double>{1, 0}, 0, true);
  const auto g = loss_gradient_logits(LossType::dpo, m, rec, l);
  const auto fd = logit_fd<TabularPolicy>(LossType::dpo, m, rec, l,
                                          [](const auto& v) { return TabularPolicy(1, 4, v); });
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], fd[i], 1e-6);
}

TEST(LogitGradient, ScalesWithBeta) {
  const auto mu = TabularPolicy::random(1, 5, 4);
  const auto pi = TabularPolicy::random(1, 5, 5, 0.3);
  const RewardRecord rec{"x0", {0, 2, 4}, {1.0, 5.0, 3.0}};
  const auto l = soft_labels(rec.rewards, 1.0);
  for (double beta : {0.5, 1.0, 2.0}) {
    const ResidualModel<TabularPolicy> m{pi, mu, beta};
    for (auto type : {LossType::infonca, LossType::nca}) {
      const auto g = loss_gradient_logits(type, m, rec, l);
      const auto fd = logit_fd<TabularPolicy>(type, m, rec, l,
                                              [](const auto& v) { return TabularPolicy(1, 5, v); });
      EXPECT_LT(oracle::max_relative_error(g, fd), 1e-5) << to_string(type) << " beta " << beta;
    }
  }
}

TEST(LogitGradient, AllLossesBothFamiliesMatchFiniteDifferences) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const double beta = rng.uniform(0.1, 2.0);
    const auto type = static_cast<LossType>(t % 4);
    const std::size_t k = is_preference_loss(type) ? 2 : 2 + rng.index(3);
    if (t % 2 == 0) {
      const ResidualModel<TabularPolicy> m{TabularPolicy::random(2, 6, rng.next_u64()),
                                           TabularPolicy::random(2, 6, rng.next_u64()), beta};
      RewardRecord rec{"x1", {}, random_vector(rng, k, 0, 10)};
      for (std::size_t i = 0; i < k; ++i) rec.responses.push_back(rng.index(6));
      const auto l = soft_labels(rec.rewards, 1.0, is_preference_loss(type));
      const auto g = loss_gradient_logits(type, m, rec, l);
      const auto fd = logit_fd<TabularPolicy>(type, m, rec, l,
                                              [](const auto& v) { return TabularPolicy(2, 6, v); });
      EXPECT_LT(oracle::max_relative_error(g, fd), 1e-5) << to_string(type);
    } else {
      const ResidualModel<AutoregressivePolicy> m{AutoregressivePolicy::random(1, 3, 2, rng.next_u64()),
                                                  AutoregressivePolicy::random(1, 3, 2, rng.next_u64()),
                                                  beta};
      RewardRecord rec{"x0", {}, random_vector(rng, k, 0, 10)};
      for (std::size_t i = 0; i < k; ++i) rec.responses.push_back(rng.index(7));
      const auto l = soft_labels(rec.rewards, 1.0, is_preference_loss(type));
      const auto g = loss_gradient_logits(type, m, rec, l);
      const auto fd = logit_fd<AutoregressivePolicy>(
          type, m, rec, l, [](const auto& v) { return AutoregressivePolicy(1, 3, 2, v); });
      EXPECT_LT(oracle::max_relative_error(g, fd), 1e-5) << to_string(type);
    }
  }
}

TEST(LogitGradient, SupportViolationIsAnError) {
  const auto mu = TabularPolicy::point_mass(1, 3, 0);
  const auto m = ResidualModel<TabularPolicy>::at_reference(mu, 1.0);
  const RewardRecord rec{"x0", {0, 2}, {1, 0}};
  EXPECT_THROW(loss_gradient_logits(LossType::infonca, m, rec, soft_labels(rec.rewards, 1.0)),
               ValidationError);
}
