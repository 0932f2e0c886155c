#include <gtest/gtest.h>

#include <cmath>

#include "mwnet/losses.hpp"

using namespace mwnet;

namespace {

ProbVec random_simplex(Rng& rng, std::size_t k) {
  Vec z(k);
  for (double& v : z) v = rng.gaussian(0, 2);
  return softmax(z);
}

ProbVec uniform_probs(std::size_t k) { return ProbVec(k, 1.0 / static_cast<double>(k)); }

// Central differences of z -> loss(label, softmax(z)).
Vec fd_logits(LossKind kind, std::size_t label, Vec z, double h = 1e-6) {
  Vec g(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double orig = z[k];
    z[k] = orig + h;
    const double fp = loss_value(kind, label, softmax(z));
    z[k] = orig - h;
    const double fm = loss_value(kind, label, softmax(z));
    z[k] = orig;
    g[k] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(CeLoss, OneHotIsZero) { EXPECT_EQ(ce_loss(2, ProbVec{0, 0, 1, 0}), 0.0); }

TEST(CeLoss, UniformFiveClasses) { EXPECT_NEAR(ce_loss(0, uniform_probs(5)), 1.6094379124341003, 1e-12); }

TEST(CeLoss, HalfProbability) { EXPECT_NEAR(ce_loss(1, ProbVec{0.25, 0.5, 0.25}), 0.6931471805599453, 1e-12); }

TEST(CeLoss, ZeroProbabilityIsClamped) {
  EXPECT_NEAR(ce_loss(0, ProbVec{0, 1}), -std::log(kProbFloor), 1e-9);
}

TEST(CeLoss, LabelOutOfRangeThrows) { EXPECT_THROW(ce_loss(3, uniform_probs(3)), std::out_of_range); }

TEST(MaeLoss, OneHotIsZero) { EXPECT_EQ(mae_loss(1, ProbVec{0, 1, 0}), 0.0); }

TEST(MaeLoss, UniformFiveClasses) { EXPECT_NEAR(mae_loss(4, uniform_probs(5)), 1.6, 1e-15); }

TEST(MaeLoss, MatchesTwoTimesOneMinusProb) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto u = random_simplex(rng, 6);
    const std::size_t y = rng.below(6);
    EXPECT_NEAR(mae_loss(y, u), 2 * (1 - u[y]), 1e-12);
  }
}

TEST(MaeLoss, LabelOutOfRangeThrows) { EXPECT_THROW(mae_loss(5, uniform_probs(5)), std::out_of_range); }

TEST(Losses, Ranges) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const std::size_t k = 2 + rng.below(9);
    const auto u = random_simplex(rng, k);
    const std::size_t y = rng.below(k);
    EXPECT_GE(ce_loss(y, u), 0.0);
    EXPECT_GE(mae_loss(y, u), 0.0);
    EXPECT_LE(mae_loss(y, u), 2.0);
  }
}

TEST(SymmetrySum, MaeIsConstantForFiveClasses) {
  Rng rng(3);
  EXPECT_EQ(symmetry_sum(LossKind::MAE, uniform_probs(5)), 8.0);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(symmetry_sum(LossKind::MAE, random_simplex(rng, 5)), 8.0, 1e-12);
}

TEST(SymmetrySum, MaeTwoRandomPointsTenClasses) {
  Rng rng(4);
  const double a = symmetry_sum(LossKind::MAE, random_simplex(rng, 10));
  const double b = symmetry_sum(LossKind::MAE, random_simplex(rng, 10));
  EXPECT_NEAR(a, 18.0, 1e-12);
  EXPECT_NEAR(b, 18.0, 1e-12);
  EXPECT_LT(std::abs(a - b), 1e-12);
}

TEST(SymmetrySum, MaeThousandPointsPerK) {
  Rng rng(5);
  for (std::size_t k : {2, 3, 5, 10})
    for (int i = 0; i < 1000; ++i)
      ASSERT_NEAR(symmetry_sum(LossKind::MAE, random_simplex(rng, k)), 2.0 * double(k) - 2.0, 1e-12);
}

TEST(SymmetrySum, CeIsNotConstant) {
  const double uniform = symmetry_sum(LossKind::CE, uniform_probs(5));
  EXPECT_NEAR(uniform, 5 * std::log(5.0), 1e-12);
  EXPECT_NEAR(uniform, 8.0472, 1e-4);
  const double peaked = symmetry_sum(LossKind::CE, ProbVec{0.9, 0.025, 0.025, 0.025, 0.025});
  EXPECT_GT(peaked, uniform);
}

TEST(SymmetrySum, CeWitnessWithinTenDraws) {
  Rng rng(6);
  const double first = symmetry_sum(LossKind::CE, random_simplex(rng, 5));
  bool found = false;
  for (int i = 1; i < 10 && !found; ++i)
    found = std::abs(symmetry_sum(LossKind::CE, random_simplex(rng, 5)) - first) > 0.1;
  EXPECT_TRUE(found);
}

TEST(LossGradLogits, CeAtZeroLogits) {
  const Vec g = loss_grad_logits(LossKind::CE, 0, Vec(5, 0.0));
  const Vec want{0.2 - 1, 0.2, 0.2, 0.2, 0.2};
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(g[k], want[k], 1e-15);
}

TEST(LossGradLogits, SumsToZero) {
  Rng rng(7);
  for (LossKind kind : {LossKind::CE, LossKind::MAE})
    for (int i = 0; i < 100; ++i) {
      Vec z(6);
      for (double& v : z) v = rng.gaussian(0, 3);
      const Vec g = loss_grad_logits(kind, rng.below(6), z);
      double s = 0;
      for (double v : g) s += v;
      EXPECT_NEAR(s, 0.0, 1e-10);
    }
}

TEST(LossGradLogits, MatchesFiniteDifferences) {
  Rng rng(8);
  for (LossKind kind : {LossKind::CE, LossKind::MAE})
    for (std::size_t k : {2, 5, 10})
      for (int i = 0; i < 100; ++i) {
        Vec z(k);
        for (double& v : z) v = rng.gaussian(0, 2);
        const std::size_t y = rng.below(k);
        const Vec g = loss_grad_logits(kind, y, z);
        const Vec fd = fd_logits(kind, y, z);
        ASSERT_LE(norm2(sub(g, fd)) / std::max(1.0, norm2(g)), 1e-5);
      }
}

TEST(LossGradLogits, CeFlatBelowClamp) {
  Vec z{0, 100, 0};
  EXPECT_EQ(loss_grad_logits(LossKind::CE, 0, z), Vec(3, 0.0));
}

TEST(Softmax, StableForLargeLogits) {
  const ProbVec u = softmax(Vec{1000, 1000});
  EXPECT_DOUBLE_EQ(u[0], 0.5);
  EXPECT_TRUE(is_prob_vec(u));
}

TEST(LossKindNames, RoundTrip) {
  for (LossKind k : {LossKind::CE, LossKind::MAE}) EXPECT_EQ(parse_loss_kind(to_string(k)), k);
  EXPECT_THROW(parse_loss_kind("hinge"), std::invalid_argument);
}
