#include <gtest/gtest.h>

#include <cmath>

#include "mwnet/verify.hpp"

using namespace mwnet;

namespace {

struct Instance {
  ClassifierNet net;
  std::vector<Sample> meta;
};

Instance random_instance(Rng& rng, std::size_t k, std::size_t m = 8) {
  return {random_classifier({4, 6, k}, rng), random_samples(m, 4, k, rng)};
}

std::vector<std::size_t> shifted_map(std::size_t k) {
  std::vector<std::size_t> map(k);
  for (std::size_t y = 0; y < k; ++y) map[y] = (y + 1) % k;
  return map;
}

}  // namespace

TEST(ExpectedUniform, ZeroRateIsBitIdenticalToClean) {
  Rng rng(1);
  for (LossKind kind : {LossKind::CE, LossKind::MAE}) {
    const auto in = random_instance(rng, 5);
    const Vec clean = meta_gradient(in.net, in.net.params(), in.meta, kind);
    EXPECT_EQ(expected_noisy_meta_gradient_uniform(in.net, in.net.params(), in.meta, 0.0, kind), clean);
    EXPECT_EQ(clean_meta_gradient(in.net, in.net.params(), in.meta, kind), clean);
  }
}

TEST(ExpectedUniform, MaeIsProportionalToClean) {
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const auto in = random_instance(rng, 5);
    const Vec w_hat = in.net.params();
    const auto r = equivalence_report(expected_noisy_meta_gradient_uniform(in.net, w_hat, in.meta, 0.4, LossKind::MAE),
                                      clean_meta_gradient(in.net, w_hat, in.meta, LossKind::MAE), 0.4, LossKind::MAE, 5);
    EXPECT_LE(r.relative_residual, 1e-10);
  }
}

TEST(ExpectedUniform, CeIsNotProportional) {
  Rng rng(3);
  int above = 0;
  for (int i = 0; i < 10; ++i) {
    const auto in = random_instance(rng, 5);
    const auto r = equivalence_report(
        expected_noisy_meta_gradient_uniform(in.net, in.net.params(), in.meta, 0.4, LossKind::CE),
        clean_meta_gradient(in.net, in.net.params(), in.meta, LossKind::CE), 0.4, LossKind::CE, 5);
    above += r.relative_residual > 1e-3;
  }
  EXPECT_GE(above, 9);
}

TEST(ExpectedUniform, MatchesDirectMixture) {
  // (1 - eta) g(y) + (eta / K) sum_c g(c), written out independently.
  Rng rng(4);
  const auto in = random_instance(rng, 4, 3);
  const double eta = 0.3;
  Vec want(in.net.num_params(), 0.0);
  for (const auto& s : in.meta) {
    axpy((1 - eta) / 3.0, in.net.per_sample_grad(s.features, s.true_label, LossKind::CE).grad, want);
    for (std::size_t c = 0; c < 4; ++c)
      axpy(eta / 4.0 / 3.0, in.net.per_sample_grad(s.features, c, LossKind::CE).grad, want);
  }
  const Vec got = expected_noisy_meta_gradient_uniform(in.net, in.net.params(), in.meta, eta, LossKind::CE);
  EXPECT_LE(norm2(sub(got, want)), 1e-14 * std::max(1.0, norm2(want)));
}

TEST(ExpectedFlip, ZeroRateIsClean) {
  Rng rng(5);
  const auto in = random_instance(rng, 4);
  const auto map = shifted_map(4);
  EXPECT_EQ(expected_noisy_meta_gradient_flip(in.net, in.net.params(), in.meta, 0.0, map, LossKind::MAE),
            clean_meta_gradient(in.net, in.net.params(), in.meta, LossKind::MAE));
}

TEST(ExpectedFlip, FixedMapBreaksProportionality) {
  Rng rng(6);
  bool witness = false;
  for (int i = 0; i < 10 && !witness; ++i) {
    const auto in = random_instance(rng, 5);
    const Vec flip =
        expected_noisy_meta_gradient_flip(in.net, in.net.params(), in.meta, 0.4, shifted_map(5), LossKind::MAE);
    witness = proportionality_residual(flip, clean_meta_gradient(in.net, in.net.params(), in.meta, LossKind::MAE)) > 1e-3;
  }
  EXPECT_TRUE(witness);
}

TEST(ExpectedFlip, AllMapsRestoreProportionality) {
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    const auto in = random_instance(rng, 3);
    const Vec clean = clean_meta_gradient(in.net, in.net.params(), in.meta, LossKind::MAE);
    const Vec avg = flip_expectation_over_all_maps(in.net, in.net.params(), in.meta, 0.4, LossKind::MAE);
    EXPECT_LE(proportionality_residual(avg, clean), 1e-10);
    // The constant works out to 1 - eta K / (K - 1).
    const Vec scaled_clean = scaled(clean, 1 - 0.4 * 3 / 2);
    EXPECT_LE(norm2(sub(avg, scaled_clean)), 1e-12 * std::max(1.0, norm2(clean)));
  }
}

TEST(ExpectedFlip, SelfMapThrows) {
  Rng rng(8);
  const auto in = random_instance(rng, 3);
  std::vector<std::size_t> bad{1, 1, 0};
  EXPECT_THROW(expected_noisy_meta_gradient_flip(in.net, in.net.params(), in.meta, 0.2, bad, LossKind::MAE),
               std::invalid_argument);
  std::vector<std::size_t> short_map{1, 0};
  EXPECT_THROW(expected_noisy_meta_gradient_flip(in.net, in.net.params(), in.meta, 0.2, short_map, LossKind::MAE),
               std::invalid_argument);
}

TEST(ProportionalityResidual, Basics) {
  EXPECT_EQ(proportionality_residual(Vec{2, 4}, Vec{1, 2}), 0.0);
  EXPECT_NEAR(proportionality_residual(Vec{1, 0}, Vec{0, 1}), 1.0, 1e-15);
  EXPECT_EQ(proportionality_residual(Vec{0, 0}, Vec{0, 1}), 0.0);
}

TEST(VarianceBound, NoiselessReducesToSigma) {
  Rng rng(9);
  const auto in = random_instance(rng, 5, 50);
  const auto r = variance_bound_check(in.net, in.net.params(), in.meta, 0.0, 20, 4000, LossKind::MAE, rng);
  EXPECT_EQ(r.bound, r.sigma2);
  EXPECT_NEAR(r.empirical_variance, r.sigma2, 0.1 * r.sigma2);
  EXPECT_TRUE(r.holds);
}

TEST(VarianceBound, HoldsAtFortyPercent) {
  Rng rng(10);
  int held = 0;
  for (int i = 0; i < 100; ++i) {
    const auto in = random_instance(rng, 5, 50);
    held += variance_bound_check(in.net, in.net.params(), in.meta, 0.4, 20, 1000, LossKind::MAE, rng).holds;
  }
  EXPECT_GE(held, 95);
}

TEST(VarianceBound, HalvesWhenBatchDoubles) {
  Rng rng(11);
  const auto in = random_instance(rng, 5, 50);
  const auto a = variance_bound_check(in.net, in.net.params(), in.meta, 0.4, 20, 4000, LossKind::MAE, rng);
  const auto b = variance_bound_check(in.net, in.net.params(), in.meta, 0.4, 40, 4000, LossKind::MAE, rng);
  const double emp = b.empirical_variance / a.empirical_variance;
  const double term = (b.bound - b.sigma2) / (a.bound - a.sigma2);
  EXPECT_GE(emp, 0.4);
  EXPECT_LE(emp, 0.6);
  EXPECT_NEAR(term, 0.5, 1e-12);
}

TEST(VarianceBound, RejectsCeAndEmptyPool) {
  Rng rng(12);
  const auto in = random_instance(rng, 3, 5);
  EXPECT_THROW(variance_bound_check(in.net, in.net.params(), in.meta, 0.4, 5, 10, LossKind::CE, rng),
               std::invalid_argument);
  EXPECT_THROW(variance_bound_check(in.net, in.net.params(), {}, 0.4, 5, 10, LossKind::MAE, rng),
               std::invalid_argument);
}

TEST(FiniteDiff, SecondOrderConvergence) {
  Rng rng(13);
  const double h = 2e-3;
  for (int i = 0; i < 3; ++i) {
    const auto inst = make_hypergrad_instance(rng, 3, 3, 4, 4, 40 * h, WeightScheme::Raw, 4);
    const Vec g = theta_gradient(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE);
    const double e1 = norm2(sub(finite_diff_theta_grad(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, h), g));
    const double e2 =
        norm2(sub(finite_diff_theta_grad(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, h / 2), g));
    EXPECT_NEAR(e1 / e2, 4.0, 1.0);
  }
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  Rng rng(14);
  const auto inst = make_hypergrad_instance(rng, 3, 3, 2, 2, 0.0);
  EXPECT_THROW(finite_diff_theta_grad(inst.state, inst.train, inst.meta, 0.1, LossKind::CE, 0.0), std::invalid_argument);
}

TEST(HypergradInstance, RespectsKinkMargin) {
  Rng rng(15);
  for (int i = 0; i < 10; ++i) {
    const auto inst = make_hypergrad_instance(rng, 3, 3, 4, 4, 1e-3);
    EXPECT_GE(kink_margin(inst, WeightScheme::Raw), 1e-3);
  }
}

TEST(MonteCarlo, InverseSquareRootRate) {
  Rng rng(16);
  EXPECT_NEAR(monte_carlo_slope(rng), -0.5, 0.15);
}

TEST(Suite, PristinePassesAndIsDeterministic) {
  const auto a = run_verify_suite();
  const auto b = run_verify_suite();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].passed) << a[i].name << ": " << a[i].detail;
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].detail, b[i].detail);
  }
}

TEST(Suite, SignMutationIsCaught) {
  VerifyOptions opt;
  opt.flip_theta_sign = true;
  for (const auto& r : run_verify_suite(opt))
    EXPECT_EQ(r.passed, r.name.rfind("hypergradient_finite_difference", 0) != 0) << r.name;
}

TEST(Suite, CeEquivalenceControlFails) {
  VerifyOptions opt;
  opt.equivalence_loss = LossKind::CE;
  const auto results = run_verify_suite(opt);
  EXPECT_FALSE(results.front().passed);
  EXPECT_EQ(results.front().name, "uniform_noise_equivalence[ce]");
}
