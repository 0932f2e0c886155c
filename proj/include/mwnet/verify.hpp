#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwnet/bilevel.hpp"
#include "mwnet/data.hpp"
#include "mwnet/losses.hpp"
#include "mwnet/nets.hpp"
#include "mwnet/noise.hpp"
#include "mwnet/numkit.hpp"

namespace mwnet {

// ---------------------------------------------------------------------------
// Expected meta-gradients under label noise, computed by exact enumeration.
// Every function here treats `meta_batch[j].true_label` as the clean label and
// returns a batch-mean gradient, aligned with meta_gradient().
// ---------------------------------------------------------------------------

/// grads[j][c] = gradient of loss(c, f(x_j; w_hat)) for every sample j and label c.
inline std::vector<std::vector<GradVec>> per_label_meta_grads(const ClassifierNet& net, std::span<const double> w_hat,
                                                              Batch meta_batch, LossKind kind) {
  std::vector<std::vector<GradVec>> out;
  out.reserve(meta_batch.size());
  for (const Sample& s : meta_batch) {
    std::vector<GradVec> row;
    row.reserve(net.num_classes());
    for (std::size_t c = 0; c < net.num_classes(); ++c)
      row.push_back(net.per_sample_grad(s.features, c, kind, w_hat).grad);
    out.push_back(std::move(row));
  }
  return out;
}

/// (1/m) sum_j grad loss(y_j) with clean labels.
inline GradVec clean_meta_gradient(const ClassifierNet& net, std::span<const double> w_hat, Batch meta_batch,
                                   LossKind kind) {
  if (meta_batch.empty()) throw std::invalid_argument("empty meta batch");
  GradVec g(net.num_params(), 0.0);
  const double inv_m = 1.0 / static_cast<double>(meta_batch.size());
  for (const Sample& s : meta_batch) axpy(inv_m, net.per_sample_grad(s.features, s.true_label, kind, w_hat).grad, g);
  return g;
}

/// Expectation of the meta-gradient when each meta label is drawn from row
/// `true_label` of `t`, summing over all K labels with their probabilities.
inline GradVec expected_noisy_meta_gradient(const ClassifierNet& net, std::span<const double> w_hat, Batch meta_batch,
                                            const TransitionMatrix& t, LossKind kind) {
  if (meta_batch.empty()) throw std::invalid_argument("empty meta batch");
  if (t.num_classes() != net.num_classes()) throw std::invalid_argument("transition matrix has wrong K");
  GradVec g(net.num_params(), 0.0);
  const double inv_m = 1.0 / static_cast<double>(meta_batch.size());
  for (const Sample& s : meta_batch) {
    GradVec e(net.num_params(), 0.0);
    for (std::size_t c = 0; c < net.num_classes(); ++c) {
      const double p = t.p(s.true_label, c);
      if (p == 0.0) continue;
      axpy(p, net.per_sample_grad(s.features, c, kind, w_hat).grad, e);
    }
    axpy(inv_m, e, g);
  }
  return g;
}

inline GradVec expected_noisy_meta_gradient_uniform(const ClassifierNet& net, std::span<const double> w_hat,
                                                    Batch meta_batch, double eta, LossKind kind) {
  const auto t = build_transition({NoiseKind::Uniform, eta, net.num_classes(), 0});
  return expected_noisy_meta_gradient(net, w_hat, meta_batch, t, kind);
}

/// (1/m) sum_j [(1 - eta) grad loss(y_j) + eta grad loss(target[y_j])] for a fixed target map.
inline GradVec expected_noisy_meta_gradient_flip(const ClassifierNet& net, std::span<const double> w_hat,
                                                 Batch meta_batch, double eta,
                                                 std::span<const std::size_t> target_map, LossKind kind) {
  const std::size_t k = net.num_classes();
  if (target_map.size() != k) throw std::invalid_argument("flip: target map must have one entry per class");
  for (std::size_t y = 0; y < k; ++y) {
    if (target_map[y] == y) throw std::invalid_argument("flip: target map sends class " + std::to_string(y) + " to itself");
    if (target_map[y] >= k) throw std::invalid_argument("flip: target out of range");
  }
  TransitionMatrix t{Mat(k, k), {}};
  for (std::size_t y = 0; y < k; ++y) {
    t.p(y, y) = 1.0 - eta;
    t.p(y, target_map[y]) += eta;
  }
  return expected_noisy_meta_gradient(net, w_hat, meta_batch, t, kind);
}

/// Average of the flip expectation over all (K-1)^K admissible target maps.
inline GradVec flip_expectation_over_all_maps(const ClassifierNet& net, std::span<const double> w_hat,
                                              Batch meta_batch, double eta, LossKind kind) {
  const std::size_t k = net.num_classes();
  std::vector<std::size_t> digits(k, 0);  // digit d in [0, K-2] -> d-th class other than y
  std::vector<std::size_t> map(k);
  GradVec acc(net.num_params(), 0.0);
  std::size_t count = 0;
  while (true) {
    for (std::size_t y = 0; y < k; ++y) map[y] = digits[y] < y ? digits[y] : digits[y] + 1;
    axpy(1.0, expected_noisy_meta_gradient_flip(net, w_hat, meta_batch, eta, map, kind), acc);
    ++count;
    std::size_t pos = 0;
    while (pos < k && ++digits[pos] == k - 1) digits[pos++] = 0;
    if (pos == k) break;
  }
  for (double& v : acc) v /= static_cast<double>(count);
  return acc;
}

struct EquivalenceReport {
  double residual_norm = 0.0;  // ||expected - (1 - eta) clean||
  double clean_norm = 0.0;
  double relative_residual = 0.0;
  LossKind kind = LossKind::MAE;
  double eta = 0.0;
  std::size_t num_classes = 0;
};

inline EquivalenceReport equivalence_report(std::span<const double> expected, std::span<const double> clean,
                                            double eta, LossKind kind, std::size_t num_classes) {
  EquivalenceReport r;
  r.kind = kind;
  r.eta = eta;
  r.num_classes = num_classes;
  Vec diff(expected.begin(), expected.end());
  axpy(-(1.0 - eta), clean, diff);
  r.residual_norm = norm2(diff);
  r.clean_norm = norm2(clean);
  r.relative_residual = r.residual_norm / std::max(r.clean_norm, 1e-12);
  return r;
}

/// ||a - proj_b(a)|| / ||a||: zero iff a is a multiple of b.
inline double proportionality_residual(std::span<const double> a, std::span<const double> b) {
  const double bb = dot(b, b);
  const double an = norm2(a);
  if (an == 0.0) return 0.0;
  if (bb == 0.0) return 1.0;
  Vec r(a.begin(), a.end());
  axpy(-dot(a, b) / bb, b, r);
  return norm2(r) / an;
}

// ---------------------------------------------------------------------------
// Variance of noisy meta-gradients versus sigma^2 + 2 eta rho^2 / m.
// ---------------------------------------------------------------------------

struct VarianceCheckReport {
  double empirical_variance = 0.0;  // E||G_noisy - (1 - eta) K||^2 over corrupted minibatches
  double bound = 0.0;               // sigma^2 + 2 eta rho^2 / m
  double sigma2 = 0.0;              // clean minibatch variance (trace of covariance)
  double rho = 0.0;                 // max per-sample gradient norm over pool and labels
  std::size_t m = 0;
  double eta = 0.0;
  double slack = 0.05;
  bool holds = false;
};

/// Minibatches of size m are drawn uniformly with replacement from the pool;
/// labels are corrupted with uniform noise. sigma^2 is exact for this
/// sampling scheme, the noisy variance is a Monte-Carlo estimate over `trials`.
inline VarianceCheckReport variance_bound_check(const ClassifierNet& net, std::span<const double> w_hat,
                                                Batch meta_pool, double eta, std::size_t m, std::size_t trials,
                                                LossKind kind, Rng& rng, double slack = 0.05) {
  if (kind != LossKind::MAE) throw std::invalid_argument("variance bound is only claimed for a symmetric meta loss");
  if (meta_pool.empty() || m == 0) throw std::invalid_argument("variance check needs a pool and m >= 1");
  const std::size_t k = net.num_classes();
  const std::size_t p = net.num_params();
  const auto grads = per_label_meta_grads(net, w_hat, meta_pool, kind);

  VarianceCheckReport r;
  r.m = m;
  r.eta = eta;
  r.slack = slack;
  GradVec mean(p, 0.0);
  const double inv_pool = 1.0 / static_cast<double>(meta_pool.size());
  for (std::size_t j = 0; j < meta_pool.size(); ++j) {
    axpy(inv_pool, grads[j][meta_pool[j].true_label], mean);
    for (std::size_t c = 0; c < k; ++c) r.rho = std::max(r.rho, norm2(grads[j][c]));
  }
  double per_sample_var = 0.0;
  for (std::size_t j = 0; j < meta_pool.size(); ++j) {
    const Vec d = sub(grads[j][meta_pool[j].true_label], mean);
    per_sample_var += dot(d, d) * inv_pool;
  }
  r.sigma2 = per_sample_var / static_cast<double>(m);
  r.bound = r.sigma2 + 2.0 * eta * r.rho * r.rho / static_cast<double>(m);

  const auto t = build_transition({NoiseKind::Uniform, eta, k, 0});
  const Vec target = scaled(mean, 1.0 - eta);
  const double inv_m = 1.0 / static_cast<double>(m);
  double acc = 0.0;
  GradVec g(p);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = rng.below(meta_pool.size());
      const std::size_t c = draw_label(t, meta_pool[j].true_label, rng);
      axpy(inv_m, grads[j][c], g);
    }
    const Vec d = sub(g, target);
    acc += dot(d, d);
  }
  r.empirical_variance = acc / static_cast<double>(trials);
  r.holds = r.empirical_variance <= r.bound * (1.0 + slack);
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for the Theta hypergradient.
// ---------------------------------------------------------------------------

/// Central differences of Theta -> composed_meta_objective, one coordinate at a time.
inline GradVec finite_diff_theta_grad(const BilevelState& state, Batch train_batch, Batch meta_batch, double alpha,
                                      LossKind kind, double step = 1e-6, WeightScheme scheme = WeightScheme::Raw) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
  Vec theta = state.weightnet.params();
  GradVec g(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double orig = theta[k];
    theta[k] = orig + step;
    const double fp = composed_meta_objective(state, train_batch, meta_batch, alpha, kind, theta, scheme);
    theta[k] = orig - step;
    const double fm = composed_meta_objective(state, train_batch, meta_batch, alpha, kind, theta, scheme);
    theta[k] = orig;
    g[k] = (fp - fm) / (2.0 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), or 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  const double denom = std::max(norm2(a), norm2(b));
  return denom == 0.0 ? 0.0 : norm2(sub(a, b)) / denom;
}

// ---------------------------------------------------------------------------
// Random instances.
// ---------------------------------------------------------------------------

/// Random classifier parameters: He-scaled weights plus N(0, 0.5^2) biases.
inline ClassifierNet random_classifier(std::vector<std::size_t> sizes, Rng& rng) {
  ClassifierNet net = ClassifierNet::he_init(std::move(sizes), rng);
  for (std::size_t l = 0; l < net.num_layers(); ++l)
    for (std::size_t o = 0; o < net.layer_sizes()[l + 1]; ++o) net.params()[net.bias_offset(l) + o] = rng.gaussian(0.0, 0.5);
  return net;
}

/// Random weighting net with nonzero hidden biases so the rectifier kinks sit
/// inside the loss range.
inline WeightNet random_weightnet(Rng& rng, std::size_t hidden = WeightNet::kDefaultHidden) {
  WeightNet net = WeightNet::he_init(rng, hidden);
  for (std::size_t k = 0; k < hidden; ++k) net.params()[net.hidden_bias(k)] = rng.gaussian(0.0, 1.0);
  net.params()[net.out_bias()] = rng.gaussian(0.0, 0.5);
  return net;
}

inline std::vector<Sample> random_samples(std::size_t count, std::size_t dim, std::size_t num_classes, Rng& rng) {
  std::vector<Sample> out(count);
  for (auto& s : out) {
    s.features.resize(dim);
    for (double& x : s.features) x = rng.gaussian(0.0, 1.0);
    s.true_label = s.observed_label = rng.below(num_classes);
  }
  return out;
}

struct HypergradInstance {
  BilevelState state;
  std::vector<Sample> train;
  std::vector<Sample> meta;
  double alpha = 0.5;
};

/// Smallest distance of any rectifier pre-activation to its kink: weighting
/// net at every training loss, classifier at w for training samples and at
/// the virtual step for meta samples.
inline double kink_margin(const HypergradInstance& inst, WeightScheme scheme) {
  const auto tg = train_batch_grads(inst.state.classifier, inst.train);
  double m = std::numeric_limits<double>::infinity();
  for (double l : tg.losses) m = std::min(m, inst.state.weightnet.min_abs_preactivation(l));
  for (const auto& s : inst.train)
    m = std::min(m, inst.state.classifier.min_abs_preactivation(s.features, inst.state.classifier.params()));
  const Vec w_hat = virtual_step(inst.state.classifier, inst.state.weightnet, inst.state.weightnet.params(), tg,
                                 inst.alpha, scheme);
  for (const auto& s : inst.meta) m = std::min(m, inst.state.classifier.min_abs_preactivation(s.features, w_hat));
  return m;
}

/// Draws instances until every rectifier pre-activation is at least `margin` from zero.
inline HypergradInstance make_hypergrad_instance(Rng& rng, std::size_t d, std::size_t k, std::size_t n, std::size_t m,
                                                 double margin, WeightScheme scheme = WeightScheme::Raw,
                                                 std::size_t weightnet_hidden = WeightNet::kDefaultHidden,
                                                 std::size_t classifier_hidden = 4) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    HypergradInstance inst;
    inst.state.classifier = random_classifier({d, classifier_hidden, k}, rng);
    inst.state.weightnet = random_weightnet(rng, weightnet_hidden);
    inst.state.momentum_buffer.assign(inst.state.classifier.num_params(), 0.0);
    inst.train = random_samples(n, d, k, rng);
    inst.meta = random_samples(m, d, k, rng);
    if (kink_margin(inst, scheme) >= margin) return inst;
  }
  throw std::runtime_error("could not draw a hypergradient instance clear of rectifier kinks");
}

// ---------------------------------------------------------------------------
// Property suite.
// ---------------------------------------------------------------------------

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 20240601;
  LossKind equivalence_loss = LossKind::MAE;  // CE makes the equivalence property a negative control
  bool flip_theta_sign = false;            // mutation: negate the analytic hypergradient
};

namespace detail {
inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

struct EquivalenceSweep {
  double worst_relative = 0.0;
  std::size_t instances = 0;
  std::size_t above_1e3 = 0;
};

inline EquivalenceSweep equivalence_sweep(LossKind kind, Rng& rng) {
  EquivalenceSweep out;
  const std::size_t ks[] = {3, 5, 10};
  const double etas[] = {0.2, 0.4, 0.6, 0.8};
  for (int rep = 0; rep < 17; ++rep)
    for (std::size_t k : ks)
      for (double eta : etas) {
        const ClassifierNet net = random_classifier({4, 6, k}, rng);
        const auto meta = random_samples(8, 4, k, rng);
        const GradVec clean = clean_meta_gradient(net, net.params(), meta, kind);
        const GradVec noisy = expected_noisy_meta_gradient_uniform(net, net.params(), meta, eta, kind);
        const auto r = equivalence_report(noisy, clean, eta, kind, k);
        out.worst_relative = std::max(out.worst_relative, r.relative_residual);
        out.above_1e3 += r.relative_residual > 1e-3;
        ++out.instances;
      }
  return out;
}
}  // namespace detail

inline PropertyResult check_uniform_equivalence(LossKind kind, Rng& rng) {
  const auto s = detail::equivalence_sweep(kind, rng);
  return {std::string("uniform_noise_equivalence[") + std::string(to_string(kind)) + "]",
          s.worst_relative <= 1e-10,
          detail::fmt("%.0f instances, worst relative residual %.3e (limit 1e-10)", double(s.instances),
                      s.worst_relative)};
}

inline PropertyResult check_equivalence_ce_control(Rng& rng) {
  const auto s = detail::equivalence_sweep(LossKind::CE, rng);
  const double frac = double(s.above_1e3) / double(s.instances);
  return {"equivalence_ce_negative_control", frac >= 0.9,
          detail::fmt("%.1f%% of %.0f CE instances exceed 1e-3 (need >= 90%%)", 100.0 * frac, double(s.instances))};
}

inline PropertyResult check_symmetric_property(Rng& rng) {
  double worst = 0.0;
  for (std::size_t k : {2u, 3u, 5u, 10u}) {
    for (int i = 0; i < 1000; ++i) {
      Vec z(k);
      for (double& v : z) v = rng.gaussian(0.0, 3.0);
      worst = std::max(worst, std::abs(symmetry_sum(LossKind::MAE, softmax(z)) - (2.0 * double(k) - 2.0)));
    }
  }
  double ce_gap = 0.0;
  int draws = 0;
  Vec first;
  for (; draws < 10 && ce_gap <= 0.1; ++draws) {
    Vec z(5);
    for (double& v : z) v = rng.gaussian(0.0, 2.0);
    const Vec u = softmax(z);
    if (first.empty()) {
      first = u;
      continue;
    }
    ce_gap = std::max(ce_gap, std::abs(symmetry_sum(LossKind::CE, u) - symmetry_sum(LossKind::CE, first)));
  }
  return {"symmetric_property", worst <= 1e-12 && ce_gap > 0.1,
          detail::fmt("MAE worst deviation from 2K-2: %.2e; CE witness gap %.3f after %.0f draws", worst, ce_gap,
                      double(draws))};
}

inline PropertyResult check_hypergradient(Rng& rng, bool flip_sign, WeightScheme scheme) {
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto inst = make_hypergrad_instance(rng, 3, 3, 4, 4, 1e-5, scheme);
    GradVec analytic = theta_gradient(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, scheme);
    if (flip_sign)
      for (double& v : analytic) v = -v;
    const GradVec fd = finite_diff_theta_grad(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, 1e-6, scheme);
    worst = std::max(worst, relative_error(analytic, fd));
  }
  return {std::string("hypergradient_finite_difference[") + std::string(to_string(scheme)) + "]", worst <= 1e-4,
          detail::fmt("worst relative error %.3e over 20 instances (limit 1e-4)", worst)};
}

inline PropertyResult check_fd_convergence_order(Rng& rng) {
  // Large steps so truncation error dominates; a small weighting net keeps kinks avoidable.
  const double h = 2e-3;
  const auto inst = make_hypergrad_instance(rng, 3, 3, 4, 4, 40.0 * h, WeightScheme::Raw, 4);
  const GradVec analytic = theta_gradient(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE);
  const double e1 = norm2(sub(finite_diff_theta_grad(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, h), analytic));
  const double e2 =
      norm2(sub(finite_diff_theta_grad(inst.state, inst.train, inst.meta, inst.alpha, LossKind::CE, h / 2), analytic));
  const double ratio = e1 / e2;
  return {"finite_difference_second_order", ratio >= 3.0 && ratio <= 5.0,
          detail::fmt("error(h)/error(h/2) = %.3f (expect ~4)", ratio)};
}

inline PropertyResult check_flip_analysis(Rng& rng) {
  int witness_at = -1;
  for (int i = 0; i < 10 && witness_at < 0; ++i) {
    const ClassifierNet net = random_classifier({4, 6, 5}, rng);
    const auto meta = random_samples(8, 4, 5, rng);
    const auto targets = draw_targets({NoiseKind::Flip, 0.4, 5, rng.next_u64()});
    std::vector<std::size_t> map;
    for (const auto& t : targets) map.push_back(t[0]);
    const GradVec clean = clean_meta_gradient(net, net.params(), meta, LossKind::MAE);
    const GradVec flip = expected_noisy_meta_gradient_flip(net, net.params(), meta, 0.4, map, LossKind::MAE);
    if (proportionality_residual(flip, clean) > 1e-3) witness_at = i;
  }
  double worst_all = 0.0;
  for (int i = 0; i < 10; ++i) {
    const ClassifierNet net = random_classifier({4, 6, 3}, rng);
    const auto meta = random_samples(8, 4, 3, rng);
    const GradVec clean = clean_meta_gradient(net, net.params(), meta, LossKind::MAE);
    const GradVec avg = flip_expectation_over_all_maps(net, net.params(), meta, 0.4, LossKind::MAE);
    worst_all = std::max(worst_all, proportionality_residual(avg, clean));
  }
  return {"flip_fixed_map_vs_all_maps", witness_at >= 0 && worst_all <= 1e-10,
          detail::fmt("fixed-map witness at draw %.0f; all-maps worst residual %.3e (limit 1e-10)", witness_at,
                      worst_all)};
}

inline PropertyResult check_variance_bound(Rng& rng) {
  int held = 0;
  for (int i = 0; i < 100; ++i) {
    const ClassifierNet net = random_classifier({4, 6, 5}, rng);
    const auto pool = random_samples(50, 4, 5, rng);
    const auto r = variance_bound_check(net, net.params(), pool, 0.4, 20, 1000, LossKind::MAE, rng);
    held += r.holds;
  }
  return {"variance_bound", held >= 95, detail::fmt("bound held in %.0f of 100 configurations (need >= 95)", held)};
}

inline PropertyResult check_variance_scaling(Rng& rng) {
  const ClassifierNet net = random_classifier({4, 6, 5}, rng);
  const auto pool = random_samples(50, 4, 5, rng);
  const auto a = variance_bound_check(net, net.params(), pool, 0.4, 20, 4000, LossKind::MAE, rng);
  const auto b = variance_bound_check(net, net.params(), pool, 0.4, 40, 4000, LossKind::MAE, rng);
  const double emp = b.empirical_variance / a.empirical_variance;
  const double term = (b.bound - b.sigma2) / (a.bound - a.sigma2);
  return {"variance_one_over_m", emp >= 0.4 && emp <= 0.6 && term >= 0.4 && term <= 0.6,
          detail::fmt("doubling m: empirical ratio %.3f, 2*eta*rho^2/m ratio %.3f", emp, term)};
}

/// Log-log slope of the RMS error between Monte-Carlo noisy meta-gradients and the
/// enumerated expectation, against the number of trials.
inline double monte_carlo_slope(Rng& rng, std::size_t replicates = 40) {
  const std::size_t k = 5;
  const double eta = 0.4;
  const ClassifierNet net = random_classifier({4, 6, k}, rng);
  const auto meta = random_samples(10, 4, k, rng);
  const auto grads = per_label_meta_grads(net, net.params(), meta, LossKind::MAE);
  const auto t = build_transition({NoiseKind::Uniform, eta, k, 0});
  const GradVec exact = expected_noisy_meta_gradient(net, net.params(), meta, t, LossKind::MAE);
  const double inv_m = 1.0 / static_cast<double>(meta.size());

  std::vector<double> xs, ys;
  for (std::size_t trials = 64; trials <= 16384; trials *= 4) {
    double mse = 0.0;
    for (std::size_t r = 0; r < replicates; ++r) {
      // The trial-average is linear in the per-(sample, label) draw counts.
      std::vector<std::vector<std::size_t>> counts(meta.size(), std::vector<std::size_t>(k, 0));
      for (std::size_t tr = 0; tr < trials; ++tr)
        for (std::size_t j = 0; j < meta.size(); ++j) ++counts[j][draw_label(t, meta[j].true_label, rng)];
      GradVec g(net.num_params(), 0.0);
      for (std::size_t j = 0; j < meta.size(); ++j)
        for (std::size_t c = 0; c < k; ++c)
          if (counts[j][c]) axpy(inv_m * double(counts[j][c]) / double(trials), grads[j][c], g);
      const Vec d = sub(g, exact);
      mse += dot(d, d) / double(replicates);
    }
    xs.push_back(std::log(double(trials)));
    ys.push_back(0.5 * std::log(mse));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i] / double(xs.size());
    my += ys[i] / double(ys.size());
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

inline PropertyResult check_monte_carlo_rate(Rng& rng) {
  const double slope = monte_carlo_slope(rng);
  return {"monte_carlo_rate", std::abs(slope + 0.5) <= 0.15,
          detail::fmt("log-log slope %.3f (expect -0.5 +/- 0.15)", slope)};
}

inline PropertyResult check_noise_fidelity(Rng& rng) {
  const auto u = build_transition({NoiseKind::Uniform, 0.4, 5, 0});
  bool closed_form = true;
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t c = 0; c < 5; ++c)
      closed_form &= std::abs(u.p(y, c) - (y == c ? 0.68 : 0.08)) <= 1e-15;

  double worst_z = 0.0;
  for (NoiseKind kind : {NoiseKind::Uniform, NoiseKind::Flip, NoiseKind::Flip2}) {
    const auto t = build_transition({kind, 0.4, 5, rng.next_u64()});
    const std::size_t per_class = 100000;
    for (std::size_t y = 0; y < 5; ++y) {
      std::vector<std::size_t> counts(5, 0);
      for (std::size_t i = 0; i < per_class; ++i) ++counts[draw_label(t, y, rng)];
      for (std::size_t c = 0; c < 5; ++c) {
        const double p = t.p(y, c);
        const double freq = double(counts[c]) / double(per_class);
        const double se = std::sqrt(std::max(p * (1 - p), 1e-300) / double(per_class));
        worst_z = std::max(worst_z, p == 0.0 ? (counts[c] ? 1e9 : 0.0) : std::abs(freq - p) / se);
      }
    }
  }
  return {"noise_model_fidelity", closed_form && worst_z <= 3.0,
          std::string(closed_form ? "closed form ok" : "closed form MISMATCH") +
              detail::fmt("; worst |z| over 75 cells %.2f (limit 3)", worst_z)};
}

/// Runs every theory property at fixed seeds. Each property owns its own stream.
inline std::vector<PropertyResult> run_verify_suite(const VerifyOptions& opt = {},
                                                    const std::function<void(const PropertyResult&)>& on_result = {}) {
  std::vector<PropertyResult> out;
  auto add = [&](PropertyResult r) {
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  };
  Rng base(opt.seed);
  {
    Rng r = base.split(1);
    add(check_uniform_equivalence(opt.equivalence_loss, r));
  }
  {
    Rng r = base.split(2);
    add(check_equivalence_ce_control(r));
  }
  {
    Rng r = base.split(3);
    add(check_symmetric_property(r));
  }
  {
    Rng r = base.split(4);
    add(check_hypergradient(r, opt.flip_theta_sign, WeightScheme::Raw));
  }
  {
    Rng r = base.split(5);
    add(check_hypergradient(r, opt.flip_theta_sign, WeightScheme::BatchNormalized));
  }
  {
    Rng r = base.split(6);
    add(check_fd_convergence_order(r));
  }
  {
    Rng r = base.split(7);
    add(check_flip_analysis(r));
  }
  {
    Rng r = base.split(8);
    add(check_variance_bound(r));
  }
  {
    Rng r = base.split(9);
    add(check_variance_scaling(r));
  }
  {
    Rng r = base.split(10);
    add(check_monte_carlo_rate(r));
  }
  {
    Rng r = base.split(11);
    add(check_noise_fidelity(r));
  }
  return out;
}

}  // namespace mwnet
