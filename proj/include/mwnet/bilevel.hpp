#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mwnet/data.hpp"
#include "mwnet/losses.hpp"
#include "mwnet/metrics.hpp"
#include "mwnet/nets.hpp"
#include "mwnet/numkit.hpp"

namespace mwnet {

/// MWNetStar: clean meta set, CE meta loss.
/// MNWNet:    noisy meta set, CE meta loss.
/// RMNWNet:   noisy meta set, MAE meta loss.
enum class Variant { MWNetStar, MNWNet, RMNWNet };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::MWNetStar: return "mwnet_star";
    case Variant::MNWNet: return "mnwnet";
    case Variant::RMNWNet: return "rmnwnet";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "mwnet_star") return Variant::MWNetStar;
  if (s == "mnwnet") return Variant::MNWNet;
  if (s == "rmnwnet") return Variant::RMNWNet;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

/// How weighting-net outputs turn into per-sample step coefficients.
/// Raw:             c_i = W_i / n
/// BatchNormalized: c_i = W_i / sum_k W_k
enum class WeightScheme { Raw, BatchNormalized };

inline std::string_view to_string(WeightScheme s) { return s == WeightScheme::Raw ? "raw" : "normalized"; }

inline WeightScheme parse_weight_scheme(std::string_view s) {
  if (s == "raw") return WeightScheme::Raw;
  if (s == "normalized") return WeightScheme::BatchNormalized;
  throw std::invalid_argument("unknown weight scheme '" + std::string(s) + "'");
}

enum class MetaOptimizer { Sgd, Adam };

inline std::string_view to_string(MetaOptimizer o) { return o == MetaOptimizer::Sgd ? "sgd" : "adam"; }

inline MetaOptimizer parse_meta_optimizer(std::string_view s) {
  if (s == "sgd") return MetaOptimizer::Sgd;
  if (s == "adam") return MetaOptimizer::Adam;
  throw std::invalid_argument("unknown meta optimizer '" + std::string(s) + "'");
}

inline LossKind meta_loss_of(Variant v) { return v == Variant::RMNWNet ? LossKind::MAE : LossKind::CE; }
inline bool meta_is_noisy_of(Variant v) { return v != Variant::MWNetStar; }

struct TrainConfig {
  std::size_t train_batch = 100;
  std::size_t meta_batch = 100;
  double lr = 0.05;
  double meta_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double meta_weight_decay = 5e-4;
  std::size_t epochs = 40;
  std::vector<std::size_t> lr_milestones = {24, 32};
  std::vector<std::size_t> hidden = {12};
  std::size_t weightnet_hidden = WeightNet::kDefaultHidden;
  WeightScheme weight_scheme = WeightScheme::BatchNormalized;
  MetaOptimizer meta_optimizer = MetaOptimizer::Adam;
  LossKind meta_loss = LossKind::CE;
  bool meta_is_noisy = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (train_batch < 1 || meta_batch < 1) throw std::invalid_argument("TrainConfig: batch sizes must be >= 1");
    if (!(lr > 0.0) || !(meta_lr > 0.0)) throw std::invalid_argument("TrainConfig: learning rates must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !(meta_weight_decay >= 0.0))
      throw std::invalid_argument("TrainConfig: weight decay must be >= 0");
    if (weightnet_hidden < 1) throw std::invalid_argument("TrainConfig: weighting net needs hidden units");
    for (std::size_t i = 1; i < lr_milestones.size(); ++i)
      if (lr_milestones[i] <= lr_milestones[i - 1])
        throw std::invalid_argument("TrainConfig: lr milestones must be strictly increasing");
    for (std::size_t h : hidden)
      if (h == 0) throw std::invalid_argument("TrainConfig: hidden layer sizes must be positive");
  }

  /// Learning rate in effect during `epoch` (0-based): divided by 10 per milestone reached.
  double lr_at(std::size_t epoch) const {
    double a = lr;
    for (std::size_t m : lr_milestones)
      if (epoch >= m) a /= 10.0;
    return a;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline TrainConfig config_for(Variant v, TrainConfig cfg) {
  cfg.meta_loss = meta_loss_of(v);
  cfg.meta_is_noisy = meta_is_noisy_of(v);
  return cfg;
}

inline void check_variant(Variant v, const TrainConfig& cfg) {
  if (cfg.meta_loss != meta_loss_of(v) || cfg.meta_is_noisy != meta_is_noisy_of(v)) {
    throw std::invalid_argument("variant " + std::string(to_string(v)) + " requires meta_loss=" +
                                std::string(to_string(meta_loss_of(v))) +
                                " and meta_is_noisy=" + (meta_is_noisy_of(v) ? "true" : "false"));
  }
}

/// Adam moments for Theta (PyTorch semantics: L2 decay folded into the gradient).
struct AdamState {
  Vec m, v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct BilevelState {
  ClassifierNet classifier;  // w
  WeightNet weightnet;       // Theta
  Vec momentum_buffer;
  AdamState theta_adam;
  std::size_t step = 0;
  double lr = 0.0;

  static BilevelState init(std::size_t dim, std::size_t num_classes, const TrainConfig& cfg, Rng& rng) {
    std::vector<std::size_t> sizes{dim};
    sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
    sizes.push_back(num_classes);
    BilevelState s;
    s.classifier = ClassifierNet::he_init(sizes, rng);
    s.weightnet = WeightNet::flat_init(rng, cfg.weightnet_hidden);
    s.momentum_buffer.assign(s.classifier.num_params(), 0.0);
    s.theta_adam.m.assign(s.weightnet.num_params(), 0.0);
    s.theta_adam.v.assign(s.weightnet.num_params(), 0.0);
    s.lr = cfg.lr;
    return s;
  }
};

using Batch = std::span<const Sample>;

/// Per-sample CE losses and gradients of a training batch at the current w,
/// using the observed (possibly corrupted) labels.
struct TrainBatchGrads {
  Vec losses;
  std::vector<GradVec> grads;
};

inline TrainBatchGrads train_batch_grads(const ClassifierNet& net, Batch batch) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  TrainBatchGrads out;
  out.losses.reserve(batch.size());
  out.grads.reserve(batch.size());
  for (const Sample& s : batch) {
    auto lg = net.per_sample_grad(s.features, s.observed_label, LossKind::CE);
    out.losses.push_back(lg.loss);
    out.grads.push_back(std::move(lg.grad));
  }
  return out;
}

inline Vec sample_weights(const WeightNet& wnet, std::span<const double> losses, std::span<const double> theta) {
  Vec w(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) w[i] = wnet.forward(losses[i], theta);
  return w;
}

/// Per-sample step coefficients c_i; the weighted step direction is sum_i c_i g_i.
inline Vec step_coefficients(std::span<const double> weights, WeightScheme scheme) {
  Vec c(weights.begin(), weights.end());
  double denom = static_cast<double>(c.size());
  if (scheme == WeightScheme::BatchNormalized) {
    denom = 0.0;
    for (double w : weights) denom += w;
  }
  for (double& v : c) v /= denom;
  return c;
}

/// sum_i c_i g_i
inline GradVec weighted_grad(const TrainBatchGrads& tg, std::span<const double> coeffs) {
  GradVec g(tg.grads.front().size(), 0.0);
  for (std::size_t i = 0; i < tg.grads.size(); ++i) axpy(coeffs[i], tg.grads[i], g);
  return g;
}

/// w_hat = w - alpha sum_i c_i(theta) g_i; with Raw weights this is
/// w - (alpha/n) sum_i W(l_i; theta) g_i. Plain SGD: no momentum, no decay.
inline Vec virtual_step(const ClassifierNet& net, const WeightNet& wnet, std::span<const double> theta,
                        const TrainBatchGrads& tg, double alpha, WeightScheme scheme = WeightScheme::Raw) {
  Vec w_hat = net.params();
  axpy(-alpha, weighted_grad(tg, step_coefficients(sample_weights(wnet, tg.losses, theta), scheme)), w_hat);
  return w_hat;
}

inline Vec virtual_step(const BilevelState& state, Batch train_batch, double alpha,
                        WeightScheme scheme = WeightScheme::Raw) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("virtual_step: alpha must be >= 0");
  const auto tg = train_batch_grads(state.classifier, train_batch);
  return virtual_step(state.classifier, state.weightnet, state.weightnet.params(), tg, alpha, scheme);
}

/// G(w_hat) = (1/m) sum_j grad of the meta loss at w_hat, using observed meta labels.
inline GradVec meta_gradient(const ClassifierNet& net, std::span<const double> w_hat, Batch meta_batch,
                             LossKind kind) {
  if (meta_batch.empty()) throw std::invalid_argument("empty meta batch");
  GradVec g(net.num_params(), 0.0);
  const double inv_m = 1.0 / static_cast<double>(meta_batch.size());
  for (const Sample& s : meta_batch) axpy(inv_m, net.per_sample_grad(s.features, s.observed_label, kind, w_hat).grad, g);
  return g;
}

/// Mean meta loss at w_hat.
inline double meta_objective_at(const ClassifierNet& net, std::span<const double> w_hat, Batch meta_batch,
                                LossKind kind) {
  if (meta_batch.empty()) throw std::invalid_argument("empty meta batch");
  double s = 0.0;
  for (const Sample& x : meta_batch) s += loss_value(kind, x.observed_label, net.forward(x.features, w_hat));
  return s / static_cast<double>(meta_batch.size());
}

/// Theta -> mean meta loss after one plain-SGD virtual step taken with weights W(.; theta).
inline double composed_meta_objective(const BilevelState& state, Batch train_batch, Batch meta_batch, double alpha,
                                      LossKind kind, std::span<const double> theta,
                                      WeightScheme scheme = WeightScheme::Raw) {
  const auto tg = train_batch_grads(state.classifier, train_batch);
  const Vec w_hat = virtual_step(state.classifier, state.weightnet, theta, tg, alpha, scheme);
  return meta_objective_at(state.classifier, w_hat, meta_batch, kind);
}

/// Gradient of the composed meta objective with respect to Theta.
///
/// Raw:             -(alpha/n) sum_i (G^T g_i) dW_i/dTheta
/// BatchNormalized: -(alpha/S) sum_i (G^T g_i - sum_k c_k G^T g_k) dW_i/dTheta,  S = sum_k W_k
///
/// G is the meta-gradient at the virtual step. The weighting-net input l_i
/// depends only on w, so nothing flows back through it.
inline GradVec theta_gradient(const BilevelState& state, const TrainBatchGrads& tg, Batch meta_batch, double alpha,
                              LossKind kind, WeightScheme scheme = WeightScheme::Raw) {
  const Vec weights = sample_weights(state.weightnet, tg.losses, state.weightnet.params());
  const Vec coeffs = step_coefficients(weights, scheme);
  Vec w_hat = state.classifier.params();
  axpy(-alpha, weighted_grad(tg, coeffs), w_hat);
  const GradVec G = meta_gradient(state.classifier, w_hat, meta_batch, kind);

  Vec align(tg.grads.size());
  for (std::size_t i = 0; i < tg.grads.size(); ++i) align[i] = dot(G, tg.grads[i]);
  double scale = -alpha / static_cast<double>(tg.grads.size());
  if (scheme == WeightScheme::BatchNormalized) {
    double sum_w = 0.0, mean_align = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      sum_w += weights[i];
      mean_align += coeffs[i] * align[i];
    }
    for (double& a : align) a -= mean_align;
    scale = -alpha / sum_w;
  }

  GradVec out(state.weightnet.num_params(), 0.0);
  for (std::size_t i = 0; i < tg.grads.size(); ++i) {
    if (align[i] == 0.0) continue;
    axpy(scale * align[i], state.weightnet.grad_theta(tg.losses[i]), out);
  }
  return out;
}

inline GradVec theta_gradient(const BilevelState& state, Batch train_batch, Batch meta_batch, double alpha,
                              LossKind kind, WeightScheme scheme = WeightScheme::Raw) {
  return theta_gradient(state, train_batch_grads(state.classifier, train_batch), meta_batch, alpha, kind, scheme);
}

/// Theta <- Theta - beta (grad + weight_decay Theta)
inline void theta_update(BilevelState& state, std::span<const double> theta_grad, double beta, double weight_decay) {
  Vec& theta = state.weightnet.params();
  if (theta_grad.size() != theta.size()) throw std::invalid_argument("theta_update: gradient length mismatch");
  for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= beta * (theta_grad[k] + weight_decay * theta[k]);
}

/// Bias-corrected Adam step on Theta with L2 decay added to the gradient.
inline void theta_update_adam(BilevelState& state, std::span<const double> theta_grad, double beta,
                              double weight_decay) {
  Vec& theta = state.weightnet.params();
  AdamState& a = state.theta_adam;
  if (theta_grad.size() != theta.size()) throw std::invalid_argument("theta_update_adam: gradient length mismatch");
  if (a.m.size() != theta.size()) {
    a.m.assign(theta.size(), 0.0);
    a.v.assign(theta.size(), 0.0);
    a.t = 0;
  }
  ++a.t;
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(a.t));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(a.t));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double g = theta_grad[k] + weight_decay * theta[k];
    a.m[k] = a.beta1 * a.m[k] + (1.0 - a.beta1) * g;
    a.v[k] = a.beta2 * a.v[k] + (1.0 - a.beta2) * g * g;
    theta[k] -= beta * (a.m[k] / c1) / (std::sqrt(a.v[k] / c2) + a.eps);
  }
}

/// v <- momentum v + (g_bar + weight_decay w); w <- w - alpha v, where g_bar is the
/// weighted gradient sum_i c_i g_i under the current (already updated) Theta.
inline void classifier_update(BilevelState& state, const TrainBatchGrads& tg, double alpha, double momentum,
                              double weight_decay, WeightScheme scheme = WeightScheme::Raw) {
  const Vec weights = sample_weights(state.weightnet, tg.losses, state.weightnet.params());
  const GradVec g = weighted_grad(tg, step_coefficients(weights, scheme));
  Vec& w = state.classifier.params();
  Vec& v = state.momentum_buffer;
  for (std::size_t k = 0; k < w.size(); ++k) {
    v[k] = momentum * v[k] + (g[k] + weight_decay * w[k]);
    w[k] -= alpha * v[k];
  }
}

inline void classifier_update(BilevelState& state, Batch train_batch, double alpha, double momentum,
                              double weight_decay, WeightScheme scheme = WeightScheme::Raw) {
  classifier_update(state, train_batch_grads(state.classifier, train_batch), alpha, momentum, weight_decay, scheme);
}

/// One online alternation: virtual step, Theta update, classifier update.
inline void bilevel_step(BilevelState& state, Batch train_batch, Batch meta_batch, const TrainConfig& cfg) {
  const auto tg = train_batch_grads(state.classifier, train_batch);
  const GradVec tgrad = theta_gradient(state, tg, meta_batch, state.lr, cfg.meta_loss, cfg.weight_scheme);
  if (cfg.meta_optimizer == MetaOptimizer::Adam)
    theta_update_adam(state, tgrad, cfg.meta_lr, cfg.meta_weight_decay);
  else
    theta_update(state, tgrad, cfg.meta_lr, cfg.meta_weight_decay);
  classifier_update(state, tg, state.lr, cfg.momentum, cfg.weight_decay, cfg.weight_scheme);
  ++state.step;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double test_accuracy = 0.0;
  double train_auc = std::numeric_limits<double>::quiet_NaN();
  double mean_weight_clean = std::numeric_limits<double>::quiet_NaN();
  double mean_weight_corrupt = std::numeric_limits<double>::quiet_NaN();

  bool operator==(const EpochRecord&) const = default;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  double final_test_accuracy = 0.0;
  double best_auc = std::numeric_limits<double>::quiet_NaN();
  double final_auc = std::numeric_limits<double>::quiet_NaN();
  WeightSummary final_weights;
  std::vector<std::size_t> weight_histogram;  // 20 equal bins over [0, 1]
};

inline constexpr std::size_t kWeightHistogramBins = 20;

struct DataSplits {
  const LabeledDataset& train;  // observed labels may be corrupted
  const LabeledDataset& meta;   // corrupted iff the variant uses a noisy meta set
  const LabeledDataset& test;   // clean
};

inline double test_accuracy(const ClassifierNet& net, const LabeledDataset& test) {
  std::vector<std::size_t> pred, truth;
  pred.reserve(test.size());
  truth.reserve(test.size());
  for (const auto& s : test.samples) {
    pred.push_back(net.predict(s.features));
    truth.push_back(s.true_label);
  }
  return accuracy(pred, truth);
}

/// Weighting-net output for every training sample at the current (w, Theta).
inline Vec training_weights(const BilevelState& state, const LabeledDataset& train) {
  Vec w;
  w.reserve(train.size());
  for (const auto& s : train.samples)
    w.push_back(state.weightnet.forward(ce_loss(s.observed_label, state.classifier.forward(s.features))));
  return w;
}

inline RunReport train(Variant variant, const DataSplits& data, const TrainConfig& cfg) {
  cfg.validate();
  check_variant(variant, cfg);
  if (data.train.size() == 0 || data.meta.size() == 0 || data.test.size() == 0)
    throw std::invalid_argument("train: every split must be nonempty");
  if (data.train.dim != data.meta.dim || data.train.dim != data.test.dim ||
      data.train.num_classes != data.meta.num_classes || data.train.num_classes != data.test.num_classes)
    throw std::invalid_argument("train: splits disagree on shape");

  Rng init_rng(cfg.seed, 1), shuffle_rng(cfg.seed, 2), meta_rng(cfg.seed, 3);
  BilevelState state = BilevelState::init(data.train.dim, data.train.num_classes, cfg, init_rng);

  std::vector<bool> flags;
  flags.reserve(data.train.size());
  std::size_t n_corrupt = 0;
  for (const auto& s : data.train.samples) {
    flags.push_back(s.is_corrupted);
    n_corrupt += s.is_corrupted;
  }
  const bool auc_defined = n_corrupt > 0 && n_corrupt < data.train.size();

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<Sample> train_batch, meta_batch;
  RunReport report;
  Vec weights;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.lr = cfg.lr_at(epoch);
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.train_batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.train_batch);
      train_batch.clear();
      for (std::size_t i = start; i < stop; ++i) train_batch.push_back(data.train.samples[order[i]]);
      meta_batch.clear();
      for (std::size_t j = 0; j < cfg.meta_batch; ++j)
        meta_batch.push_back(data.meta.samples[meta_rng.below(data.meta.size())]);
      bilevel_step(state, train_batch, meta_batch, cfg);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state.lr;
    rec.test_accuracy = test_accuracy(state.classifier, data.test);
    weights = training_weights(state, data.train);
    const WeightSummary ws = weight_summary(weights, flags);
    rec.mean_weight_clean = ws.clean.mean;
    rec.mean_weight_corrupt = ws.corrupt.mean;
    if (auc_defined) {
      rec.train_auc = auc_noisy_detection(weights, flags);
      if (std::isnan(report.best_auc) || rec.train_auc > report.best_auc) report.best_auc = rec.train_auc;
    }
    report.epochs.push_back(rec);
  }

  if (!report.epochs.empty()) {
    report.final_test_accuracy = report.epochs.back().test_accuracy;
    report.final_auc = report.epochs.back().train_auc;
  } else {
    report.final_test_accuracy = test_accuracy(state.classifier, data.test);
    weights = training_weights(state, data.train);
  }
  report.final_weights = weight_summary(weights, flags);
  report.weight_histogram.assign(kWeightHistogramBins, 0);
  for (double w : weights) {
    auto bin = static_cast<std::size_t>(w * static_cast<double>(kWeightHistogramBins));
    ++report.weight_histogram[std::min(bin, kWeightHistogramBins - 1)];
  }
  return report;
}

/// Columns: epoch,test_accuracy,train_auc,mean_weight_clean,mean_weight_corrupt
inline void write_run_report_csv(std::ostream& os, const RunReport& r) {
  os << "epoch,test_accuracy,train_auc,mean_weight_clean,mean_weight_corrupt\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << format_real(e.test_accuracy) << ',' << format_real(e.train_auc) << ','
       << format_real(e.mean_weight_clean) << ',' << format_real(e.mean_weight_corrupt) << '\n';
  }
}

}  // namespace mwnet
