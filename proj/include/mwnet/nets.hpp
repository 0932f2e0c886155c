#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwnet/data.hpp"
#include "mwnet/losses.hpp"
#include "mwnet/numkit.hpp"

namespace mwnet {

/// Gradient aligned with a network's flat parameter vector.
using GradVec = Vec;

struct LossAndGrad {
  double loss = 0.0;
  GradVec grad;
};

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
// The derivative at exactly 0 is taken as 0.
inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }
inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Rectifier MLP with a softmax output.
///
/// Flat parameter order: for each layer l = 1..L (input to output), the
/// weight matrix W_l (out_l x in_l, row-major) followed by the bias b_l.
class ClassifierNet {
 public:
  ClassifierNet() = default;

  explicit ClassifierNet(std::vector<std::size_t> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw std::invalid_argument("ClassifierNet: need input and output layer");
    for (std::size_t s : sizes_)
      if (s == 0) throw std::invalid_argument("ClassifierNet: layer sizes must be positive");
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weight_offset_.push_back(off);
      off += sizes_[l] * sizes_[l + 1];
      bias_offset_.push_back(off);
      off += sizes_[l + 1];
    }
    params_.assign(off, 0.0);
  }

  /// Weights from N(0, 2 / fan_in), biases zero.
  static ClassifierNet he_init(std::vector<std::size_t> layer_sizes, Rng& rng) {
    ClassifierNet net(std::move(layer_sizes));
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const double sd = std::sqrt(2.0 / static_cast<double>(net.sizes_[l]));
      const std::size_t n = net.sizes_[l] * net.sizes_[l + 1];
      for (std::size_t i = 0; i < n; ++i) net.params_[net.weight_offset_[l] + i] = rng.gaussian(0.0, sd);
    }
    return net;
  }

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t num_layers() const { return sizes_.size() - 1; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t num_classes() const { return sizes_.back(); }
  std::size_t num_params() const { return params_.size(); }
  std::size_t weight_offset(std::size_t layer) const { return weight_offset_.at(layer); }
  std::size_t bias_offset(std::size_t layer) const { return bias_offset_.at(layer); }

  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  void set_params(Vec w) {
    if (w.size() != params_.size()) throw std::invalid_argument("ClassifierNet: parameter length mismatch");
    params_ = std::move(w);
  }

  Vec logits(std::span<const double> x) const { return logits(x, params_); }
  Vec logits(std::span<const double> x, std::span<const double> w) const {
    Vec a(x.begin(), x.end());
    run_forward(a, w, nullptr);
    return a;
  }

  ProbVec forward(std::span<const double> x) const { return softmax(logits(x)); }
  ProbVec forward(std::span<const double> x, std::span<const double> w) const {
    return softmax(logits(x, w));
  }

  std::size_t predict(std::span<const double> x) const {
    const Vec z = logits(x);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }

  LossAndGrad per_sample_grad(std::span<const double> x, std::size_t label, LossKind kind) const {
    return per_sample_grad(x, label, kind, params_);
  }

  /// Loss of (label, softmax(f(x; w))) and its full gradient with respect to w.
  LossAndGrad per_sample_grad(std::span<const double> x, std::size_t label, LossKind kind,
                              std::span<const double> w) const {
    check_params(w);
    std::vector<Vec> acts;  // acts[l] = input to layer l (post-rectifier)
    std::vector<Vec> pre;   // pre[l] = pre-activation output of layer l
    Vec a(x.begin(), x.end());
    Tape tape{&acts, &pre};
    run_forward(a, w, &tape);
    const ProbVec u = softmax(a);

    LossAndGrad out;
    out.loss = loss_value(kind, label, u);
    out.grad.assign(params_.size(), 0.0);
    Vec delta = loss_grad_from_probs(kind, label, u);
    for (std::size_t l = num_layers(); l-- > 0;) {
      const std::size_t in = sizes_[l], outn = sizes_[l + 1];
      const Vec& input = acts[l];
      double* gw = out.grad.data() + weight_offset_[l];
      double* gb = out.grad.data() + bias_offset_[l];
      for (std::size_t o = 0; o < outn; ++o) {
        gb[o] = delta[o];
        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] = delta[o] * input[i];
      }
      if (l == 0) break;
      const double* wl = w.data() + weight_offset_[l];
      Vec prev(in, 0.0);
      for (std::size_t o = 0; o < outn; ++o) {
        if (delta[o] == 0.0) continue;
        for (std::size_t i = 0; i < in; ++i) prev[i] += wl[o * in + i] * delta[o];
      }
      for (std::size_t i = 0; i < in; ++i) prev[i] *= relu_grad(pre[l - 1][i]);
      delta = std::move(prev);
    }
    return out;
  }

  /// Smallest |pre-activation| over all hidden rectifiers for input x.
  double min_abs_preactivation(std::span<const double> x, std::span<const double> w) const {
    std::vector<Vec> acts, pre;
    Vec a(x.begin(), x.end());
    Tape tape{&acts, &pre};
    run_forward(a, w, &tape);
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < num_layers(); ++l)
      for (double z : pre[l]) m = std::min(m, std::abs(z));
    return m;
  }

 private:
  struct Tape {
    std::vector<Vec>* acts;
    std::vector<Vec>* pre;
  };

  void check_params(std::span<const double> w) const {
    if (w.size() != params_.size()) throw std::invalid_argument("ClassifierNet: parameter length mismatch");
  }

  // On return `a` holds the output logits.
  void run_forward(Vec& a, std::span<const double> w, Tape* tape) const {
    if (a.size() != input_dim()) {
      throw std::invalid_argument("ClassifierNet: input has length " + std::to_string(a.size()) +
                                  ", expected " + std::to_string(input_dim()));
    }
    check_params(w);
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const std::size_t in = sizes_[l], outn = sizes_[l + 1];
      const double* wl = w.data() + weight_offset_[l];
      const double* bl = w.data() + bias_offset_[l];
      Vec z(outn);
      for (std::size_t o = 0; o < outn; ++o) {
        double s = bl[o];
        const double* row = wl + o * in;
        for (std::size_t i = 0; i < in; ++i) s += row[i] * a[i];
        z[o] = s;
      }
      const bool hidden = l + 1 < num_layers();
      if (tape) {
        tape->acts->push_back(std::move(a));
        tape->pre->push_back(z);
      }
      if (hidden)
        for (double& v : z) v = relu(v);
      a = std::move(z);
    }
  }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> weight_offset_;
  std::vector<std::size_t> bias_offset_;
  Vec params_;
};

/// Weighting network: scalar loss -> hidden rectifier layer -> logistic weight in (0, 1).
///
/// Flat parameter order: input weights a[H], hidden biases b[H], output
/// weights v[H], output bias c.
class WeightNet {
 public:
  static constexpr std::size_t kDefaultHidden = 100;

  explicit WeightNet(std::size_t hidden = kDefaultHidden) : hidden_(hidden), params_(3 * hidden + 1, 0.0) {
    if (hidden == 0) throw std::invalid_argument("WeightNet: hidden size must be positive");
  }

  static WeightNet he_init(Rng& rng, std::size_t hidden = kDefaultHidden) {
    WeightNet net(hidden);
    const double sd_out = std::sqrt(2.0 / static_cast<double>(hidden));
    for (std::size_t k = 0; k < hidden; ++k) net.params_[k] = rng.gaussian(0.0, std::sqrt(2.0));
    for (std::size_t k = 0; k < hidden; ++k) net.params_[2 * hidden + k] = rng.gaussian(0.0, sd_out);
    return net;
  }

  /// He-scaled input weights, zero output layer: the weighting function starts
  /// flat at logistic(0) = 0.5 for every loss value.
  static WeightNet flat_init(Rng& rng, std::size_t hidden = kDefaultHidden) {
    WeightNet net(hidden);
    for (std::size_t k = 0; k < hidden; ++k) net.params_[k] = rng.gaussian(0.0, std::sqrt(2.0));
    return net;
  }

  std::size_t hidden() const { return hidden_; }
  std::size_t num_params() const { return params_.size(); }
  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  void set_params(Vec t) {
    if (t.size() != params_.size()) throw std::invalid_argument("WeightNet: parameter length mismatch");
    params_ = std::move(t);
  }

  std::size_t in_weight(std::size_t k) const { return k; }
  std::size_t hidden_bias(std::size_t k) const { return hidden_ + k; }
  std::size_t out_weight(std::size_t k) const { return 2 * hidden_ + k; }
  std::size_t out_bias() const { return 3 * hidden_; }

  double forward(double loss_value) const { return forward(loss_value, params_); }
  double forward(double loss_value, std::span<const double> theta) const {
    check_input(loss_value, theta);
    return logistic(output_logit(loss_value, theta));
  }

  GradVec grad_theta(double loss_value) const {
    check_input(loss_value, params_);
    const double s = logistic(output_logit(loss_value, params_));
    const double ds = s * (1.0 - s);
    GradVec g(params_.size(), 0.0);
    for (std::size_t k = 0; k < hidden_; ++k) {
      const double z = params_[in_weight(k)] * loss_value + params_[hidden_bias(k)];
      g[out_weight(k)] = ds * relu(z);
      const double back = ds * params_[out_weight(k)] * relu_grad(z);
      g[in_weight(k)] = back * loss_value;
      g[hidden_bias(k)] = back;
    }
    g[out_bias()] = ds;
    return g;
  }

  double min_abs_preactivation(double loss_value) const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < hidden_; ++k)
      m = std::min(m, std::abs(params_[in_weight(k)] * loss_value + params_[hidden_bias(k)]));
    return m;
  }

 private:
  void check_input(double loss_value, std::span<const double> theta) const {
    if (!std::isfinite(loss_value)) throw std::invalid_argument("WeightNet: non-finite loss input");
    if (theta.size() != params_.size()) throw std::invalid_argument("WeightNet: parameter length mismatch");
  }

  double output_logit(double loss_value, std::span<const double> theta) const {
    double o = theta[3 * hidden_];
    for (std::size_t k = 0; k < hidden_; ++k)
      o += theta[2 * hidden_ + k] * relu(theta[k] * loss_value + theta[hidden_ + k]);
    return o;
  }

  std::size_t hidden_;
  Vec params_;
};

// Snapshot CSV: "layers,<n0>,<n1>,..." then one parameter per line in flat order.

inline void write_snapshot_csv(std::ostream& os, std::span<const std::size_t> layers,
                               std::span<const double> params) {
  os << "layers";
  for (std::size_t s : layers) os << ',' << s;
  os << '\n';
  for (double p : params) os << format_real(p) << '\n';
}

inline void write_snapshot_csv(std::ostream& os, const ClassifierNet& net) {
  write_snapshot_csv(os, net.layer_sizes(), net.params());
}

inline void write_snapshot_csv(std::ostream& os, const WeightNet& net) {
  const std::size_t layers[] = {1, net.hidden(), 1};
  write_snapshot_csv(os, layers, net.params());
}

struct Snapshot {
  std::vector<std::size_t> layers;
  Vec params;
};

inline Snapshot read_snapshot_csv(std::istream& is) {
  Snapshot snap;
  std::string line;
  if (!std::getline(is, line) || line.rfind("layers", 0) != 0)
    throw std::runtime_error("snapshot csv: missing 'layers' header");
  std::stringstream ss(line.substr(6));
  std::string cell;
  while (std::getline(ss, cell, ','))
    if (!cell.empty()) snap.layers.push_back(std::stoul(cell));
  while (std::getline(is, line))
    if (!line.empty()) snap.params.push_back(std::stod(line));
  return snap;
}

inline ClassifierNet classifier_from_snapshot(const Snapshot& snap) {
  ClassifierNet net(snap.layers);
  net.set_params(snap.params);
  return net;
}

inline WeightNet weightnet_from_snapshot(const Snapshot& snap) {
  if (snap.layers.size() != 3 || snap.layers[0] != 1 || snap.layers[2] != 1)
    throw std::runtime_error("snapshot csv: not a 1-H-1 weighting network");
  WeightNet net(snap.layers[1]);
  net.set_params(snap.params);
  return net;
}

}  // namespace mwnet
