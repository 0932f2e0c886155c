#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mwnet/data.hpp"
#include "mwnet/numkit.hpp"

namespace mwnet {

enum class NoiseKind { Uniform, Flip, Flip2 };

inline std::string_view to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::Uniform: return "uniform";
    case NoiseKind::Flip: return "flip";
    case NoiseKind::Flip2: return "flip2";
  }
  return "?";
}

inline NoiseKind parse_noise_kind(std::string_view s) {
  if (s == "uniform") return NoiseKind::Uniform;
  if (s == "flip") return NoiseKind::Flip;
  if (s == "flip2") return NoiseKind::Flip2;
  throw std::invalid_argument("unknown noise kind '" + std::string(s) + "'");
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::Uniform;
  double rate = 0.0;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("NoiseSpec: need at least 2 classes");
    if (kind == NoiseKind::Flip2 && num_classes < 3)
      throw std::invalid_argument("NoiseSpec: flip2 needs at least 3 classes");
    if (!(rate >= 0.0 && rate < 1.0))
      throw std::invalid_argument("NoiseSpec: rate must lie in [0, 1), got " + std::to_string(rate));
  }
};

/// Realized corruption model: p(y, c) = Pr(observed = c | true = y).
/// `targets[y]` lists the fixed corruption targets of class y for flip (one)
/// and flip2 (two); it is empty for uniform noise.
struct TransitionMatrix {
  Mat p;
  std::vector<std::vector<std::size_t>> targets;

  std::size_t num_classes() const { return p.rows(); }
};

/// Draws the fixed flip / flip2 target classes for each true class.
inline std::vector<std::vector<std::size_t>> draw_targets(const NoiseSpec& spec) {
  std::vector<std::vector<std::size_t>> targets(spec.num_classes);
  if (spec.kind == NoiseKind::Uniform) return targets;
  Rng rng(spec.seed, 0x7A26E7);
  const std::size_t count = spec.kind == NoiseKind::Flip ? 1 : 2;
  for (std::size_t y = 0; y < spec.num_classes; ++y) {
    std::vector<std::size_t> others;
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      if (c != y) others.push_back(c);
    rng.shuffle(others);
    targets[y].assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(count));
  }
  return targets;
}

inline TransitionMatrix build_transition(const NoiseSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_classes;
  const double eta = spec.rate;
  TransitionMatrix t{Mat(k, k), draw_targets(spec)};
  for (std::size_t y = 0; y < k; ++y) {
    switch (spec.kind) {
      case NoiseKind::Uniform:
        for (std::size_t c = 0; c < k; ++c) t.p(y, c) = eta / static_cast<double>(k);
        t.p(y, y) = (1.0 - eta) + eta / static_cast<double>(k);
        break;
      case NoiseKind::Flip:
        t.p(y, y) = 1.0 - eta;
        t.p(y, t.targets[y][0]) = eta;
        break;
      case NoiseKind::Flip2:
        t.p(y, y) = 1.0 - eta;
        t.p(y, t.targets[y][0]) = eta / 2.0;
        t.p(y, t.targets[y][1]) = eta / 2.0;
        break;
    }
  }
  return t;
}

/// Draws an observed label for true class y from row y of the matrix.
inline std::size_t draw_label(const TransitionMatrix& t, std::size_t y, Rng& rng) {
  const auto row = t.p.row(y);
  const double u = rng.next_double();
  double acc = 0.0;
  std::size_t last_nonzero = y;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (row[c] <= 0.0) continue;
    acc += row[c];
    last_nonzero = c;
    if (u < acc) return c;
  }
  return last_nonzero;  // rounding in the cumulative sum
}

/// Re-draws every observed label from the transition row of its true label.
inline LabeledDataset corrupt(LabeledDataset ds, const TransitionMatrix& t, Rng& rng) {
  if (t.num_classes() != ds.num_classes)
    throw std::invalid_argument("corrupt: transition matrix and dataset disagree on K");
  for (auto& s : ds.samples) {
    if (s.true_label >= ds.num_classes) throw std::out_of_range("corrupt: label out of range");
    s.observed_label = draw_label(t, s.true_label, rng);
    s.is_corrupted = s.observed_label != s.true_label;
  }
  return ds;
}

enum class Feasibility { Ok, Warning };

/// Warns when the noisy class could become the majority for some true class.
inline Feasibility majority_feasibility(const NoiseSpec& spec) {
  spec.validate();
  double threshold = 1.0;
  if (spec.kind == NoiseKind::Flip) threshold = 0.50;
  if (spec.kind == NoiseKind::Flip2) threshold = 0.67;
  return spec.rate >= threshold ? Feasibility::Warning : Feasibility::Ok;
}

/// CSV: first line "K,<K>", then K rows of K reals.
inline void write_transition_csv(std::ostream& os, const TransitionMatrix& t) {
  os << "K," << t.num_classes() << '\n';
  for (std::size_t y = 0; y < t.num_classes(); ++y) {
    for (std::size_t c = 0; c < t.num_classes(); ++c) {
      if (c) os << ',';
      os << format_real(t.p(y, c));
    }
    os << '\n';
  }
}

}  // namespace mwnet
