#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mwnet/numkit.hpp"

namespace mwnet {

struct Sample {
  Vec features;
  std::size_t observed_label = 0;
  std::size_t true_label = 0;
  bool is_corrupted = false;

  bool operator==(const Sample&) const = default;
};

/// Labeled samples with K classes and d features. A clean dataset has
/// observed_label == true_label everywhere.
struct LabeledDataset {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const LabeledDataset&) const = default;
};

struct BlobSpec {
  std::size_t num_classes = 5;
  std::size_t dim = 20;
  std::size_t n_train = 2000;
  std::size_t n_meta = 200;
  std::size_t n_test = 2000;
  double separation = 3.0;
  double cluster_std = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("BlobSpec: need at least 2 classes");
    if (dim < 1) throw std::invalid_argument("BlobSpec: dim must be >= 1");
    if (n_train < 1 || n_meta < 1 || n_test < 1)
      throw std::invalid_argument("BlobSpec: split sizes must be >= 1");
    if (!(separation > 0.0)) throw std::invalid_argument("BlobSpec: separation must be > 0");
    if (!(cluster_std > 0.0)) throw std::invalid_argument("BlobSpec: cluster_std must be > 0");
  }

  bool operator==(const BlobSpec&) const = default;
};

struct SplitBundle {
  LabeledDataset train;
  LabeledDataset meta;
  LabeledDataset test;
  std::vector<Vec> class_means;

  bool operator==(const SplitBundle&) const = default;
};

/// Class means with pairwise distance >= separation.
///
/// When d >= K the means sit on scaled, randomly permuted and sign-flipped
/// basis vectors (pairwise distance exactly `separation`). Otherwise they lie
/// on a regular polygon in a random coordinate plane (d >= 2), or on a line
/// (d == 1).
inline std::vector<Vec> place_class_means(std::size_t k, std::size_t d, double separation, Rng& rng) {
  std::vector<Vec> means(k, Vec(d, 0.0));
  std::vector<std::size_t> axes(d);
  for (std::size_t i = 0; i < d; ++i) axes[i] = i;
  rng.shuffle(axes);
  if (d >= k) {
    const double r = separation / std::numbers::sqrt2;
    for (std::size_t c = 0; c < k; ++c) means[c][axes[c]] = rng.next_double() < 0.5 ? r : -r;
  } else if (d == 1) {
    const double offset = -0.5 * separation * static_cast<double>(k - 1);
    for (std::size_t c = 0; c < k; ++c) means[c][0] = offset + separation * static_cast<double>(c);
  } else {
    const double radius = separation / (2.0 * std::sin(std::numbers::pi / static_cast<double>(k)));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t c = 0; c < k; ++c) {
      const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
      means[c][axes[0]] = radius * std::cos(a);
      means[c][axes[1]] = radius * std::sin(a);
    }
  }
  return means;
}

namespace detail {
inline LabeledDataset draw_split(std::size_t count, const std::vector<Vec>& means, double std,
                                 Rng& rng) {
  LabeledDataset ds;
  ds.num_classes = means.size();
  ds.dim = means.front().size();
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = i % ds.num_classes;
  rng.shuffle(labels);
  ds.samples.reserve(count);
  for (std::size_t y : labels) {
    Sample s;
    s.features.resize(ds.dim);
    for (std::size_t j = 0; j < ds.dim; ++j) s.features[j] = rng.gaussian(means[y][j], std);
    s.observed_label = y;
    s.true_label = y;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}
}  // namespace detail

inline SplitBundle make_blobs(const BlobSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, 0xB10B);
  SplitBundle b;
  b.class_means = place_class_means(spec.num_classes, spec.dim, spec.separation, rng);
  b.train = detail::draw_split(spec.n_train, b.class_means, spec.cluster_std, rng);
  b.meta = detail::draw_split(spec.n_meta, b.class_means, spec.cluster_std, rng);
  b.test = detail::draw_split(spec.n_test, b.class_means, spec.cluster_std, rng);
  return b;
}

/// Z-scores every split with the train split's per-feature statistics.
inline SplitBundle standardize(SplitBundle b) {
  const auto& tr = b.train.samples;
  if (tr.empty()) throw std::invalid_argument("standardize: empty train split");
  const std::size_t d = b.train.dim;
  Vec mean(d, 0.0), sd(d, 0.0);
  for (const auto& s : tr)
    for (std::size_t j = 0; j < d; ++j) mean[j] += s.features[j];
  for (double& m : mean) m /= static_cast<double>(tr.size());
  for (const auto& s : tr)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (s.features[j] - mean[j]) * (s.features[j] - mean[j]);
  for (double& v : sd) v = std::max(std::sqrt(v / static_cast<double>(tr.size())), 1e-8);

  auto apply = [&](LabeledDataset& ds) {
    for (auto& s : ds.samples)
      for (std::size_t j = 0; j < d; ++j) s.features[j] = (s.features[j] - mean[j]) / sd[j];
  };
  apply(b.train);
  apply(b.meta);
  apply(b.test);
  for (auto& m : b.class_means)
    for (std::size_t j = 0; j < d; ++j) m[j] = (m[j] - mean[j]) / sd[j];
  return b;
}

// CSV layout:
//   K,<K>,d,<d>
//   x0,...,x{d-1},true_label[,observed_label,is_corrupted]
//   rows...
// The two trailing columns are written iff `with_noise_columns`.

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_dataset_csv(std::ostream& os, const LabeledDataset& ds, bool with_noise_columns) {
  os << "K," << ds.num_classes << ",d," << ds.dim << '\n';
  for (std::size_t j = 0; j < ds.dim; ++j) os << 'x' << j << ',';
  os << "true_label";
  if (with_noise_columns) os << ",observed_label,is_corrupted";
  os << '\n';
  for (const auto& s : ds.samples) {
    for (double v : s.features) os << format_real(v) << ',';
    os << s.true_label;
    if (with_noise_columns) os << ',' << s.observed_label << ',' << (s.is_corrupted ? 1 : 0);
    os << '\n';
  }
}

inline LabeledDataset read_dataset_csv(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset csv: missing header");
  auto head = split(line);
  if (head.size() != 4 || head[0] != "K" || head[2] != "d")
    throw std::runtime_error("dataset csv: malformed header '" + line + "'");
  LabeledDataset ds;
  ds.num_classes = std::stoul(head[1]);
  ds.dim = std::stoul(head[3]);
  if (!std::getline(is, line)) throw std::runtime_error("dataset csv: missing column header");
  const auto cols = split(line);
  const bool noisy = cols.size() == ds.dim + 3;
  if (!noisy && cols.size() != ds.dim + 1)
    throw std::runtime_error("dataset csv: unexpected column count");
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != cols.size())
      throw std::runtime_error("dataset csv: wrong cell count on line " + std::to_string(lineno));
    Sample s;
    s.features.resize(ds.dim);
    for (std::size_t j = 0; j < ds.dim; ++j) s.features[j] = std::stod(cells[j]);
    s.true_label = std::stoul(cells[ds.dim]);
    s.observed_label = noisy ? std::stoul(cells[ds.dim + 1]) : s.true_label;
    s.is_corrupted = noisy ? cells[ds.dim + 2] == "1" : false;
    if (s.true_label >= ds.num_classes || s.observed_label >= ds.num_classes)
      throw std::runtime_error("dataset csv: label out of range on line " + std::to_string(lineno));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mwnet
