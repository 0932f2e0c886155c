#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace mwnet {

inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Probability that a random clean sample scores above a random corrupted one,
/// ties counted as one half. Mann-Whitney U over mid-ranks, O(n log n).
inline double auc_noisy_detection(std::span<const double> scores, const std::vector<bool>& is_corrupted) {
  if (scores.size() != is_corrupted.size()) throw std::invalid_argument("auc: length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_corrupt = 0;
  for (bool b : is_corrupted) n_corrupt += b;
  const std::size_t n_clean = n - n_corrupt;
  if (n_clean == 0 || n_corrupt == 0)
    throw std::invalid_argument("auc: need at least one clean and one corrupted sample");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_clean = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (!is_corrupted[order[k]]) rank_sum_clean += mid_rank;
    i = j + 1;
  }
  const double nc = static_cast<double>(n_clean);
  const double u = rank_sum_clean - nc * (nc + 1.0) / 2.0;
  return u / (nc * static_cast<double>(n_corrupt));
}

/// Linear interpolation between order statistics (h = q (n - 1)).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct SubsetStats {
  std::size_t count = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  // q10, q25, q50, q75, q90
  double quantiles[5] = {};
};

inline constexpr double kSummaryQuantiles[5] = {0.10, 0.25, 0.50, 0.75, 0.90};

struct WeightSummary {
  SubsetStats clean;
  SubsetStats corrupt;
  double gap = std::numeric_limits<double>::quiet_NaN();  // clean.mean - corrupt.mean
};

inline SubsetStats subset_stats(std::vector<double> values) {
  SubsetStats s;
  s.count = values.size();
  if (values.empty()) {
    for (double& q : s.quantiles) q = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  for (std::size_t i = 0; i < 5; ++i) s.quantiles[i] = quantile_sorted(values, kSummaryQuantiles[i]);
  return s;
}

inline WeightSummary weight_summary(std::span<const double> weights, const std::vector<bool>& is_corrupted) {
  if (weights.empty()) throw std::invalid_argument("weight_summary: empty input");
  if (weights.size() != is_corrupted.size()) throw std::invalid_argument("weight_summary: length mismatch");
  std::vector<double> clean, corrupt;
  for (std::size_t i = 0; i < weights.size(); ++i) (is_corrupted[i] ? corrupt : clean).push_back(weights[i]);
  WeightSummary w;
  w.clean = subset_stats(std::move(clean));
  w.corrupt = subset_stats(std::move(corrupt));
  w.gap = w.clean.mean - w.corrupt.mean;
  return w;
}

}  // namespace mwnet
