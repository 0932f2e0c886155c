#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mwnet/numkit.hpp"

namespace mwnet {

/// A probability vector on the (K-1)-simplex. Stored as a plain Vec; use
/// is_prob_vec to validate values of unknown origin.
using ProbVec = Vec;

enum class LossKind { CE, MAE };

inline std::string_view to_string(LossKind k) { return k == LossKind::CE ? "ce" : "mae"; }

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "ce" || s == "CE") return LossKind::CE;
  if (s == "mae" || s == "MAE") return LossKind::MAE;
  throw std::invalid_argument("unknown loss kind '" + std::string(s) + "'");
}

inline constexpr double kProbFloor = 1e-12;

inline bool is_prob_vec(std::span<const double> u, double tol = 1e-9) {
  double s = 0.0;
  for (double p : u) {
    if (!(p >= 0.0 && p <= 1.0)) return false;
    s += p;
  }
  return !u.empty() && std::abs(s - 1.0) <= tol;
}

/// Numerically stable softmax (max-shifted).
inline ProbVec softmax(std::span<const double> z) {
  ProbVec u(z.begin(), z.end());
  if (u.empty()) return u;
  const double mx = *std::max_element(u.begin(), u.end());
  double s = 0.0;
  for (double& v : u) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : u) v /= s;
  return u;
}

namespace detail {
inline void check_label(std::size_t label, std::size_t k) {
  if (label >= k) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(k) + " classes");
  }
}
}  // namespace detail

inline double ce_loss(std::size_t label, std::span<const double> u) {
  detail::check_label(label, u.size());
  return -std::log(std::max(u[label], kProbFloor));
}

/// Sum of absolute deviations from the one-hot target; 2(1 - u[label]) on the simplex.
inline double mae_loss(std::size_t label, std::span<const double> u) {
  detail::check_label(label, u.size());
  double s = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) s += std::abs(u[k] - (k == label ? 1.0 : 0.0));
  return s;
}

inline double loss_value(LossKind kind, std::size_t label, std::span<const double> u) {
  return kind == LossKind::CE ? ce_loss(label, u) : mae_loss(label, u);
}

/// Sum of the loss over every possible label. Constant (2K-2) for MAE.
inline double symmetry_sum(LossKind kind, std::span<const double> u) {
  double s = 0.0;
  for (std::size_t c = 0; c < u.size(); ++c) s += loss_value(kind, c, u);
  return s;
}

/// Gradient of loss(label, softmax(z)) with respect to the logits z, given u = softmax(z).
inline Vec loss_grad_from_probs(LossKind kind, std::size_t label, std::span<const double> u) {
  detail::check_label(label, u.size());
  Vec g(u.begin(), u.end());
  if (kind == LossKind::CE) {
    // Below the clamp the loss is constant in u[label].
    if (u[label] < kProbFloor) {
      std::fill(g.begin(), g.end(), 0.0);
      return g;
    }
    g[label] -= 1.0;
  } else {
    // d/dz_k [2(1 - u_y)] = 2 u_y (u_k - [k == y])
    const double s = 2.0 * u[label];
    for (double& v : g) v *= s;
    g[label] -= s;
  }
  return g;
}

inline Vec loss_grad_logits(LossKind kind, std::size_t label, std::span<const double> z) {
  return loss_grad_from_probs(kind, label, softmax(z));
}

}  // namespace mwnet
