#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rsep/diffnet.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"

namespace rsep {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct FoAdversaryOutput {
  StateMatrix perturbed;
  double predicted_drop = 0.0;  // sum kappa * |dV/dS| over valid rows
  Eigen::MatrixXd gradient;
};

/// Closed-form first-order worst case: S - kappa * sign(grad V), with
/// sign(0) = 0. Headings are wrapped; masked rows are left alone.
inline FoAdversaryOutput fo_perturbation(const StateMatrix& s, const Eigen::MatrixXd& grad,
                                         const CorruptionBounds& bounds) {
  if (grad.rows() != s.values.rows() || grad.cols() != kStateCols || bounds.kappa.rows() != s.values.rows() ||
      bounds.kappa.cols() != kStateCols)
    throw std::invalid_argument("fo_perturbation: shape mismatch");
  if (!grad.allFinite()) throw std::invalid_argument("fo_perturbation: non-finite gradient");
  FoAdversaryOutput out{s, 0.0, grad};
  for (int r = 0; r < s.values.rows(); ++r) {
    if (!s.row_valid(r)) continue;
    for (int c = 0; c < kStateCols; ++c) {
      const double k = bounds.kappa(r, c);
      if (!(k >= 0.0)) throw std::invalid_argument("fo_perturbation: negative kappa");
      const double sg = sign0(grad(r, c));
      out.predicted_drop += k * std::abs(grad(r, c));
      if (sg == 0.0 || k == 0.0) continue;
      out.perturbed.values(r, c) = offset_within(c, s.values(r, c), -k * sg, k);
    }
  }
  return out;
}

/// First-order worst-case value V - ||kappa (.) grad||_1.
inline double fo_value_drop(double value, const Eigen::MatrixXd& grad, const Eigen::MatrixXd& kappa) {
  if (grad.rows() != kappa.rows() || grad.cols() != kappa.cols())
    throw std::invalid_argument("fo_value_drop: shape mismatch");
  return value - (kappa.array() * grad.array().abs()).sum();
}

/// The perturbable coordinates of a state matrix: valid rows with kappa > 0.
struct ActiveCoordinates {
  std::vector<std::pair<int, int>> cells;
  Eigen::VectorXd center;
  Eigen::VectorXd radius;

  ActiveCoordinates(const StateMatrix& s, const CorruptionBounds& b) {
    for (int r = 0; r < s.values.rows(); ++r)
      if (s.row_valid(r))
        for (int c = 0; c < kStateCols; ++c)
          if (b.kappa(r, c) > 0.0) cells.emplace_back(r, c);
    center.resize(static_cast<Eigen::Index>(cells.size()));
    radius.resize(center.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      center(static_cast<Eigen::Index>(i)) = s.values(cells[i].first, cells[i].second);
      radius(static_cast<Eigen::Index>(i)) = b.kappa(cells[i].first, cells[i].second);
    }
  }

  StateMatrix embed(const StateMatrix& base, const Eigen::VectorXd& x) const {
    StateMatrix out = base;
    for (std::size_t i = 0; i < cells.size(); ++i)
      out.values(cells[i].first, cells[i].second) = x(static_cast<Eigen::Index>(i));
    return out;
  }

  Eigen::VectorXd extract(const Eigen::MatrixXd& m) const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) v(static_cast<Eigen::Index>(i)) = m(cells[i].first, cells[i].second);
    return v;
  }
};

struct OracleOptions {
  int grid_per_dim = 5;
  int exhaustive_max_dims = 8;
  int corner_max_dims = 20;
  int refine_steps = 100;
  bool allow_fallback = true;
};

struct OracleResult {
  double min_value = 0.0;
  Eigen::VectorXd argmin;
};

/// Brute-force minimum of `value` over the box |x - center| <= radius.
/// Up to `exhaustive_max_dims` dimensions the full grid is scanned;
/// beyond that every corner is scanned and the best corner refined by
/// projected sign-gradient descent (needs `grad`). The returned minimum is
/// attained at a feasible point, so it never undercuts the true minimum.
template <class ValueFn, class GradFn>
OracleResult brute_force_worst_case(ValueFn&& value, GradFn&& grad, const Eigen::VectorXd& center,
                                    const Eigen::VectorXd& radius, const OracleOptions& opt = {}) {
  const int k = static_cast<int>(center.size());
  OracleResult best{value(center), center};
  auto consider = [&](const Eigen::VectorXd& x) {
    const double v = value(x);
    if (v < best.min_value) best = {v, x};
  };

  if (k <= opt.exhaustive_max_dims) {
    const int g = std::max(opt.grid_per_dim, 2);
    std::vector<int> digit(static_cast<std::size_t>(k), 0);
    Eigen::VectorXd x(k);
    while (true) {
      for (int i = 0; i < k; ++i)
        x(i) = center(i) + radius(i) * (-1.0 + 2.0 * digit[static_cast<std::size_t>(i)] / (g - 1));
      consider(x);
      int i = 0;
      while (i < k && ++digit[static_cast<std::size_t>(i)] == g) digit[static_cast<std::size_t>(i++)] = 0;
      if (i == k) break;
    }
    return best;
  }
  if (!opt.allow_fallback || k > opt.corner_max_dims)
    throw std::runtime_error("brute_force_worst_case: " + std::to_string(k) + " active dimensions exceed the budget");

  Eigen::VectorXd x(k);
  for (std::uint64_t mask = 0; mask < (1ULL << k); ++mask) {
    for (int i = 0; i < k; ++i) x(i) = center(i) + ((mask >> i) & 1ULL ? radius(i) : -radius(i));
    consider(x);
  }
  // First-order corner, including zero offsets where the gradient vanishes.
  const Eigen::VectorXd g0 = grad(center);
  for (int i = 0; i < k; ++i) x(i) = center(i) - radius(i) * sign0(g0(i));
  consider(x);

  Eigen::VectorXd z = best.argmin;
  for (int step = 0; step < opt.refine_steps; ++step) {
    const Eigen::VectorXd g = grad(z);
    for (int i = 0; i < k; ++i)
      z(i) = std::clamp(z(i) - 0.05 * radius(i) * sign0(g(i)), center(i) - radius(i), center(i) + radius(i));
    consider(z);
  }
  return best;
}

template <class ValueFn>
OracleResult brute_force_worst_case(ValueFn&& value, const Eigen::VectorXd& center, const Eigen::VectorXd& radius,
                                    const OracleOptions& opt = {}) {
  OracleOptions o = opt;
  if (center.size() > o.exhaustive_max_dims) o.refine_steps = 0;
  return brute_force_worst_case(
      value, [&](const Eigen::VectorXd& x) { return Eigen::VectorXd::Zero(x.size()).eval(); }, center, radius, o);
}

/// Sampled estimate of the gradient Lipschitz constant over the box:
/// max ||g(x) - g(y)|| / ||x - y|| over random pairs, plus pairs anchored at
/// the center along the segments toward `directions` (box offsets). This
/// is a lower estimate of the true local constant.
template <class GradFn, class Urbg>
double estimate_lipschitz_grad(GradFn&& grad, const Eigen::VectorXd& center, const Eigen::VectorXd& radius,
                               int samples, Urbg& rng, const std::vector<Eigen::VectorXd>& directions = {},
                               int segment_points = 32) {
  if (samples < 2) throw std::invalid_argument("estimate_lipschitz_grad: need at least two samples");
  const Eigen::Index k = center.size();
  if (k == 0) return 0.0;
  double best = 0.0;
  auto ratio = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& gx, const Eigen::VectorXd& y,
                   const Eigen::VectorXd& gy) {
    const double dx = (x - y).norm();
    if (dx == 0.0) return;
    best = std::max(best, (gx - gy).norm() / dx);
  };
  const Eigen::VectorXd g_center = grad(center);
  Eigen::VectorXd prev, g_prev;
  for (int s = 0; s < samples; ++s) {
    Eigen::VectorXd x(k);
    for (Eigen::Index i = 0; i < k; ++i) x(i) = center(i) + radius(i) * (2.0 * uniform01(rng) - 1.0);
    const Eigen::VectorXd gx = grad(x);
    ratio(x, gx, center, g_center);
    if (s > 0) ratio(x, gx, prev, g_prev);
    prev = x;
    g_prev = gx;
  }
  for (const auto& d : directions) {
    for (int j = 1; j <= segment_points; ++j) {
      const double t = std::pow(2.0, -static_cast<double>(segment_points - j) / 4.0);
      const Eigen::VectorXd x = center + t * d;
      ratio(x, grad(x), center, g_center);
    }
  }
  return best;
}

struct BoundReport {
  double oracle_min = 0.0;
  double fo_estimate = 0.0;
  double gap = 0.0;
  double bound = 0.0;
  double lipschitz = 0.0;
  bool lipschitz_sampled = false;
  bool pass = false;
};

inline constexpr double kBoundSlack = 1e-9;

/// Certifies |min_Omega V - (V(S) - ||kappa (.) grad||_1)| <= (L_V/2)||kappa||^2
/// against the brute-force oracle.
template <class ValueFn, class GradFn>
BoundReport remainder_bound_check(ValueFn&& value, GradFn&& grad, const Eigen::VectorXd& center,
                                  const Eigen::VectorXd& radius, double lipschitz, const OracleOptions& opt = {}) {
  BoundReport rep;
  const double v0 = value(center);
  const Eigen::VectorXd g0 = grad(center);
  rep.fo_estimate = v0 - (radius.array() * g0.array().abs()).sum();
  rep.oracle_min = brute_force_worst_case(value, grad, center, radius, opt).min_value;
  rep.gap = std::abs(rep.oracle_min - rep.fo_estimate);
  rep.lipschitz = lipschitz;
  rep.bound = 0.5 * lipschitz * radius.squaredNorm();
  rep.pass = rep.gap <= rep.bound + kBoundSlack;
  return rep;
}

/// Value and physical-unit gradient of a network's critic restricted to the
/// active coordinates of one state matrix.
class NetworkValueModel {
 public:
  NetworkValueModel(const PolicyNet& net, StateMatrix base, const CorruptionBounds& bounds)
      : net_(net), base_(std::move(base)), coords_(base_, bounds) {}

  const ActiveCoordinates& coords() const { return coords_; }
  double value(const Eigen::VectorXd& x) const { return input_gradient(net_, coords_.embed(base_, x)).value; }
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const {
    return coords_.extract(input_gradient(net_, coords_.embed(base_, x)).gradient);
  }

 private:
  const PolicyNet& net_;
  StateMatrix base_;
  ActiveCoordinates coords_;
};

/// Teacher-driven adversarial observations for a batch of true states.
inline std::vector<FoAdversaryOutput> fo_adversarial_batch(const PolicyNet& critic, std::span<const StateMatrix> states,
                                                           const CorruptionBounds& bounds) {
  const auto vg = input_gradients(critic, states);
  std::vector<FoAdversaryOutput> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) out.push_back(fo_perturbation(states[i], vg[i].gradient, bounds));
  return out;
}

}  // namespace rsep
