#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "rsep/airspace.hpp"
#include "rsep/rng.hpp"

namespace rsep {

inline constexpr int kStateCols = 6;

enum StateColumn : int { kColX = 0, kColY, kColHeading, kColSpeed, kColDistToGo, kColPrevCommand };

/// (1+m) x 6 traffic picture seen from one ownship. Row 0 is the ownship;
/// rows 1..m are intruders in absolute coordinates, valid where mask is set.
struct StateMatrix {
  Eigen::MatrixXd values;
  std::vector<bool> mask;

  StateMatrix() = default;
  explicit StateMatrix(int max_intruders)
      : values(Eigen::MatrixXd::Zero(1 + max_intruders, kStateCols)), mask(static_cast<std::size_t>(max_intruders)) {}

  int max_intruders() const { return static_cast<int>(mask.size()); }
  bool row_valid(int row) const { return row == 0 || mask[static_cast<std::size_t>(row - 1)]; }
  int valid_intruders() const {
    int n = 0;
    for (bool b : mask) n += b ? 1 : 0;
    return n;
  }
};

inline void set_row(StateMatrix& s, int row, const AircraftState& a) {
  s.values.row(row) << a.x, a.y, a.heading, a.speed, a.dist_to_go, a.prev_command;
}

/// Nearest `max_intruders` aircraft within `detection_radius` (closed ball),
/// sorted by distance; unused rows are zero and masked out.
inline StateMatrix assemble_state(const TrafficState& traffic, int ownship_id, double detection_radius,
                                  int max_intruders) {
  const Aircraft* own = traffic.find(ownship_id);
  if (!own) throw std::out_of_range("assemble_state: unknown aircraft id " + std::to_string(ownship_id));
  StateMatrix s(max_intruders);
  set_row(s, 0, own->state);
  const auto near = nearest_intruders(traffic, ownship_id, detection_radius, max_intruders);
  for (std::size_t k = 0; k < near.size(); ++k) {
    set_row(s, static_cast<int>(k) + 1, traffic.aircraft[near[k].second].state);
    s.mask[k] = true;
  }
  return s;
}

/// Intruder distances read back from a state matrix, in row order.
inline std::vector<double> intruder_distances(const StateMatrix& s) {
  std::vector<double> d;
  for (int r = 1; r <= s.max_intruders(); ++r)
    if (s.row_valid(r))
      d.push_back(std::hypot(s.values(r, kColX) - s.values(0, kColX), s.values(r, kColY) - s.values(0, kColY)));
  return d;
}

/// Element-wise corruption radius kappa, one row per state-matrix row.
struct CorruptionBounds {
  Eigen::MatrixXd kappa;

  static CorruptionBounds uniform_rows(int max_intruders, const std::array<double, kStateCols>& per_column) {
    for (double k : per_column)
      if (!(k >= 0.0)) throw std::invalid_argument("CorruptionBounds: kappa must be nonnegative");
    CorruptionBounds b;
    b.kappa.resize(1 + max_intruders, kStateCols);
    for (int c = 0; c < kStateCols; ++c) b.kappa.col(c).setConstant(per_column[static_cast<std::size_t>(c)]);
    return b;
  }

  static std::array<double, kStateCols> default_columns() {
    return {60.0, 60.0, 5.0 * std::numbers::pi / 180.0, 2.0, 60.0, 0.0};
  }

  static CorruptionBounds defaults(int max_intruders = 5) { return uniform_rows(max_intruders, default_columns()); }
};

/// Signed offset of `value` from `center`; headings use the wrapped difference.
inline double column_offset(int col, double value, double center) {
  return col == kColHeading ? wrap_angle(value - center) : value - center;
}

/// center + delta, nudged toward center until it lies within `bound` of it
/// under the same arithmetic the membership test uses.
inline double offset_within(int col, double center, double delta, double bound) {
  auto place = [&](double d) { return col == kColHeading ? wrap_angle(center + d) : center + d; };
  double step = std::numeric_limits<double>::epsilon() * (std::abs(center) + std::abs(delta));
  for (int it = 0; it < 64; ++it, step *= 2.0) {
    const double v = place(delta);
    if (std::abs(column_offset(col, v, center)) <= bound) return v;
    delta -= std::copysign(std::min(step, std::abs(delta)), delta);
  }
  return center;
}

/// |candidate - center| <= kappa on every valid row (exact comparison).
inline bool in_uncertainty_set(const StateMatrix& candidate, const StateMatrix& center, const CorruptionBounds& b) {
  if (candidate.values.rows() != center.values.rows() || candidate.values.cols() != kStateCols) return false;
  for (int r = 0; r < center.values.rows(); ++r) {
    if (!center.row_valid(r)) continue;
    for (int c = 0; c < kStateCols; ++c)
      if (!(std::abs(column_offset(c, candidate.values(r, c), center.values(r, c))) <= b.kappa(r, c))) return false;
  }
  return true;
}

/// Element-wise clamp of candidate into [center - kappa, center + kappa].
/// Masked rows pass through unchanged.
inline StateMatrix project_to_box(const StateMatrix& candidate, const StateMatrix& center, const CorruptionBounds& b) {
  StateMatrix out = candidate;
  for (int r = 0; r < center.values.rows(); ++r) {
    if (!center.row_valid(r)) continue;
    for (int c = 0; c < kStateCols; ++c) {
      const double k = b.kappa(r, c);
      const double off = column_offset(c, candidate.values(r, c), center.values(r, c));
      if (std::abs(off) <= k) continue;
      out.values(r, c) = offset_within(c, center.values(r, c), std::clamp(off, -k, k), k);
    }
  }
  return out;
}

struct ObservationSample {
  StateMatrix observed;
  bool corrupted = false;
  StateMatrix true_state;
};

/// One Bernoulli(R) draw deciding whether the next observation is replaced.
template <class Urbg>
bool draw_corruption(double rate, Urbg& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("corruption rate must lie in [0, 1)");
  return uniform01(rng) < rate;
}

/// R-contamination kernel: the true state with probability 1 - R, the
/// adversarial state with probability R.
template <class Urbg>
ObservationSample sample_observation(const StateMatrix& true_next, double rate, const StateMatrix& adversarial,
                                     const CorruptionBounds& bounds, Urbg& rng) {
  if (!in_uncertainty_set(adversarial, true_next, bounds))
    throw std::invalid_argument("sample_observation: adversarial state outside the uncertainty set");
  const bool corrupt = draw_corruption(rate, rng);
  return ObservationSample{corrupt ? adversarial : true_next, corrupt, true_next};
}

/// Per-column affine feature scaling, (value - offset) / scale.
struct Normalizer {
  std::array<double, kStateCols> offset{2500.0, 4000.0, 0.0, 20.0, 5000.0, 0.0};
  std::array<double, kStateCols> scale{2500.0, 4000.0, std::numbers::pi, 10.0, 5000.0, kSpeedStep};

  static Normalizer identity() {
    Normalizer n;
    n.offset.fill(0.0);
    n.scale.fill(1.0);
    return n;
  }

  void validate() const {
    for (double s : scale)
      if (s == 0.0 || !std::isfinite(s)) throw std::invalid_argument("Normalizer: zero or non-finite scale");
  }

  /// Masked rows come out as zeros.
  StateMatrix normalize(const StateMatrix& s) const {
    validate();
    StateMatrix out = s;
    for (int r = 0; r < s.values.rows(); ++r) {
      if (!s.row_valid(r)) {
        out.values.row(r).setZero();
        continue;
      }
      for (int c = 0; c < kStateCols; ++c)
        out.values(r, c) = (s.values(r, c) - offset[static_cast<std::size_t>(c)]) / scale[static_cast<std::size_t>(c)];
    }
    return out;
  }

  StateMatrix denormalize(const StateMatrix& s) const {
    validate();
    StateMatrix out = s;
    for (int r = 0; r < s.values.rows(); ++r) {
      if (!s.row_valid(r)) {
        out.values.row(r).setZero();
        continue;
      }
      for (int c = 0; c < kStateCols; ++c)
        out.values(r, c) = s.values(r, c) * scale[static_cast<std::size_t>(c)] + offset[static_cast<std::size_t>(c)];
    }
    return out;
  }

  /// Chain rule dV/dS = dV/dS_hat / scale; masked rows zeroed.
  Eigen::MatrixXd to_physical_gradient(const Eigen::MatrixXd& normalized_grad, const StateMatrix& s) const {
    Eigen::MatrixXd g = normalized_grad;
    for (int r = 0; r < g.rows(); ++r) {
      if (!s.row_valid(r)) {
        g.row(r).setZero();
        continue;
      }
      for (int c = 0; c < kStateCols; ++c) g(r, c) /= scale[static_cast<std::size_t>(c)];
    }
    return g;
  }
};

inline StateMatrix normalize_features(const StateMatrix& s, const Normalizer& n) { return n.normalize(s); }

}  // namespace rsep
