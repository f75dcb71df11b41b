#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rsep/airspace.hpp"
#include "rsep/rng.hpp"

namespace rsep {

inline constexpr int kActionCount = 3;
inline constexpr double kProbFloor = 1e-8;

/// Discrete speed commands {-dv, 0, +dv}, indexed 0..2.
enum class SpeedCommand : int { kSlow = 0, kHold = 1, kFast = 2 };

inline double command_mps(int action, double speed_step = kSpeedStep) {
  return static_cast<double>(action - 1) * speed_step;
}

/// Categorical distribution over the three speed commands.
struct ActionDistribution {
  std::array<double, kActionCount> prob{};
  std::array<double, kActionCount> log_prob{};

  template <class Vec>
  static ActionDistribution from_logits(const Vec& logits) {
    ActionDistribution d;
    double mx = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < kActionCount; ++a) mx = std::max(mx, static_cast<double>(logits[a]));
    double z = 0.0;
    for (int a = 0; a < kActionCount; ++a) z += std::exp(static_cast<double>(logits[a]) - mx);
    const double lz = std::log(z) + mx;
    for (int a = 0; a < kActionCount; ++a) {
      d.log_prob[static_cast<std::size_t>(a)] = static_cast<double>(logits[a]) - lz;
      d.prob[static_cast<std::size_t>(a)] = std::exp(d.log_prob[static_cast<std::size_t>(a)]);
    }
    return d;
  }

  static ActionDistribution from_probs(const std::array<double, kActionCount>& p) {
    ActionDistribution d;
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw std::invalid_argument("ActionDistribution: negative probability");
      s += v;
    }
    for (std::size_t a = 0; a < p.size(); ++a) {
      d.prob[a] = p[a] / s;
      d.log_prob[a] = std::log(d.prob[a]);
    }
    return d;
  }

  static ActionDistribution uniform() { return from_probs({1.0, 1.0, 1.0}); }
};

inline double log_prob(const ActionDistribution& d, int action) { return d.log_prob.at(static_cast<std::size_t>(action)); }

inline double entropy(const ActionDistribution& d) {
  double h = 0.0;
  for (std::size_t a = 0; a < d.prob.size(); ++a)
    if (d.prob[a] > 0.0) h -= d.prob[a] * d.log_prob[a];
  return h;
}

/// KL(p || q) with both sides floored at kProbFloor inside the logarithm.
inline double kl(const ActionDistribution& p, const ActionDistribution& q) {
  double s = 0.0;
  for (std::size_t a = 0; a < p.prob.size(); ++a) {
    if (p.prob[a] <= 0.0) continue;
    s += p.prob[a] * (std::log(std::max(p.prob[a], kProbFloor)) - std::log(std::max(q.prob[a], kProbFloor)));
  }
  return std::max(0.0, s);
}

template <class Urbg>
int sample(const ActionDistribution& d, Urbg& rng) {
  const double u = uniform01(rng);
  double c = 0.0;
  for (int a = 0; a < kActionCount - 1; ++a) {
    c += d.prob[static_cast<std::size_t>(a)];
    if (u < c) return a;
  }
  return kActionCount - 1;
}

inline int mode(const ActionDistribution& d) {
  return static_cast<int>(std::max_element(d.prob.begin(), d.prob.end()) - d.prob.begin());
}

/// Total variation distance, half the l1 difference.
inline double total_variation(const ActionDistribution& p, const ActionDistribution& q) {
  double s = 0.0;
  for (std::size_t a = 0; a < p.prob.size(); ++a) s += std::abs(p.prob[a] - q.prob[a]);
  return 0.5 * s;
}

}  // namespace rsep
