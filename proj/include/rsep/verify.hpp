#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rsep/adversary.hpp"
#include "rsep/bounds_lab.hpp"
#include "rsep/diffnet.hpp"
#include "rsep/evaluation.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"

namespace rsep {

struct VerifyOptions {
  int trials = 1000;           // linear, quadratic and toy-MDP performance trials
  int network_trials = 200;    // small-network remainder trials
  int contamination_trials = 200;
  std::vector<double> contamination_rates{0.25, 0.5, 0.9};
  int rollouts = 100000;
  std::uint64_t seed = 20240601;
  double rhs_scale = 1.0;      // < 1 injects a deliberately wrong bound (checker self-test)

  static VerifyOptions quick(int trials = 10) {
    VerifyOptions o;
    o.trials = trials;
    o.network_trials = trials;
    o.contamination_trials = std::max(1, trials / 2);
    o.rollouts = 2000;
    return o;
  }
};

namespace detail {

inline void finish(BoundCheckRecord& r, const VerifyOptions& o) {
  r.rhs *= o.rhs_scale;
  r.settle();
}

/// A plausible ownship row and up to `intruders` nearby rows, with
/// headings kept at least `heading_margin` away from the wrap point.
template <class Urbg>
StateMatrix random_encounter(int max_intruders, int intruders, double heading_margin, Urbg& rng) {
  std::uniform_real_distribution<double> ux(0.0, 5000.0), uy(0.0, 8000.0),
      uh(-std::numbers::pi + heading_margin, std::numbers::pi - heading_margin), uv(7.5, 36.0), ud(0.0, 10000.0),
      ur(50.0, 480.0), ua(-std::numbers::pi, std::numbers::pi);
  std::uniform_int_distribution<int> cmd(0, 2);
  StateMatrix s(max_intruders);
  auto row = [&](int r, double x, double y) {
    set_row(s, r, AircraftState{x, y, uh(rng), uv(rng), ud(rng), command_mps(cmd(rng))});
  };
  const double x0 = ux(rng), y0 = uy(rng);
  row(0, x0, y0);
  for (int k = 1; k <= intruders; ++k) {
    const double d = ur(rng), a = ua(rng);
    row(k, x0 + d * std::cos(a), y0 + d * std::sin(a));
    s.mask[static_cast<std::size_t>(k - 1)] = true;
  }
  return s;
}

}  // namespace detail

/// Linear value functions (in normalized units): the closed-form adversary
/// must attain the exhaustive box minimum.
inline std::vector<BoundCheckRecord> suite_fo_exact(const VerifyOptions& o) {
  Rng rng = make_rng(o.seed, {kTrialStream, 1});
  const Normalizer norm = Normalizer{};
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<BoundCheckRecord> out;
  for (int t = 0; t < o.trials; ++t) {
    const int intruders = t % 2;
    const StateMatrix s = detail::random_encounter(1, intruders, 0.6, rng);
    const std::array<double, kStateCols> kmax{120.0, 120.0, 0.5, 4.0, 120.0, 2.0 * kSpeedStep};
    CorruptionBounds b = CorruptionBounds::uniform_rows(1, {});
    for (int r = 0; r < b.kappa.rows(); ++r)
      for (int c = 0; c < kStateCols; ++c)
        b.kappa(r, c) = u01(rng) < 0.15 ? 0.0 : kmax[static_cast<std::size_t>(c)] * u01(rng);
    Eigen::MatrixXd G(b.kappa.rows(), kStateCols);
    for (int r = 0; r < G.rows(); ++r)
      for (int c = 0; c < kStateCols; ++c)
        G(r, c) = u01(rng) < 0.1 ? 0.0 : n01(rng) / norm.scale[static_cast<std::size_t>(c)];
    const double c0 = n01(rng);
    auto V = [&](const StateMatrix& x) {
      double v = c0;
      for (int r = 0; r < x.values.rows(); ++r)
        if (x.row_valid(r))
          for (int c = 0; c < kStateCols; ++c) v += G(r, c) * x.values(r, c);
      return v;
    };
    const ActiveCoordinates ac(s, b);
    const auto fo = fo_perturbation(s, G, b);
    OracleOptions opt;
    opt.exhaustive_max_dims = 6;
    opt.refine_steps = 0;
    const auto oracle = brute_force_worst_case([&](const Eigen::VectorXd& x) { return V(ac.embed(s, x)); },
                                               ac.center, ac.radius, opt);
    BoundCheckRecord r;
    r.suite = "fo_exact";
    r.trial = t;
    r.lhs = std::abs(V(fo.perturbed) - oracle.min_value);
    r.rhs = 0.0;
    r.tolerance = 1e-12;
    r.pass = r.lhs < 1e-12 && in_uncertainty_set(fo.perturbed, s, b);
    out.push_back(r);
  }
  return out;
}

/// Quadratic value functions with exact gradient Lipschitz constant
/// (spectral norm of the Hessian).
inline std::vector<BoundCheckRecord> suite_remainder_quadratic(const VerifyOptions& o) {
  Rng rng = make_rng(o.seed, {kTrialStream, 2});
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> urad(0.01, 1.0);
  std::uniform_int_distribution<int> udim(1, 6);
  std::vector<BoundCheckRecord> out;
  for (int t = 0; t < o.trials; ++t) {
    const int k = udim(rng);
    Eigen::VectorXd center(k), radius(k), g(k);
    for (int i = 0; i < k; ++i) {
      center(i) = n01(rng);
      radius(i) = urad(rng);
      g(i) = n01(rng);
    }
    Eigen::MatrixXd A(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) A(i, j) = n01(rng);
    const Eigen::MatrixXd H = 0.5 * (A + A.transpose());
    const double L = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H).eigenvalues().cwiseAbs().maxCoeff();
    const double c0 = n01(rng);
    auto V = [&](const Eigen::VectorXd& x) {
      const Eigen::VectorXd d = x - center;
      return c0 + g.dot(d) + 0.5 * d.dot(H * d);
    };
    auto dV = [&](const Eigen::VectorXd& x) { return (g + H * (x - center)).eval(); };
    const BoundReport rep = remainder_bound_check(V, dV, center, radius, L);
    BoundCheckRecord r;
    r.suite = "remainder_quadratic";
    r.trial = t;
    r.lhs = rep.gap;
    r.rhs = rep.bound;
    r.lipschitz = L;
    detail::finish(r, o);
    out.push_back(r);
  }
  return out;
}

/// Small random critics around random encounters (ownship plus one
/// intruder, ten active coordinates). L_V is sampled and inflated by 1.5.
inline std::vector<BoundCheckRecord> suite_remainder_network(const VerifyOptions& o) {
  Rng rng = make_rng(o.seed, {kTrialStream, 3});
  NetConfig cfg;
  cfg.max_intruders = 1;
  cfg.enc_width = 8;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.trunk_width = 8;
  const Normalizer norm = Normalizer{};
  const CorruptionBounds b = CorruptionBounds::uniform_rows(1, CorruptionBounds::default_columns());
  std::vector<BoundCheckRecord> out;
  for (int t = 0; t < o.network_trials; ++t) {
    PolicyNet net{NetParams::initialized(cfg, rng), norm};
    // Give the critic head full-size weights so the value is visibly curved.
    net.params.block(kValW1) *= 10.0;
    const StateMatrix s = detail::random_encounter(1, 1, 0.3, rng);
    const NetworkValueModel model(net, s, b);
    auto V = [&](const Eigen::VectorXd& x) { return model.value(x); };
    auto dV = [&](const Eigen::VectorXd& x) { return model.gradient(x); };
    const auto& ac = model.coords();
    const Eigen::VectorXd g0 = dV(ac.center);
    Eigen::VectorXd fo_dir(ac.center.size());
    for (Eigen::Index i = 0; i < fo_dir.size(); ++i) fo_dir(i) = -ac.radius(i) * sign0(g0(i));
    const auto oracle = brute_force_worst_case(V, dV, ac.center, ac.radius);
    const double L = estimate_lipschitz_grad(dV, ac.center, ac.radius, 200, rng,
                                             {fo_dir, oracle.argmin - ac.center, -fo_dir});
    const BoundReport rep = remainder_bound_check(V, dV, ac.center, ac.radius, 1.5 * L);
    BoundCheckRecord r;
    r.suite = "remainder_network";
    r.trial = t;
    r.lhs = rep.gap;
    r.rhs = rep.bound;
    r.lipschitz = 1.5 * L;
    detail::finish(r, o);
    out.push_back(r);
  }
  return out;
}

namespace detail {

template <class Urbg>
std::pair<PolicyTable, PolicyTable> random_policy_pair(int S, int A, int trial, Urbg& rng) {
  const PolicyTable p = random_policy(S, A, rng);
  if (trial % 2 == 0) return {p, random_policy(S, A, rng)};
  std::uniform_real_distribution<double> w(0.01, 0.5);
  return {p, perturb_policy(p, w(rng), rng)};
}

}  // namespace detail

/// The single-state hand case: Q = (+1, -1), p = (1, 0), q = (1/2, 1/2).
inline BoundCheckRecord performance_hand_case() {
  ToyMdp m;
  m.states = 1;
  m.actions = 2;
  m.gamma = 0.5;
  m.P = {Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1)};
  m.reward.resize(1, 2);
  m.reward << 0.5, -1.5;  // Q = r + 0.5 V with V = Q(0) = 1
  PolicyTable p(1, 2), q(1, 2);
  p << 1.0, 0.0;
  q << 0.5, 0.5;
  auto r = check_performance_bound(m, p, q);
  r.suite = "performance_hand";
  return r;
}

/// Random toy MDPs, exact Q; also records the Pinsker inequality per pair.
inline std::vector<BoundCheckRecord> suite_performance(const VerifyOptions& o) {
  Rng rng = make_rng(o.seed, {kTrialStream, 4});
  std::uniform_int_distribution<int> us(2, 20), ua(2, 5);
  std::uniform_real_distribution<double> ug(0.5, 0.99);
  std::vector<BoundCheckRecord> out;
  for (int t = 0; t < o.trials; ++t) {
    const ToyMdp m = random_mdp(us(rng), ua(rng), ug(rng), rng);
    const auto [p, q] = detail::random_policy_pair(m.states, m.actions, t, rng);
    auto r = check_performance_bound(m, p, q);
    r.trial = t;
    detail::finish(r, o);
    out.push_back(r);
    auto pk = check_pinsker(p, q);
    pk.trial = t;
    detail::finish(pk, o);
    out.push_back(pk);
  }
  return out;
}

/// Monte Carlo contamination gap against the discounted bound at each R.
inline std::vector<BoundCheckRecord> suite_contamination(const VerifyOptions& o) {
  Rng rng = make_rng(o.seed, {kTrialStream, 5});
  std::uniform_int_distribution<int> us(2, 20), ua(2, 5);
  std::uniform_real_distribution<double> ug(0.5, 0.9);
  std::vector<BoundCheckRecord> out;
  RobustValueOptions ro;
  ro.rollouts = o.rollouts;
  for (int t = 0; t < o.contamination_trials; ++t) {
    const ToyMdp m = random_mdp(us(rng), ua(rng), ug(rng), rng);
    const auto [p, q] = detail::random_policy_pair(m.states, m.actions, t, rng);
    for (double R : o.contamination_rates) {
      Rng mc = make_rng(o.seed, {kTrialStream, 6, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(R * 1000)});
      auto r = check_robust_value_bound(m, p, q, R, mc, ro);
      r.trial = t;
      detail::finish(r, o);
      out.push_back(r);
    }
  }
  return out;
}

struct SuiteSummary {
  int checks = 0;
  int violations = 0;
  double max_ratio = 0.0;  // max lhs / rhs over checks with rhs > 0
};

inline std::map<std::string, SuiteSummary> summarize(const std::vector<BoundCheckRecord>& recs) {
  std::map<std::string, SuiteSummary> s;
  for (const auto& r : recs) {
    auto& x = s[r.suite];
    ++x.checks;
    if (!r.pass) ++x.violations;
    if (r.rhs > 0.0) x.max_ratio = std::max(x.max_ratio, r.lhs / r.rhs);
  }
  return s;
}

inline std::vector<BoundCheckRecord> run_all_suites(const VerifyOptions& o) {
  std::vector<BoundCheckRecord> all;
  auto add = [&](std::vector<BoundCheckRecord> v) { all.insert(all.end(), v.begin(), v.end()); };
  add(suite_fo_exact(o));
  add(suite_remainder_quadratic(o));
  add(suite_remainder_network(o));
  auto hand = performance_hand_case();
  detail::finish(hand, o);
  all.push_back(hand);
  add(suite_performance(o));
  add(suite_contamination(o));
  return all;
}

inline void write_bounds_csv(std::ostream& os, const std::vector<BoundCheckRecord>& recs) {
  os << kBoundsCsvHeader << '\n';
  for (const auto& r : recs)
    os << r.suite << ',' << r.trial << ',' << detail::fmt_double(r.lhs) << ',' << detail::fmt_double(r.rhs) << ','
       << detail::fmt_double(r.B) << ',' << detail::fmt_double(r.q_max) << ',' << detail::fmt_double(r.rate) << ','
       << detail::fmt_double(r.gamma) << ',' << detail::fmt_double(r.lipschitz) << ',' << (r.pass ? 1 : 0) << '\n';
}

}  // namespace rsep
