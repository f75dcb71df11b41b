#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsep/airspace.hpp"
#include "rsep/diffnet.hpp"
#include "rsep/distributions.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"

namespace rsep {

/// Finite MDP with explicit transitions. `P[a](s, s')` is the probability of
/// moving from s to s' under action a; `reward(s, a)` the expected reward.
struct ToyMdp {
  int states = 0;
  int actions = 0;
  double gamma = 0.9;
  std::vector<Eigen::MatrixXd> P;
  Eigen::MatrixXd reward;

  void validate() const {
    if (states < 1 || states > 20 || actions < 1 || actions > 5)
      throw std::invalid_argument("ToyMdp: needs 1..20 states and 1..5 actions");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("ToyMdp: gamma must lie in [0, 1)");
    if (static_cast<int>(P.size()) != actions || reward.rows() != states || reward.cols() != actions)
      throw std::invalid_argument("ToyMdp: shape mismatch");
    for (const auto& m : P) {
      if (m.rows() != states || m.cols() != states || (m.array() < 0.0).any())
        throw std::invalid_argument("ToyMdp: bad transition matrix");
      for (int s = 0; s < states; ++s)
        if (std::abs(m.row(s).sum() - 1.0) > 1e-12) throw std::invalid_argument("ToyMdp: transition row does not sum to 1");
    }
  }
};

/// Stochastic policy table, one probability row per state.
using PolicyTable = Eigen::MatrixXd;

template <class Urbg>
Eigen::VectorXd dirichlet_ones(int n, Urbg& rng) {
  std::exponential_distribution<double> e(1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = e(rng);
  return v / v.sum();
}

template <class Urbg>
ToyMdp random_mdp(int states, int actions, double gamma, Urbg& rng) {
  ToyMdp m;
  m.states = states;
  m.actions = actions;
  m.gamma = gamma;
  for (int a = 0; a < actions; ++a) {
    Eigen::MatrixXd t(states, states);
    for (int s = 0; s < states; ++s) t.row(s) = dirichlet_ones(states, rng).transpose();
    m.P.push_back(std::move(t));
  }
  std::uniform_real_distribution<double> r(-1.0, 1.0);
  m.reward = Eigen::MatrixXd::NullaryExpr(states, actions, [&] { return r(rng); });
  m.validate();
  return m;
}

template <class Urbg>
PolicyTable random_policy(int states, int actions, Urbg& rng) {
  PolicyTable p(states, actions);
  for (int s = 0; s < states; ++s) p.row(s) = dirichlet_ones(actions, rng).transpose();
  return p;
}

/// Mixes each row toward a fresh Dirichlet draw: (1 - w) p + w d.
template <class Urbg>
PolicyTable perturb_policy(const PolicyTable& p, double weight, Urbg& rng) {
  PolicyTable q = p;
  for (int s = 0; s < p.rows(); ++s) q.row(s) = (1.0 - weight) * p.row(s) + weight * dirichlet_ones(static_cast<int>(p.cols()), rng).transpose();
  return q;
}

struct PolicyValues {
  Eigen::VectorXd V;
  Eigen::MatrixXd Q;
};

/// Solves (I - gamma P_pi) V = r_pi directly; Q by one-step backup.
inline PolicyValues exact_policy_eval(const ToyMdp& m, const PolicyTable& pi) {
  if (!(m.gamma < 1.0)) throw std::invalid_argument("exact_policy_eval: gamma must be below 1");
  if (pi.rows() != m.states || pi.cols() != m.actions) throw std::invalid_argument("exact_policy_eval: policy shape");
  Eigen::MatrixXd Ppi = Eigen::MatrixXd::Zero(m.states, m.states);
  Eigen::VectorXd rpi = Eigen::VectorXd::Zero(m.states);
  for (int a = 0; a < m.actions; ++a) {
    Ppi += pi.col(a).asDiagonal() * m.P[static_cast<std::size_t>(a)];
    rpi += pi.col(a).cwiseProduct(m.reward.col(a));
  }
  const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(m.states, m.states) - m.gamma * Ppi;
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  if (!lu.isInvertible()) throw std::logic_error("exact_policy_eval: singular system");
  PolicyValues out;
  out.V = lu.solve(rpi);
  out.Q.resize(m.states, m.actions);
  for (int a = 0; a < m.actions; ++a) out.Q.col(a) = m.reward.col(a) + m.gamma * m.P[static_cast<std::size_t>(a)] * out.V;
  return out;
}

/// max_s |V(s) - sum_a pi(a|s) Q(s,a)|.
inline double bellman_residual(const PolicyValues& v, const PolicyTable& pi) {
  return (v.V - pi.cwiseProduct(v.Q).rowwise().sum()).cwiseAbs().maxCoeff();
}

/// KL(p || q) without flooring; +inf when q misses mass that p has.
inline double kl_exact(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    s += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, s);
}

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

inline constexpr double kRecordSlack = 1e-9;

struct BoundCheckRecord {
  std::string suite;
  int trial = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  double B = 0.0;
  double q_max = 0.0;
  double rate = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  double lipschitz = std::numeric_limits<double>::quiet_NaN();
  double tolerance = kRecordSlack;  // lhs may exceed rhs by this much
  bool pass = false;

  void settle() { pass = lhs <= rhs + tolerance; }
};

inline constexpr const char* kBoundsCsvHeader = "suite,trial,lhs,rhs,B,Q_max,R,gamma,L_V,pass";

namespace detail {

inline double row_kl(const PolicyTable& p, const PolicyTable& q, int s) {
  const Eigen::VectorXd a = p.row(s).transpose(), b = q.row(s).transpose();
  return kl_exact({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
}

inline double mean_kl(const PolicyTable& p, const PolicyTable& q) {
  double s = 0.0;
  for (int i = 0; i < p.rows(); ++i) s += row_kl(p, q, i);
  return s / static_cast<double>(p.rows());
}

}  // namespace detail

/// mean_S |sum_u (p - q)(u|S) Q(S,u)| against Q_max sqrt(2B) for a given Q table.
inline BoundCheckRecord performance_bound_from_q(const Eigen::MatrixXd& Q, const PolicyTable& p, const PolicyTable& q) {
  if (p.rows() != Q.rows() || p.cols() != Q.cols() || q.rows() != Q.rows() || q.cols() != Q.cols())
    throw std::invalid_argument("performance bound: shape mismatch");
  BoundCheckRecord r;
  r.suite = "performance";
  r.lhs = (p - q).cwiseProduct(Q).rowwise().sum().cwiseAbs().mean();
  r.B = detail::mean_kl(p, q);
  r.q_max = Q.cwiseAbs().maxCoeff();
  r.rhs = r.q_max * std::sqrt(2.0 * r.B);
  r.settle();
  return r;
}

inline BoundCheckRecord check_performance_bound(const ToyMdp& m, const PolicyTable& p, const PolicyTable& q) {
  auto r = performance_bound_from_q(exact_policy_eval(m, p).Q, p, q);
  r.gamma = m.gamma;
  return r;
}

/// Discount steps until gamma^k drops below 1e-6.
inline int contamination_horizon(double gamma) {
  if (gamma <= 0.0) return 1;
  return static_cast<int>(std::ceil(std::log(1e-6) / std::log(gamma)));
}

struct RobustValueOptions {
  int rollouts = 100000;
  double sigma_multiplier = 3.0;
};

/// Monte Carlo E_S0[V^p(S0) - V_rob(S0)] with S0 uniform. The first action
/// is drawn from p; from the next step on each action comes from q with
/// probability R and from p otherwise. V^p is exact; only the corrupted
/// return is sampled. Tolerance is sigma_multiplier times the MC standard error.
template <class Urbg>
BoundCheckRecord check_robust_value_bound(const ToyMdp& m, const PolicyTable& p, const PolicyTable& q, double rate,
                                          Urbg& rng, const RobustValueOptions& opt = {}) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("check_robust_value_bound: R must lie in [0, 1)");
  if (opt.rollouts < 2) throw std::invalid_argument("check_robust_value_bound: need at least two rollouts");
  const PolicyValues pv = exact_policy_eval(m, p);
  const int H = contamination_horizon(m.gamma);

  // Cumulative tables for inverse-CDF sampling.
  auto cumulative = [](const Eigen::MatrixXd& rows) {
    Eigen::MatrixXd c = rows;
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      for (Eigen::Index j = 1; j < c.cols(); ++j) c(i, j) += c(i, j - 1);
      c(i, c.cols() - 1) = 1.0;
    }
    return c;
  };
  const Eigen::MatrixXd cp = cumulative(p), cq = cumulative(q);
  std::vector<Eigen::MatrixXd> cP;
  for (const auto& t : m.P) cP.push_back(cumulative(t));
  auto draw = [&](const Eigen::MatrixXd& c, Eigen::Index row) {
    const double u = uniform01(rng);
    Eigen::Index j = 0;
    while (j + 1 < c.cols() && u >= c(row, j)) ++j;
    return j;
  };

  double sum = 0.0, sum_sq = 0.0;
  std::uniform_int_distribution<int> start(0, m.states - 1);
  for (int n = 0; n < opt.rollouts; ++n) {
    Eigen::Index s = start(rng);
    double diff = pv.V(s);
    double disc = 1.0;
    for (int k = 0; k < H; ++k) {
      const bool corrupt = k > 0 && uniform01(rng) < rate;
      const Eigen::Index a = draw(corrupt ? cq : cp, s);
      diff -= disc * m.reward(s, a);
      s = draw(cP[static_cast<std::size_t>(a)], s);
      disc *= m.gamma;
    }
    sum += diff;
    sum_sq += diff * diff;
  }
  const double N = opt.rollouts;
  const double mean = sum / N;
  const double var = std::max(0.0, (sum_sq - N * mean * mean) / (N - 1.0));
  BoundCheckRecord r;
  r.suite = "contamination";
  r.lhs = mean;
  r.B = detail::mean_kl(p, q);
  r.q_max = pv.Q.cwiseAbs().maxCoeff();
  r.rate = rate;
  r.gamma = m.gamma;
  r.rhs = m.gamma * rate / (1.0 - m.gamma) * r.q_max * std::sqrt(2.0 * r.B);
  r.tolerance = opt.sigma_multiplier * std::sqrt(var / N) + kRecordSlack;
  r.settle();
  return r;
}

/// Exact value of the same quantity, for cross-checking the sampler:
/// mean_s [V^p(s) - (r_p(s) + gamma P_p V^mix(s))] with mix = (1-R) p + R q.
inline double robust_value_gap_exact(const ToyMdp& m, const PolicyTable& p, const PolicyTable& q, double rate) {
  const PolicyValues vp = exact_policy_eval(m, p);
  const PolicyValues vm = exact_policy_eval(m, (1.0 - rate) * p + rate * q);
  double s = 0.0;
  for (int st = 0; st < m.states; ++st) {
    double first = 0.0;
    for (int a = 0; a < m.actions; ++a)
      first += p(st, a) * (m.reward(st, a) + m.gamma * m.P[static_cast<std::size_t>(a)].row(st).dot(vm.V));
    s += vp.V(st) - first;
  }
  return s / m.states;
}

/// Pinsker: TV(p, q) <= sqrt(KL(p || q) / 2) for every row.
inline BoundCheckRecord check_pinsker(const PolicyTable& p, const PolicyTable& q) {
  BoundCheckRecord r;
  r.suite = "pinsker";
  double worst = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < p.rows(); ++s) {
    const Eigen::VectorXd a = p.row(s).transpose(), b = q.row(s).transpose();
    const std::span<const double> sa(a.data(), static_cast<std::size_t>(a.size())), sb(b.data(), static_cast<std::size_t>(b.size()));
    const double tv = tv_distance(sa, sb), bound = std::sqrt(kl_exact(sa, sb) / 2.0);
    if (tv - bound > worst) {
      worst = tv - bound;
      r.lhs = tv;
      r.rhs = bound;
    }
  }
  r.B = detail::mean_kl(p, q);
  r.settle();
  return r;
}

/// One-step model of a state matrix: every row flies straight for dt
/// seconds, the ownship under `command`, intruders holding speed.
inline StateMatrix propagate_state(const StateMatrix& s, double command, const SimConfig& sim) {
  StateMatrix out = s;
  for (int r = 0; r < s.values.rows(); ++r) {
    if (!s.row_valid(r)) continue;
    AircraftState a{s.values(r, kColX), s.values(r, kColY), s.values(r, kColHeading),
                    s.values(r, kColSpeed), s.values(r, kColDistToGo), s.values(r, kColPrevCommand)};
    set_row(out, r, kinematic_step(a, r == 0 ? command : 0.0, sim.wind, sim.dt, sim.limits));
  }
  return out;
}

struct ProbeReport {
  BoundCheckRecord record;  // advisory: Q_max is a critic estimate
  double decision_gap = 0.0;
  double mean_tv = 0.0;
};

/// Decision gap mean |sum_u (pi(u|S) - pi(u|Xi)) Q(S,u)| over probe pairs, with
/// Q(S,u) = r(S_u) + gamma V_critic(S_u) from a one-step straight-flight model.
inline ProbeReport policy_probe_report(const PolicyNet& policy, const PolicyNet& critic,
                                       std::span<const StateMatrix> clean, std::span<const StateMatrix> adversarial,
                                       const SimConfig& sim, double gamma) {
  if (clean.empty() || clean.size() != adversarial.size())
    throw std::invalid_argument("policy_probe_report: empty or mismatched probe");
  const auto p = evaluate(policy, clean);
  const auto q = evaluate(policy, adversarial);
  std::vector<StateMatrix> next;
  std::vector<double> rewards;
  next.reserve(clean.size() * kActionCount);
  for (const auto& s : clean)
    for (int a = 0; a < kActionCount; ++a) {
      const double u = command_mps(a, sim.reward.speed_step);
      next.push_back(propagate_state(s, u, sim));
      rewards.push_back(reward_from_distances(intruder_distances(next.back()), u, sim.reward));
    }
  const auto v = evaluate(critic, next);
  ProbeReport rep;
  double B = 0.0, qmax = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    double inner = 0.0;
    for (int a = 0; a < kActionCount; ++a) {
      const std::size_t k = i * kActionCount + static_cast<std::size_t>(a);
      const double Q = rewards[k] + gamma * v[k].value;
      qmax = std::max(qmax, std::abs(Q));
      inner += (p[i].dist.prob[static_cast<std::size_t>(a)] - q[i].dist.prob[static_cast<std::size_t>(a)]) * Q;
    }
    rep.decision_gap += std::abs(inner);
    rep.mean_tv += total_variation(p[i].dist, q[i].dist);
    B += kl(p[i].dist, q[i].dist);
  }
  const double n = static_cast<double>(clean.size());
  rep.decision_gap /= n;
  rep.mean_tv /= n;
  rep.record.suite = "policy_probe";
  rep.record.lhs = rep.decision_gap;
  rep.record.B = B / n;
  rep.record.q_max = qmax;
  rep.record.gamma = gamma;
  rep.record.rhs = qmax * std::sqrt(2.0 * rep.record.B);
  rep.record.settle();
  return rep;
}

}  // namespace rsep
