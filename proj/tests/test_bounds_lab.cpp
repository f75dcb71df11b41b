#include <gtest/gtest.h>

#include <cmath>

#include "rsep/bounds_lab.hpp"
#include "rsep/trainer.hpp"
#include "rsep/verify.hpp"

using namespace rsep;

namespace {

ToyMdp single_state(double r, double gamma) {
  ToyMdp m;
  m.states = 1;
  m.actions = 1;
  m.gamma = gamma;
  m.P = {Eigen::MatrixXd::Ones(1, 1)};
  m.reward = Eigen::MatrixXd::Constant(1, 1, r);
  return m;
}

std::span<const double> row_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace

TEST(PolicyEval, SingleStateGeometricSeries) {
  const auto v = exact_policy_eval(single_state(1.0, 0.5), Eigen::MatrixXd::Ones(1, 1));
  EXPECT_NEAR(v.V(0), 2.0, 1e-15);
  EXPECT_NEAR(v.Q(0, 0), 2.0, 1e-15);
}

TEST(PolicyEval, ZeroRewardsGiveZeroValues) {
  Rng rng(1);
  ToyMdp m = random_mdp(6, 3, 0.9, rng);
  m.reward.setZero();
  const auto v = exact_policy_eval(m, random_policy(6, 3, rng));
  EXPECT_TRUE(v.V.isZero(0));
  EXPECT_TRUE(v.Q.isZero(0));
}

TEST(PolicyEval, TwoStateClosedForm) {
  // One action; P = [[1-a, a], [b, 1-b]].
  const double a = 0.3, b = 0.6, g = 0.8, r1 = 1.0, r2 = -2.0;
  ToyMdp m;
  m.states = 2;
  m.actions = 1;
  m.gamma = g;
  Eigen::MatrixXd P(2, 2);
  P << 1 - a, a, b, 1 - b;
  m.P = {P};
  m.reward.resize(2, 1);
  m.reward << r1, r2;
  const double det = (1 - g * (1 - a)) * (1 - g * (1 - b)) - g * a * g * b;
  const double v1 = ((1 - g * (1 - b)) * r1 + g * a * r2) / det;
  const double v2 = (g * b * r1 + (1 - g * (1 - a)) * r2) / det;
  const auto v = exact_policy_eval(m, Eigen::MatrixXd::Ones(2, 1));
  EXPECT_NEAR(v.V(0), v1, 1e-13);
  EXPECT_NEAR(v.V(1), v2, 1e-13);
}

TEST(PolicyEval, BellmanResidualTiny) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const ToyMdp m = random_mdp(2 + t % 19, 1 + t % 5, 0.5 + 0.49 * uniform01(rng), rng);
    const auto pi = random_policy(m.states, m.actions, rng);
    EXPECT_LT(bellman_residual(exact_policy_eval(m, pi), pi), 1e-10);
  }
}

TEST(PolicyEval, Validation) {
  ToyMdp m = single_state(1.0, 1.0);
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m.gamma = 0.5;
  m.P[0](0, 0) = 0.9;
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m.P[0](0, 0) = 1.0;
  EXPECT_THROW(exact_policy_eval(m, Eigen::MatrixXd::Ones(2, 1)), std::invalid_argument);
}

TEST(Divergences, KlAndTv) {
  const Eigen::VectorXd p = Eigen::Vector3d(0.7, 0.2, 0.1), u = Eigen::Vector3d::Constant(1.0 / 3);
  EXPECT_NEAR(kl_exact(row_span(p), row_span(u)), 0.7 * std::log(2.1) + 0.2 * std::log(0.6) + 0.1 * std::log(0.3), 1e-15);
  EXPECT_NEAR(tv_distance(row_span(p), row_span(u)), 0.5 * (0.7 - 1.0 / 3 + 1.0 / 3 - 0.2 + 1.0 / 3 - 0.1), 1e-15);
  const Eigen::VectorXd point = Eigen::Vector3d(1, 0, 0);
  EXPECT_TRUE(std::isinf(kl_exact(row_span(u), row_span(point))));
  EXPECT_EQ(kl_exact(row_span(point), row_span(point)), 0.0);
}

TEST(PerformanceBound, HandCase) {
  const auto r = performance_hand_case();
  EXPECT_NEAR(r.lhs, 1.0, 1e-12);
  EXPECT_NEAR(r.rhs, std::sqrt(2 * std::log(2.0)), 1e-12);
  EXPECT_TRUE(r.pass);
}

TEST(PerformanceBound, IdenticalPoliciesGiveZero) {
  Rng rng(3);
  const ToyMdp m = random_mdp(5, 3, 0.9, rng);
  const auto p = random_policy(5, 3, rng);
  const auto r = check_performance_bound(m, p, p);
  EXPECT_EQ(r.B, 0.0);
  EXPECT_NEAR(r.lhs, 0.0, 1e-15);
  EXPECT_TRUE(r.pass);
}

TEST(PerformanceBound, RandomTriplesHold) {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    const ToyMdp m = random_mdp(2 + t % 10, 2 + t % 4, 0.1 + 0.85 * uniform01(rng), rng);
    const auto p = random_policy(m.states, m.actions, rng);
    const auto q = perturb_policy(p, uniform01(rng), rng);
    const auto r = check_performance_bound(m, p, q);
    EXPECT_TRUE(r.pass) << "trial " << t << " lhs " << r.lhs << " rhs " << r.rhs;
    EXPECT_TRUE(check_pinsker(p, q).pass);
  }
}

TEST(ContaminationBound, MonteCarloAgreesWithExactGap) {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const ToyMdp m = random_mdp(4, 3, 0.7, rng);
    const auto p = random_policy(4, 3, rng);
    const auto q = perturb_policy(p, 0.8, rng);
    for (double R : {0.25, 0.9}) {
      RobustValueOptions o;
      o.rollouts = 40000;
      const auto rec = check_robust_value_bound(m, p, q, R, rng, o);
      const double exact = robust_value_gap_exact(m, p, q, R);
      // tolerance holds 3 MC standard errors; allow 5 here.
      EXPECT_NEAR(rec.lhs, exact, 5.0 / 3.0 * rec.tolerance) << "trial " << t << " R " << R;
      EXPECT_LE(exact, rec.rhs + 1e-12);
    }
  }
}

TEST(ContaminationBound, ZeroRateAndSamePolicy) {
  Rng rng(6);
  const ToyMdp m = random_mdp(5, 2, 0.8, rng);
  const auto p = random_policy(5, 2, rng);
  const auto q = perturb_policy(p, 0.5, rng);
  RobustValueOptions o;
  o.rollouts = 20000;
  const auto zero = check_robust_value_bound(m, p, q, 0.0, rng, o);
  EXPECT_EQ(zero.rhs, 0.0);
  EXPECT_TRUE(zero.pass);
  EXPECT_NEAR(robust_value_gap_exact(m, p, q, 0.0), 0.0, 1e-12);
  const auto same = check_robust_value_bound(m, p, p, 0.5, rng, o);
  EXPECT_EQ(same.B, 0.0);
  EXPECT_TRUE(same.pass);
  EXPECT_THROW(check_robust_value_bound(m, p, q, 1.0, rng, o), std::invalid_argument);
}

TEST(ContaminationBound, RhsGrowsWithRate) {
  Rng rng(7);
  const ToyMdp m = random_mdp(4, 3, 0.9, rng);
  const auto p = random_policy(4, 3, rng);
  const auto q = perturb_policy(p, 0.5, rng);
  RobustValueOptions o;
  o.rollouts = 1000;
  double last = -1.0;
  for (double R : {0.0, 0.25, 0.5, 0.9}) {
    const double rhs = check_robust_value_bound(m, p, q, R, rng, o).rhs;
    EXPECT_GT(rhs, last);
    last = rhs;
  }
}

TEST(Suites, QuickRunHasNoViolationsAndFaultInjectionTrips) {
  VerifyOptions o = VerifyOptions::quick(20);
  const auto recs = run_all_suites(o);
  for (const auto& [suite, s] : summarize(recs)) {
    EXPECT_GT(s.checks, 0) << suite;
    EXPECT_EQ(s.violations, 0) << suite;
  }
  o.rhs_scale = 0.01;
  int violations = 0;
  for (const auto& [suite, s] : summarize(run_all_suites(o))) violations += s.violations;
  EXPECT_GT(violations, 0);
  std::ostringstream os;
  write_bounds_csv(os, recs);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kBoundsCsvHeader);
}

TEST(PolicyProbe, BudgetMatchesKlProbe) {
  Experiment exp;
  exp.net.enc_width = 8;
  exp.net.trunk_width = 8;
  Rng init(8);
  const PolicyNet net{NetParams::initialized(exp.net, init), exp.normalizer};
  const auto [clean, adv] = collect_probe_pairs(exp, net, net, 100, 9);
  const auto rep = policy_probe_report(net, net, clean, adv, exp.sim, 0.99);
  EXPECT_NEAR(rep.record.B, kl_budget_probe(net, clean, adv), 1e-15);
  EXPECT_GE(rep.decision_gap, 0.0);
  EXPECT_LE(rep.mean_tv, std::sqrt(rep.record.B / 2.0) + 1e-12);  // Jensen plus Pinsker
  EXPECT_LE(rep.decision_gap, rep.record.rhs + 1e-12);
}
