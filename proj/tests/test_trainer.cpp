#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "rsep/trainer.hpp"

using namespace rsep;

namespace {

Experiment small_experiment() {
  Experiment e;
  e.net.enc_width = 8;
  e.net.heads = 2;
  e.net.head_dim = 4;
  e.net.trunk_width = 8;
  return e;
}

TrainConfig small_config(std::int64_t steps = 1024) {
  TrainConfig c;
  c.batch_size = 256;
  c.minibatch_size = 64;
  c.epochs = 2;
  c.total_steps = steps;
  c.num_envs = 2;
  c.seed = 3;
  return c;
}

// Plain backward recursion over one trajectory.
std::vector<double> gae_oracle(const std::vector<double>& r, const std::vector<double>& v, double last, bool terminal,
                               double gamma, double lambda) {
  std::vector<double> a(r.size());
  double carry = 0.0;
  for (std::size_t k = r.size(); k-- > 0;) {
    double nv;
    if (k + 1 == r.size())
      nv = terminal ? 0.0 : last;
    else
      nv = v[k + 1];
    const double delta = r[k] + gamma * nv - v[k];
    carry = delta + gamma * lambda * ((k + 1 == r.size()) ? 0.0 : carry);
    a[k] = carry;
  }
  return a;
}

}  // namespace

TEST(Gae, SingleTerminalStep) {
  const std::vector<double> r{1.0}, v{0.0};
  const auto g = compute_gae(r, v, true, 123.0, 0.99, 0.95);
  EXPECT_DOUBLE_EQ(g.advantages[0], 1.0);
  EXPECT_DOUBLE_EQ(g.returns[0], 1.0);
}

TEST(Gae, ZeroDiscountIsOneStepError) {
  const std::vector<double> r{1.0, -2.0, 0.5}, v{0.3, 0.7, -1.0};
  const auto g = compute_gae(r, v, false, 9.0, 0.0, 0.95);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.advantages[i], r[i] - v[i]);
}

TEST(Gae, ConstantRewardFixedPoint) {
  const double c = 0.3, gamma = 0.99;
  const std::vector<double> r(500, c), v(500, c / (1 - gamma));
  const auto g = compute_gae(r, v, false, c / (1 - gamma), gamma, 0.95);
  for (double a : g.advantages) EXPECT_NEAR(a, 0.0, 1e-12);
}

TEST(Gae, EmptyRejected) {
  const std::vector<double> e;
  EXPECT_THROW(compute_gae(e, e, true, 0.0, 0.99, 0.95), std::invalid_argument);
}

TEST(Gae, InterleavedTrajectoriesMatchPerTrajectoryOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    // Three trajectories of random length, shuffled into one pooled buffer.
    std::vector<std::vector<double>> R(3), V(3);
    std::vector<bool> term(3);
    std::vector<double> last(3);
    for (int k = 0; k < 3; ++k) {
      const int len = 1 + static_cast<int>(uniform01(rng) * 20);
      for (int i = 0; i < len; ++i) {
        R[k].push_back(uniform01(rng) - 0.5);
        V[k].push_back(uniform01(rng) * 2 - 1);
      }
      term[k] = uniform01(rng) < 0.5;
      last[k] = uniform01(rng);
    }
    std::vector<std::pair<int, int>> slots;
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < static_cast<int>(R[k].size()); ++i) slots.emplace_back(k, i);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::map<std::pair<int, int>, std::ptrdiff_t> where;
    for (std::size_t j = 0; j < slots.size(); ++j) where[slots[j]] = static_cast<std::ptrdiff_t>(j);
    const std::size_t n = slots.size();
    std::vector<double> r(n), v(n), boot(n, 0.0);
    std::vector<std::uint8_t> done(n, 0);
    std::vector<std::ptrdiff_t> next(n, -1);
    for (std::size_t j = 0; j < n; ++j) {
      const auto [k, i] = slots[j];
      r[j] = R[k][i];
      v[j] = V[k][i];
      if (i + 1 < static_cast<int>(R[k].size())) {
        next[j] = where[{k, i + 1}];
      } else {
        done[j] = term[k] ? 1 : 0;
        boot[j] = last[k];
      }
    }
    const auto g = compute_gae(r, v, done, next, boot, 0.97, 0.9);
    for (int k = 0; k < 3; ++k) {
      const auto want = gae_oracle(R[k], V[k], last[k], term[k], 0.97, 0.9);
      for (int i = 0; i < static_cast<int>(want.size()); ++i) {
        const auto j = static_cast<std::size_t>(where[{k, i}]);
        EXPECT_NEAR(g.advantages[j], want[static_cast<std::size_t>(i)], 1e-12);
        EXPECT_NEAR(g.returns[j], want[static_cast<std::size_t>(i)] + V[k][i], 1e-12);
      }
    }
  }
}

TEST(Gae, NormalizeAdvantages) {
  std::vector<double> a{1, 2, 3, 4, 10};
  normalize_advantages(a);
  double m = 0, s = 0;
  for (double x : a) m += x;
  m /= 5;
  for (double x : a) s += (x - m) * (x - m);
  EXPECT_NEAR(m, 0.0, 1e-15);
  EXPECT_NEAR(std::sqrt(s / 5), 1.0, 1e-12);
  std::vector<double> flat{2, 2, 2};
  normalize_advantages(flat);
  for (double x : flat) EXPECT_EQ(x, 0.0);
}

TEST(Curriculum, DrawsAreUniform) {
  const std::vector<double> cur = TrainConfig{}.curriculum;
  Rng rng(5);
  std::map<double, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[draw_rate(cur, rng)];
  ASSERT_EQ(counts.size(), cur.size());
  const double p = 1.0 / 6.0, sd = std::sqrt(n * p * (1 - p));
  for (const auto& [rate, c] : counts) EXPECT_NEAR(c, n * p, 3 * sd) << rate;
  EXPECT_THROW(draw_rate({}, rng), std::invalid_argument);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.clip_eps = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.entropy_coef = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.curriculum = {0.2, 1.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

class LossFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    exp = small_experiment();
    Rng init(11), init2(12);
    teacher = PolicyNet{NetParams::initialized(exp.net, init), exp.normalizer};
    teacher.params.block(kPiW1) *= 50.0;
    behavior = PolicyNet{NetParams::initialized(exp.net, init2), exp.normalizer};
    behavior.params.block(kPiW1) *= 50.0;
    RolloutCollector col(exp, 1, 99);
    batch = col.collect(behavior, &teacher, 0.5, 64, true);
    Rng rng(13);
    for (std::size_t i = 0; i < batch.transitions.size(); ++i) {
      adv.push_back(uniform01(rng) * 2 - 1);
      ret.push_back(uniform01(rng) * 2 - 1);
      idx.push_back(i);
    }
  }
  Experiment exp;
  PolicyNet teacher, behavior;
  Batch batch;
  std::vector<double> adv, ret;
  std::vector<std::size_t> idx;
};

TEST_F(LossFixture, BatchCarriesCleanAndAdversarialStates) {
  ASSERT_GE(batch.transitions.size(), 64u);
  EXPECT_EQ(batch.box_violations, 0);
  const auto b = exp.bounds();
  for (const auto& t : batch.transitions) {
    EXPECT_TRUE(in_uncertainty_set(t.adversarial, t.clean, b));
    EXPECT_TRUE(t.observation.values.cwiseEqual(t.corrupted ? t.adversarial.values : t.clean.values).all());
    EXPECT_EQ(reward_from_distances(intruder_distances(t.next_true), command_mps(t.action, exp.sim.reward.speed_step),
                                    exp.sim.reward),
              t.reward);
  }
}

TEST_F(LossFixture, RatioOneGivesMinusMeanAdvantage) {
  TrainConfig cfg;
  const auto L = ppo_losses(behavior, batch, idx, adv, ret, cfg, LossOptions{true}, nullptr);
  double mean = 0;
  for (double a : adv) mean += a;
  mean /= static_cast<double>(adv.size());
  EXPECT_NEAR(L.clip, -mean, 1e-12);
  EXPECT_EQ(L.clip_fraction, 0.0);
  EXPECT_TRUE(L.finite());
}

TEST_F(LossFixture, RegularizersVanishForTeacherOnCleanPairs) {
  Batch same = batch;
  for (auto& t : same.transitions) {
    t.adversarial = t.clean;
    t.teacher_prob = evaluate(teacher, std::span<const StateMatrix>(&t.clean, 1))[0].dist.prob;
  }
  const auto L = ppo_losses(teacher, same, idx, adv, ret, TrainConfig{}, LossOptions{true}, nullptr);
  EXPECT_EQ(L.inv, 0.0);
  EXPECT_NEAR(L.anchor, 0.0, 1e-15);
}

TEST_F(LossFixture, TotalCombinesTerms) {
  TrainConfig cfg;
  cfg.lambda_inv = 0.3;
  cfg.lambda_anchor = 0.2;
  const auto L = ppo_losses(behavior, batch, idx, adv, ret, cfg, LossOptions{true}, nullptr);
  EXPECT_NEAR(L.total,
              L.clip + cfg.value_coef * L.value - cfg.entropy_coef * L.entropy + 0.3 * L.inv + 0.2 * L.anchor, 1e-14);
  EXPECT_GT(L.inv, 0.0);
  EXPECT_GT(L.anchor, 0.0);
}

TEST_F(LossFixture, ClipCapsEachSample) {
  Batch b = batch;
  for (auto& t : b.transitions) t.log_prob -= 3.0;  // ratio = e^3
  std::vector<double> pos(adv.size(), 1.0);
  TrainConfig cfg;
  const auto L = ppo_losses(behavior, b, idx, pos, ret, cfg, LossOptions{}, nullptr);
  EXPECT_NEAR(L.clip, -(1 + cfg.clip_eps), 1e-12);
  EXPECT_DOUBLE_EQ(L.clip_fraction, 1.0);
  NetParams g = behavior.params.zeros_like();
  TrainConfig only_clip = cfg;
  only_clip.value_coef = 0.0;
  only_clip.entropy_coef = 0.0;
  ppo_losses(behavior, b, idx, pos, ret, only_clip, LossOptions{}, &g);
  EXPECT_TRUE(g.flat().isZero());
}

TEST_F(LossFixture, AnalyticGradientMatchesFiniteDifferences) {
  TrainConfig cfg;
  cfg.lambda_inv = 0.5;
  cfg.lambda_anchor = 0.3;
  PolicyNet net = behavior;
  Rng rng(17);
  for (Eigen::Index i = 0; i < net.params.size(); ++i) net.params.flat()(i) += 0.02 * (uniform01(rng) - 0.5);
  // Every third sample sits well outside the trust region so both branches of the clip are exercised.
  Batch mixed = batch;
  for (std::size_t i = 0; i < mixed.transitions.size(); i += 3) mixed.transitions[i].log_prob += (i % 2 ? 0.6 : -0.6);
  NetParams g = net.params.zeros_like();
  const auto base = ppo_losses(net, mixed, idx, adv, ret, cfg, LossOptions{true}, &g);
  ASSERT_GT(base.clip_fraction, 0.0);
  ASSERT_LT(base.clip_fraction, 1.0);
  auto total = [&](const Eigen::VectorXd& theta) {
    PolicyNet n = net;
    n.params.flat() = theta;
    return ppo_losses(n, mixed, idx, adv, ret, cfg, LossOptions{true}, nullptr).total;
  };
  for (int d = 0; d < 20; ++d) {
    Eigen::VectorXd dir = Eigen::VectorXd::Random(net.params.size()).normalized();
    const double h = 1e-6;
    const double fd = (total(net.params.flat() + h * dir) - total(net.params.flat() - h * dir)) / (2 * h);
    const double an = g.flat().dot(dir);
    EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd))) << "direction " << d;
  }
}

TEST(Optimizer, AdamFirstStepAndClip) {
  Adam adam(3, 0.1, 0.9, 0.999, 1e-8);
  Eigen::VectorXd x = Eigen::Vector3d(1, 2, 3), g = Eigen::Vector3d(0.5, -4, 0);
  adam.step(x, g);
  EXPECT_NEAR(x(0), 1 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(x(1), 2 + 0.1 * 4 / (4 + 1e-8), 1e-12);
  EXPECT_EQ(x(2), 3.0);
  Eigen::VectorXd big = Eigen::Vector3d(3, 4, 0);
  clip_grad_norm(big, 0.5);
  EXPECT_NEAR(big.norm(), 0.5, 1e-15);
  Eigen::VectorXd small = Eigen::Vector3d(0.1, 0, 0);
  clip_grad_norm(small, 0.5);
  EXPECT_EQ(small(0), 0.1);
}

TEST(Probe, ConstantLogitsAndNonnegativity) {
  const Experiment exp = small_experiment();
  NetParams p(exp.net);
  p.block(kPiB1)(0, 0) = 2.0;
  const PolicyNet constant{p, exp.normalizer};
  Rng init(21);
  const PolicyNet net{NetParams::initialized(exp.net, init), exp.normalizer};
  const auto [clean, adv] = collect_probe_pairs(exp, net, net, 200, 4);
  ASSERT_EQ(clean.size(), 200u);
  EXPECT_EQ(kl_budget_probe(constant, clean, adv), 0.0);
  EXPECT_GE(kl_budget_probe(net, clean, adv), 0.0);
  EXPECT_THROW(kl_budget_probe(net, std::span<const StateMatrix>(), std::span<const StateMatrix>()),
               std::invalid_argument);
}

TEST(Training, DeterministicGivenSeed) {
  const Experiment exp = small_experiment();
  const auto a = pretrain_nominal(exp, small_config());
  const auto b = pretrain_nominal(exp, small_config());
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].checksum, b.log[i].checksum);
  EXPECT_EQ(a.reward_mismatches, 0);
  TrainConfig other = small_config();
  other.seed = 4;
  EXPECT_NE(pretrain_nominal(exp, other).net.params.checksum(), a.net.params.checksum());
}

TEST(Training, ReductionIdentityStepForStep) {
  const Experiment exp = small_experiment();
  TrainConfig cfg = small_config(256 * 6);
  const auto nominal = pretrain_nominal(exp, cfg);
  Rng init(31);
  const PolicyNet teacher{NetParams::initialized(exp.net, init), exp.normalizer};
  cfg.curriculum = {0.0};
  cfg.lambda_inv = 0.0;
  cfg.lambda_anchor = 0.0;
  cfg.init_from_teacher = false;
  const auto robust = robust_train(exp, teacher, cfg);
  ASSERT_EQ(nominal.log.size(), robust.log.size());
  for (std::size_t i = 0; i < nominal.log.size(); ++i) {
    EXPECT_EQ(nominal.log[i].checksum, robust.log[i].checksum) << "iteration " << i;
    EXPECT_EQ(nominal.log[i].loss.total, robust.log[i].loss.total);
  }
  EXPECT_TRUE(nominal.net.params.flat().cwiseEqual(robust.net.params.flat()).all());
}

TEST(Training, RobustPhaseAuditsAndTeacherIntact) {
  const Experiment exp = small_experiment();
  Rng init(41);
  const PolicyNet teacher{NetParams::initialized(exp.net, init), exp.normalizer};
  const std::uint64_t before = teacher.params.checksum();
  TrainConfig cfg = small_config(256 * 4);
  cfg.curriculum = {0.5};
  std::int64_t corrupted = 0, total = 0;
  PhaseHooks hooks;
  hooks.on_batch = [&](const Batch& b) {
    corrupted += b.corrupted;
    total += static_cast<std::int64_t>(b.transitions.size());
  };
  const auto res = robust_train(exp, teacher, cfg, hooks);
  EXPECT_EQ(teacher.params.checksum(), before);
  EXPECT_EQ(res.box_violations, 0);
  EXPECT_EQ(res.reward_mismatches, 0);
  const double f = static_cast<double>(corrupted) / static_cast<double>(total);
  EXPECT_NEAR(f, 0.5, 3 * std::sqrt(0.25 / static_cast<double>(total)));
  for (const auto& l : res.log) {
    EXPECT_TRUE(l.loss.finite());
    EXPECT_GE(l.kl_probe, 0.0);
  }
}

TEST(Training, TeacherWarmStartBeginsAtTeacher) {
  const Experiment exp = small_experiment();
  Rng init(51);
  const PolicyNet teacher{NetParams::initialized(exp.net, init), exp.normalizer};
  TrainConfig cfg = small_config(256);
  cfg.init_from_teacher = true;
  PhaseHooks hooks;
  hooks.max_iterations = 0;
  EXPECT_EQ(robust_train(exp, teacher, cfg, hooks).net.params.checksum(), teacher.params.checksum());
}

TEST(Training, DivergenceIsReported) {
  const Experiment exp = small_experiment();
  TrainConfig cfg = small_config(512);
  cfg.lr = 1e300;
  cfg.max_grad_norm = 0.0;
  try {
    pretrain_nominal(exp, cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_TRUE(e.last_good().params.flat().allFinite());
  }
}
