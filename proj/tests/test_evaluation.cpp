#include <gtest/gtest.h>

#include <sstream>

#include "rsep/evaluation.hpp"

using namespace rsep;

namespace {

Experiment short_experiment() {
  Experiment e;
  e.sim.episode_length = 300;
  e.net.enc_width = 8;
  e.net.trunk_width = 8;
  return e;
}

PolicyNet make_net(const Experiment& e, std::uint64_t seed) {
  Rng rng(seed);
  PolicyNet n{NetParams::initialized(e.net, rng), e.normalizer};
  n.params.block(kPiW1) *= 100.0;  // distinct, state-dependent greedy actions
  return n;
}

}  // namespace

TEST(Grid, DefaultAndParsing) {
  const auto g = default_grid();
  ASSERT_EQ(g.size(), 20u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_NEAR(g.back(), 0.95, 1e-15);
  EXPECT_EQ(parse_grid("0:0.95:0.05"), g);
  EXPECT_EQ(parse_grid("0,0.35,0.95"), (std::vector<double>{0, 0.35, 0.95}));
  EXPECT_EQ(parse_grid("0.5:0.5:0.1"), std::vector<double>{0.5});
  EXPECT_THROW(parse_grid("0:1"), std::invalid_argument);
  EXPECT_THROW(parse_grid("0.2x"), std::invalid_argument);
  EXPECT_THROW(parse_grid("1:0:0.1"), std::invalid_argument);
  EvalConfig c{parse_grid("0:1:0.25")};
  EXPECT_THROW(c.validate(), std::invalid_argument);  // contains R = 1
}

TEST(Episode, EmptyTrafficGivesZeroAndInfinity) {
  Experiment e = short_experiment();
  e.sim.arrival_rate = 0.0;
  const PolicyNet n = make_net(e, 1);
  const auto m = run_episode(e, n, n, 0.5, 1, 0);
  EXPECT_EQ(m.nmac, 0);
  EXPECT_EQ(m.observations, 0);
  EXPECT_TRUE(std::isinf(m.min_separation));
  const auto r = aggregate({m, m});
  EXPECT_TRUE(std::isinf(r.min_sep_mean));
  EXPECT_EQ(r.min_sep_episodes, 0);
  std::ostringstream os;
  write_metrics_csv(os, {r});
  EXPECT_NE(os.str().find(",inf,"), std::string::npos);
}

TEST(Episode, SingleAircraftHasNoNmac) {
  Experiment e = short_experiment();
  e.sim.network.routes.resize(1);
  e.sim.max_spawns_per_route = 1;
  const PolicyNet n = make_net(e, 2);
  const auto m = run_episode(e, n, n, 0.0, 3, 0);
  EXPECT_EQ(m.spawned, 1);
  EXPECT_EQ(m.nmac, 0);
  EXPECT_TRUE(std::isinf(m.min_separation));
}

TEST(Episode, DeterministicAndRateOneRejected) {
  const Experiment e = short_experiment();
  const PolicyNet n = make_net(e, 3);
  for (bool greedy : {true, false}) {
    const auto a = run_episode(e, n, n, 0.35, 5, 2, greedy);
    const auto b = run_episode(e, n, n, 0.35, 5, 2, greedy);
    EXPECT_EQ(a.nmac, b.nmac);
    EXPECT_EQ(a.min_separation, b.min_separation);
    EXPECT_EQ(a.corrupted, b.corrupted);
  }
  EXPECT_THROW(run_episode(e, n, n, 1.0, 5, 0), std::invalid_argument);
}

TEST(Corruption, CoinsNestAcrossRates) {
  int lo = 0, hi = 0;
  for (int ep = 0; ep < 5; ++ep)
    for (int id = 0; id < 20; ++id)
      for (int t = 0; t < 100; ++t) {
        const double u = corruption_uniform(9, ep, id, t);
        EXPECT_EQ(u, corruption_uniform(9, ep, id, t));
        if (u < 0.2) ++lo;
        if (u < 0.6) ++hi;
        if (u < 0.2) { EXPECT_LT(u, 0.6); }
      }
  EXPECT_NEAR(lo / 10000.0, 0.2, 3 * std::sqrt(0.16 / 1e4));
  EXPECT_NEAR(hi / 10000.0, 0.6, 3 * std::sqrt(0.24 / 1e4));
  EXPECT_NE(episode_traffic_seed(1, 0), episode_traffic_seed(1, 1));
}

TEST(Evaluation, PairedAcrossPoliciesAndNestedAcrossRates) {
  const Experiment e = short_experiment();
  const PolicyNet a = make_net(e, 4), b = make_net(e, 5);
  EvalConfig c{{0.0, 0.5}, 3, 11, true};
  const auto res = evaluate_policies(e, {{"a", a}, {"b", b}}, a, c);
  ASSERT_EQ(res.records.size(), 4u);
  // Same traffic seeds for both policies: spawn counts agree per episode at R = 0.
  for (int ep = 0; ep < 3; ++ep) {
    int sa = -1, sb = -1;
    for (const auto& m : res.episodes)
      if (m.rate == 0.0 && m.episode == ep) (m.policy == "a" ? sa : sb) = m.spawned;
    EXPECT_EQ(sa, sb);
  }
  EXPECT_EQ(res.find("a", 0.0).corrupted, 0);
  EXPECT_GT(res.find("a", 0.5).corrupted, 0);
  EXPECT_EQ(res.find("a", 0.5).box_violations, 0);
  EXPECT_THROW(res.find("c", 0.0), std::out_of_range);
}

TEST(Evaluation, CsvIsDeterministicWithStableHeader) {
  const Experiment e = short_experiment();
  const PolicyNet a = make_net(e, 6);
  EvalConfig c{{0.35}, 2, 12, true};
  std::string first;
  for (int run = 0; run < 2; ++run) {
    const auto res = evaluate_policies(e, {{"a", a}}, a, c);
    std::ostringstream m, ep;
    write_metrics_csv(m, res.records);
    write_episodes_csv(ep, res.episodes);
    if (run == 0) {
      first = m.str() + ep.str();
      EXPECT_EQ(m.str().substr(0, m.str().find('\n')), kMetricsCsvHeader);
      EXPECT_EQ(ep.str().substr(0, ep.str().find('\n')), kEpisodesCsvHeader);
    } else {
      EXPECT_EQ(first, m.str() + ep.str());
    }
  }
}

TEST(Aggregate, SampleStatistics) {
  std::vector<EpisodeMetrics> eps(3);
  eps[0].nmac = 1;
  eps[1].nmac = 2;
  eps[2].nmac = 6;
  eps[0].min_separation = 50;
  eps[1].min_separation = 70;
  const auto r = aggregate(eps);
  EXPECT_DOUBLE_EQ(r.nmac_mean, 3.0);
  EXPECT_DOUBLE_EQ(r.nmac_std, std::sqrt(7.0));
  EXPECT_DOUBLE_EQ(r.min_sep_mean, 60.0);
  EXPECT_EQ(r.min_sep_episodes, 2);
}
