#pragma once

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsep/adversary.hpp"
#include "rsep/airspace.hpp"
#include "rsep/diffnet.hpp"
#include "rsep/distributions.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"
#include "rsep/trainer.hpp"

namespace rsep {

struct EvalConfig {
  std::vector<double> grid;
  int episodes = 100;
  std::uint64_t seed = 0;
  bool greedy = true;

  void validate() const {
    if (grid.empty()) throw std::invalid_argument("EvalConfig: empty R grid");
    for (double r : grid)
      if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("EvalConfig: R values must lie in [0, 1)");
    if (episodes < 1) throw std::invalid_argument("EvalConfig: episodes must be at least 1");
  }
};

/// Default sweep 0, 0.05, ..., 0.95 (R = 1 is excluded because the kernel
/// requires R < 1).
inline std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 0; i < 20; ++i) g.push_back(i / 20.0);
  return g;
}

/// Parses "a:b:step" (inclusive of b up to rounding) or "r1,r2,...".
inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> out;
  auto num = [&](const std::string& t) {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument("bad number '" + t + "' in grid");
    return v;
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw std::invalid_argument("grid range must be a:b:step");
    const double a = num(parts[0]), b = num(parts[1]), step = num(parts[2]);
    if (!(step > 0.0) || b < a) throw std::invalid_argument("grid range needs step > 0 and b >= a");
    const auto n = static_cast<int>(std::floor((b - a) / step + 1e-9));
    // Snap to 12 significant digits so 0:0.95:0.05 yields the same doubles as the literals.
    for (int i = 0; i <= n; ++i) out.push_back(std::stod(fmt::format("{:.12g}", a + i * step)));
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  if (out.empty()) throw std::invalid_argument("empty grid");
  return out;
}

struct EpisodeMetrics {
  double rate = 0.0;
  std::string policy;
  int episode = 0;
  int nmac = 0;
  int los = 0;
  double min_separation = std::numeric_limits<double>::infinity();
  std::int64_t observations = 0;
  std::int64_t corrupted = 0;
  std::int64_t box_violations = 0;
  int spawned = 0;
};

/// Corruption coin for one (episode, aircraft, time step). Depends on
/// neither R nor the policy, so corrupted sets are shared across policies
/// and nested across increasing R.
inline double corruption_uniform(std::uint64_t seed, int episode, int aircraft, std::int64_t step) {
  CounterRng c(derive_seed(seed, {kCorruptionStream, static_cast<std::uint64_t>(episode),
                                  static_cast<std::uint64_t>(aircraft), static_cast<std::uint64_t>(step)}));
  return uniform01(c);
}

inline std::uint64_t episode_traffic_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, {kEvalStream, static_cast<std::uint64_t>(episode)});
}

/// One evaluation episode. Corrupted observations are the first-order
/// worst case under `critic`; actions are the mode of the policy unless
/// `greedy` is false.
inline EpisodeMetrics run_episode(const Experiment& exp, const PolicyNet& policy, const PolicyNet& critic, double rate,
                                  std::uint64_t seed, int episode, bool greedy = true,
                                  std::ostream* event_log = nullptr) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("run_episode: R must lie in [0, 1)");
  const CorruptionBounds bounds = exp.bounds();
  Airspace sim(exp.sim);
  sim.set_event_log(event_log);
  sim.reset(episode_traffic_seed(seed, episode));
  EpisodeMetrics m;
  m.rate = rate;
  m.episode = episode;
  for (std::int64_t step = 0; !sim.done(); ++step) {
    const auto& aircraft = sim.traffic().aircraft;
    const std::size_t n = aircraft.size();
    std::vector<StateMatrix> obs(n);
    std::vector<StateMatrix> to_attack;
    std::vector<std::size_t> attacked;
    for (std::size_t i = 0; i < n; ++i) {
      obs[i] = assemble_state(sim.traffic(), aircraft[i].id, exp.sim.reward.detection_radius, exp.sim.max_intruders);
      if (corruption_uniform(seed, episode, aircraft[i].id, step) < rate) {
        to_attack.push_back(obs[i]);
        attacked.push_back(i);
      }
    }
    if (!to_attack.empty()) {
      const auto adv = fo_adversarial_batch(critic, to_attack, bounds);
      for (std::size_t k = 0; k < attacked.size(); ++k) {
        if (!in_uncertainty_set(adv[k].perturbed, to_attack[k], bounds)) ++m.box_violations;
        obs[attacked[k]] = adv[k].perturbed;
      }
    }
    m.observations += static_cast<std::int64_t>(n);
    m.corrupted += static_cast<std::int64_t>(attacked.size());

    std::vector<double> commands(n);
    if (n) {
      const auto out = evaluate(policy, obs);
      for (std::size_t i = 0; i < n; ++i) {
        int a = 0;
        if (greedy) {
          a = mode(out[i].dist);
        } else {
          CounterRng c(derive_seed(seed, {kActionStream, static_cast<std::uint64_t>(episode),
                                          static_cast<std::uint64_t>(aircraft[i].id), static_cast<std::uint64_t>(step)}));
          a = sample(out[i].dist, c);
        }
        commands[i] = command_mps(a, exp.sim.reward.speed_step);
      }
    }
    sim.step(commands);
  }
  m.nmac = sim.stats().nmac_events;
  m.los = sim.stats().los_events;
  m.min_separation = sim.stats().min_separation;
  m.spawned = sim.stats().spawned;
  return m;
}

struct EvalRecord {
  double rate = 0.0;
  std::string policy;
  int episodes = 0;
  double nmac_mean = 0.0;
  double nmac_std = 0.0;
  double min_sep_mean = std::numeric_limits<double>::infinity();
  double min_sep_std = 0.0;
  int min_sep_episodes = 0;  // episodes with at least one coexisting pair
  double los_mean = 0.0;
  std::int64_t observations = 0;
  std::int64_t corrupted = 0;
  std::int64_t box_violations = 0;

  double corrupted_fraction() const {
    return observations ? static_cast<double>(corrupted) / static_cast<double>(observations) : 0.0;
  }
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::infinity(), 0.0};
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, std::sqrt(q / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

/// Episodes with no coexisting pair carry min separation +inf and are left
/// out of the separation mean and std.
inline EvalRecord aggregate(const std::vector<EpisodeMetrics>& eps) {
  if (eps.empty()) throw std::invalid_argument("aggregate: no episodes");
  EvalRecord r;
  r.rate = eps.front().rate;
  r.policy = eps.front().policy;
  r.episodes = static_cast<int>(eps.size());
  std::vector<double> nmac, sep, los;
  for (const auto& e : eps) {
    nmac.push_back(e.nmac);
    los.push_back(e.los);
    if (std::isfinite(e.min_separation)) sep.push_back(e.min_separation);
    r.observations += e.observations;
    r.corrupted += e.corrupted;
    r.box_violations += e.box_violations;
  }
  std::tie(r.nmac_mean, r.nmac_std) = detail::mean_std(nmac);
  std::tie(r.min_sep_mean, r.min_sep_std) = detail::mean_std(sep);
  r.min_sep_episodes = static_cast<int>(sep.size());
  r.los_mean = detail::mean_std(los).first;
  return r;
}

struct NamedPolicy {
  std::string tag;
  PolicyNet net;
};

struct EvalResult {
  std::vector<EvalRecord> records;
  std::vector<EpisodeMetrics> episodes;

  const EvalRecord& find(const std::string& tag, double rate) const {
    for (const auto& r : records)
      if (r.policy == tag && r.rate == rate) return r;
    throw std::out_of_range("no record for " + tag);
  }
};

/// Every policy meets the same traffic seeds and corruption coins at each R.
inline EvalResult evaluate_policies(const Experiment& exp, const std::vector<NamedPolicy>& policies,
                                    const PolicyNet& critic, const EvalConfig& cfg) {
  cfg.validate();
  EvalResult res;
  for (double rate : cfg.grid) {
    for (const auto& p : policies) {
      std::vector<EpisodeMetrics> eps;
      for (int e = 0; e < cfg.episodes; ++e) {
        auto m = run_episode(exp, p.net, critic, rate, cfg.seed, e, cfg.greedy);
        m.policy = p.tag;
        eps.push_back(m);
      }
      res.records.push_back(aggregate(eps));
      const auto& r = res.records.back();
      spdlog::info("R={:.2f} {:>8}: NMAC {:.2f} +- {:.2f}, min sep {:.1f} m, corrupted {:.3f}", rate, p.tag,
                   r.nmac_mean, r.nmac_std, r.min_sep_mean, r.corrupted_fraction());
      res.episodes.insert(res.episodes.end(), eps.begin(), eps.end());
    }
  }
  return res;
}

inline constexpr const char* kMetricsCsvHeader =
    "R,policy,episodes,nmac_mean,nmac_std,min_sep_mean_m,min_sep_std_m,min_sep_episodes,los_mean,"
    "corrupted_fraction,observations,box_violations";
inline constexpr const char* kEpisodesCsvHeader =
    "R,policy,episode,nmac,los,min_sep_m,observations,corrupted,box_violations,spawned";

namespace detail {
inline std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<EvalRecord>& recs) {
  os << kMetricsCsvHeader << '\n';
  for (const auto& r : recs)
    os << detail::fmt_double(r.rate) << ',' << r.policy << ',' << r.episodes << ',' << detail::fmt_double(r.nmac_mean)
       << ',' << detail::fmt_double(r.nmac_std) << ',' << detail::fmt_double(r.min_sep_mean) << ','
       << detail::fmt_double(r.min_sep_std) << ',' << r.min_sep_episodes << ',' << detail::fmt_double(r.los_mean)
       << ',' << detail::fmt_double(r.corrupted_fraction()) << ',' << r.observations << ',' << r.box_violations
       << '\n';
}

inline void write_episodes_csv(std::ostream& os, const std::vector<EpisodeMetrics>& eps) {
  os << kEpisodesCsvHeader << '\n';
  for (const auto& e : eps)
    os << detail::fmt_double(e.rate) << ',' << e.policy << ',' << e.episode << ',' << e.nmac << ',' << e.los << ','
       << detail::fmt_double(e.min_separation) << ',' << e.observations << ',' << e.corrupted << ','
       << e.box_violations << ',' << e.spawned << '\n';
}

inline void write_training_csv(std::ostream& os, const std::vector<IterationLog>& logs) {
  os << kTrainingCsvHeader << '\n';
  for (const auto& l : logs)
    os << l.phase << ',' << l.iteration << ',' << l.steps << ',' << detail::fmt_double(l.rate) << ','
       << detail::fmt_double(l.mean_return) << ',' << detail::fmt_double(l.mean_reward) << ','
       << detail::fmt_double(l.loss.clip) << ',' << detail::fmt_double(l.loss.value) << ','
       << detail::fmt_double(l.loss.entropy) << ',' << detail::fmt_double(l.loss.inv) << ','
       << detail::fmt_double(l.loss.anchor) << ',' << detail::fmt_double(l.loss.total) << ','
       << detail::fmt_double(l.loss.clip_fraction) << ',' << detail::fmt_double(l.kl_probe) << ','
       << detail::fmt_double(l.corrupted_fraction) << '\n';
}

}  // namespace rsep
