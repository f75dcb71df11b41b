#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rsep/rng.hpp"

namespace rsep {

inline constexpr double kKnot = 0.514444;  // m/s
inline constexpr double kSpeedStep = 5.0 * kKnot;

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// One aircraft's kinematic row [x, y, psi, v, d_g, u_-].
struct AircraftState {
  double x = 0.0;         // east, m
  double y = 0.0;         // north, m
  double heading = 0.0;   // rad, (-pi, pi]
  double speed = 0.0;     // m/s
  double dist_to_go = 0.0;  // remaining along-route distance, m
  double prev_command = 0.0;  // m/s, signed

  Vec2 position() const { return {x, y}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading) && std::isfinite(speed) &&
           std::isfinite(dist_to_go) && std::isfinite(prev_command);
  }
};

struct Wind {
  double east = 0.0;
  double north = 0.0;
};

struct SpeedLimits {
  double min = 7.5;
  double max = 36.0;
};

struct Route {
  std::vector<Vec2> waypoints;

  double length() const {
    double total = 0.0;
    for (std::size_t i = 1; i < waypoints.size(); ++i) total += distance(waypoints[i - 1], waypoints[i]);
    return total;
  }
};

/// Two routes that cross at one shared waypoint and merge at another.
struct RouteNetwork {
  std::vector<Route> routes;
  double capture_radius = 100.0;

  static RouteNetwork standard() {
    RouteNetwork net;
    const Vec2 crossing{2500.0, 2500.0};
    const Vec2 merge{2500.0, 6500.0};
    const Vec2 exit{2500.0, 8000.0};
    net.routes.push_back(Route{{{0.0, 0.0}, crossing, {4000.0, 4500.0}, merge, exit}});
    net.routes.push_back(Route{{{5000.0, 0.0}, crossing, {1000.0, 4500.0}, merge, exit}});
    return net;
  }
};

/// Where an aircraft is along its route: the index of the waypoint it is
/// currently flying toward.
struct RouteCursor {
  int route = 0;
  std::size_t next_wp = 1;
};

struct WaypointUpdate {
  double heading = 0.0;
  std::size_t next_wp = 0;
  bool reached_final = false;
};

/// Heading guidance h(psi): once inside the capture radius of the waypoint
/// being tracked, point at the following one. At the last waypoint the
/// aircraft is flagged for removal and keeps its heading.
inline WaypointUpdate advance_waypoint(const AircraftState& s, const Route& route, std::size_t wp_index,
                                       double capture_radius) {
  WaypointUpdate out{s.heading, wp_index, false};
  if (wp_index >= route.waypoints.size()) {
    out.reached_final = true;
    return out;
  }
  if (distance(s.position(), route.waypoints[wp_index]) > capture_radius) return out;
  if (wp_index + 1 >= route.waypoints.size()) {
    out.reached_final = true;
    return out;
  }
  const Vec2 next = route.waypoints[wp_index + 1];
  out.heading = wrap_angle(std::atan2(next.y - s.y, next.x - s.x));
  out.next_wp = wp_index + 1;
  return out;
}

/// Point-mass update s' = a(s) + b(s) u, followed by speed clipping. The
/// command that actually moves the aircraft is the one left after clipping,
/// so position and distance-to-go stay consistent with the new speed;
/// u_- records the command as issued.
inline AircraftState kinematic_step(const AircraftState& s, double command, const Wind& wind, double dt,
                                    const SpeedLimits& limits = {}) {
  if (!s.finite() || !std::isfinite(command) || !std::isfinite(wind.east) || !std::isfinite(wind.north) ||
      !std::isfinite(dt)) {
    throw std::invalid_argument("kinematic_step: non-finite input");
  }
  const double new_speed = std::clamp(s.speed + command, limits.min, limits.max);
  const double applied = new_speed - s.speed;
  const double c = std::cos(s.heading);
  const double sn = std::sin(s.heading);
  AircraftState n;
  n.x = s.x + (s.speed * c + wind.east) * dt + c * dt * applied;
  n.y = s.y + (s.speed * sn + wind.north) * dt + sn * dt * applied;
  n.heading = s.heading;
  n.speed = new_speed;
  n.dist_to_go = std::max(0.0, s.dist_to_go - s.speed * dt - dt * applied);
  n.prev_command = command;
  return n;
}

struct StepResult {
  AircraftState state;
  RouteCursor cursor;
  bool reached_final = false;
};

inline StepResult step_aircraft(const AircraftState& s, double command, const Wind& wind, double dt,
                                const RouteNetwork& net, RouteCursor cursor, const SpeedLimits& limits = {}) {
  StepResult r{kinematic_step(s, command, wind, dt, limits), cursor, false};
  const auto wp = advance_waypoint(r.state, net.routes.at(static_cast<std::size_t>(cursor.route)), cursor.next_wp,
                                   net.capture_radius);
  r.state.heading = wp.heading;
  r.cursor.next_wp = wp.next_wp;
  r.reached_final = wp.reached_final;
  return r;
}

/// Arrival times on one route over [0, horizon): exponential gaps, each
/// lengthened to at least `min_headway`.
template <class Urbg>
std::vector<double> spawn_traffic(Urbg& rng, double rate, double min_headway, double horizon,
                                  int max_count = -1) {
  if (!(rate > 0.0)) throw std::invalid_argument("spawn_traffic: rate must be positive");
  std::vector<double> times;
  double t = 0.0;
  while (max_count < 0 || static_cast<int>(times.size()) < max_count) {
    const double gap = -std::log1p(-uniform01(rng)) / rate;
    t += std::max(gap, min_headway);
    if (!(t < horizon)) break;
    times.push_back(t);
  }
  return times;
}

struct Aircraft {
  int id = 0;
  AircraftState state;
  RouteCursor cursor;
};

struct TrafficState {
  std::vector<Aircraft> aircraft;
  double time = 0.0;

  const Aircraft* find(int id) const {
    for (const auto& a : aircraft)
      if (a.id == id) return &a;
    return nullptr;
  }
};

/// Distances from the ownship to every other aircraft, in traffic order.
inline std::vector<double> pairwise_separation(const TrafficState& traffic, int ownship_id) {
  const Aircraft* own = traffic.find(ownship_id);
  if (!own) throw std::out_of_range("pairwise_separation: unknown aircraft id " + std::to_string(ownship_id));
  std::vector<double> d;
  d.reserve(traffic.aircraft.size());
  for (const auto& a : traffic.aircraft)
    if (a.id != ownship_id) d.push_back(std::hypot(a.state.x - own->state.x, a.state.y - own->state.y));
  return d;
}

struct RewardParams {
  double alpha = 0.1;
  double beta = 2e-4;           // 1/m
  double nmac_penalty = 1.0;
  double action_weight = 0.001;
  double speed_step = kSpeedStep;  // m/s
  double protected_radius = 100.0;  // d_pz
  double detection_radius = 500.0;  // d_r
};

/// Proximity penalty for one intruder; NMAC branch checked first.
inline double proximity_penalty(double d, const RewardParams& p) {
  if (d <= p.protected_radius) return -p.alpha + p.beta * d - p.nmac_penalty;
  if (d <= p.detection_radius) return -p.alpha + p.beta * d;
  return 0.0;
}

inline double action_penalty(double command, const RewardParams& p) {
  const double steps = command / p.speed_step;
  return -p.action_weight * steps * steps;
}

/// Reward from intruder distances (ascending) and the issued command.
inline double reward_from_distances(std::span<const double> distances, double command, const RewardParams& p) {
  double r = 0.0;
  for (double d : distances) r += proximity_penalty(d, p);
  return r + action_penalty(command, p);
}

/// The `limit` nearest intruders within the detection radius (inclusive),
/// ordered by (distance, id). Returns indices into traffic.aircraft.
inline std::vector<std::pair<double, std::size_t>> nearest_intruders(const TrafficState& traffic, int ownship_id,
                                                                     double radius, int limit) {
  const Aircraft* own = traffic.find(ownship_id);
  if (!own) throw std::out_of_range("unknown aircraft id " + std::to_string(ownship_id));
  std::vector<std::pair<double, std::size_t>> in_range;
  for (std::size_t i = 0; i < traffic.aircraft.size(); ++i) {
    const auto& a = traffic.aircraft[i];
    if (a.id == ownship_id) continue;
    const double d = std::hypot(a.state.x - own->state.x, a.state.y - own->state.y);
    if (d <= radius) in_range.emplace_back(d, i);
  }
  std::sort(in_range.begin(), in_range.end(), [&](const auto& l, const auto& r) {
    if (l.first != r.first) return l.first < r.first;
    return traffic.aircraft[l.second].id < traffic.aircraft[r.second].id;
  });
  if (limit >= 0 && static_cast<int>(in_range.size()) > limit) in_range.resize(static_cast<std::size_t>(limit));
  return in_range;
}

/// True reward for `ownship_id` after the step, over the intruders that
/// appear in its state matrix (nearest `max_intruders` within d_r).
inline double compute_reward(const TrafficState& next_traffic, int ownship_id, double command, const RewardParams& p,
                             int max_intruders = 5) {
  const auto near = nearest_intruders(next_traffic, ownship_id, p.detection_radius, max_intruders);
  std::vector<double> d;
  d.reserve(near.size());
  for (const auto& [dist, idx] : near) d.push_back(dist);
  return reward_from_distances(d, command, p);
}

struct PairOnset {
  int first = 0;   // lower id
  int second = 0;  // higher id
  double distance = 0.0;
};

struct EncounterOnsets {
  std::vector<PairOnset> nmac;
  std::vector<PairOnset> los;
};

/// Counts NMAC / LOS onsets: an aircraft pair produces one event each time
/// it enters the radius, and none while it stays inside.
class EncounterTracker {
 public:
  EncounterTracker(double protected_radius, double detection_radius)
      : protected_radius_(protected_radius), detection_radius_(detection_radius) {}

  EncounterOnsets update(const TrafficState& traffic) {
    EncounterOnsets out;
    std::vector<std::pair<int, int>> nmac_now, los_now;
    const auto& ac = traffic.aircraft;
    for (std::size_t i = 0; i < ac.size(); ++i) {
      for (std::size_t j = i + 1; j < ac.size(); ++j) {
        const double d = std::hypot(ac[i].state.x - ac[j].state.x, ac[i].state.y - ac[j].state.y);
        const auto key = std::minmax(ac[i].id, ac[j].id);
        const std::pair<int, int> pair{key.first, key.second};
        if (d < protected_radius_) {
          nmac_now.push_back(pair);
          if (!contains(nmac_inside_, pair)) out.nmac.push_back({pair.first, pair.second, d});
        }
        if (d < detection_radius_) {
          los_now.push_back(pair);
          if (!contains(los_inside_, pair)) out.los.push_back({pair.first, pair.second, d});
        }
      }
    }
    std::sort(nmac_now.begin(), nmac_now.end());
    std::sort(los_now.begin(), los_now.end());
    nmac_inside_ = std::move(nmac_now);
    los_inside_ = std::move(los_now);
    return out;
  }

  void clear() {
    nmac_inside_.clear();
    los_inside_.clear();
  }

 private:
  static bool contains(const std::vector<std::pair<int, int>>& sorted, std::pair<int, int> p) {
    return std::binary_search(sorted.begin(), sorted.end(), p);
  }

  double protected_radius_;
  double detection_radius_;
  std::vector<std::pair<int, int>> nmac_inside_;
  std::vector<std::pair<int, int>> los_inside_;
};

inline EncounterOnsets detect_events(EncounterTracker& tracker, const TrafficState& traffic) {
  return tracker.update(traffic);
}

struct SimConfig {
  RouteNetwork network = RouteNetwork::standard();
  double arrival_rate = 1.0 / 60.0;  // per route, aircraft/s; 0 disables traffic
  double min_headway = 30.0;         // s
  double cruise_speed = 20.0;        // m/s
  SpeedLimits limits;
  Wind wind;
  double dt = 1.0;
  double episode_length = 3000.0;  // s
  int max_spawns_per_route = -1;
  int max_intruders = 5;
  RewardParams reward;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("SimConfig: " + m); };
    if (!(arrival_rate >= 0.0)) fail("arrival_rate must be nonnegative");
    if (!(min_headway >= 0.0)) fail("min_headway must be nonnegative");
    if (!(dt > 0.0) || !(episode_length > 0.0)) fail("dt and episode_length must be positive");
    if (!(limits.min > 0.0 && limits.min < limits.max)) fail("speed limits must satisfy 0 < min < max");
    if (!(cruise_speed >= limits.min && cruise_speed <= limits.max)) fail("cruise_speed outside the speed limits");
    if (network.routes.empty()) fail("no routes");
    for (const auto& r : network.routes)
      if (r.waypoints.size() < 2) fail("every route needs at least two waypoints");
    if (!(network.capture_radius > 0.0)) fail("capture_radius must be positive");
    if (max_intruders < 1) fail("max_intruders must be at least 1");
    if (!(reward.protected_radius > 0.0 && reward.protected_radius <= reward.detection_radius))
      fail("need 0 < protected_radius <= detection_radius");
  }
};

struct AgentStep {
  int id = 0;
  double command = 0.0;
  double reward = 0.0;
  bool exited = false;
  TrafficState const* snapshot = nullptr;  // traffic right after the move, before removals
};

struct EpisodeStats {
  int nmac_events = 0;
  int los_events = 0;
  double min_separation = std::numeric_limits<double>::infinity();
  int spawned = 0;
  int exited = 0;
};

/// Episode-level simulator: Poisson arrivals on every route, per-aircraft
/// speed commands, true rewards and encounter bookkeeping.
class Airspace {
 public:
  explicit Airspace(SimConfig cfg)
      : cfg_(std::move(cfg)), tracker_(cfg_.reward.protected_radius, cfg_.reward.detection_radius) {}

  const SimConfig& config() const { return cfg_; }
  const TrafficState& traffic() const { return traffic_; }
  const TrafficState& post_move_snapshot() const { return snapshot_; }
  const EpisodeStats& stats() const { return stats_; }
  double time() const { return traffic_.time; }

  void set_event_log(std::ostream* out) { log_ = out; }

  void reset(std::uint64_t seed) {
    traffic_ = {};
    snapshot_ = {};
    stats_ = {};
    tracker_.clear();
    next_id_ = 0;
    pending_.assign(cfg_.network.routes.size(), {});
    cursor_.assign(cfg_.network.routes.size(), 0);
    if (cfg_.arrival_rate > 0.0) {
      for (std::size_t r = 0; r < cfg_.network.routes.size(); ++r) {
        Rng rng = make_rng(seed, {kTrafficStream, r});
        pending_[r] = spawn_traffic(rng, cfg_.arrival_rate, cfg_.min_headway, cfg_.episode_length,
                                    cfg_.max_spawns_per_route);
      }
    }
    spawn_due();
  }

  bool done() const {
    if (traffic_.time >= cfg_.episode_length) return true;
    if (!traffic_.aircraft.empty()) return false;
    for (std::size_t r = 0; r < pending_.size(); ++r)
      if (cursor_[r] < pending_[r].size()) return false;
    return true;
  }

  /// Advances one dt. `commands` is aligned with traffic().aircraft. The
  /// returned entries are aligned with the pre-step aircraft order.
  std::vector<AgentStep> step(std::span<const double> commands) {
    if (commands.size() != traffic_.aircraft.size())
      throw std::invalid_argument("Airspace::step: command count does not match traffic");
    std::vector<AgentStep> out(traffic_.aircraft.size());
    std::vector<bool> exiting(traffic_.aircraft.size(), false);
    for (std::size_t i = 0; i < traffic_.aircraft.size(); ++i) {
      auto& a = traffic_.aircraft[i];
      const auto res = step_aircraft(a.state, commands[i], cfg_.wind, cfg_.dt, cfg_.network, a.cursor, cfg_.limits);
      a.state = res.state;
      a.cursor = res.cursor;
      exiting[i] = res.reached_final;
    }
    traffic_.time += cfg_.dt;
    snapshot_ = traffic_;

    for (std::size_t i = 0; i < snapshot_.aircraft.size(); ++i) {
      const int id = snapshot_.aircraft[i].id;
      out[i] = AgentStep{id, commands[i],
                         compute_reward(snapshot_, id, commands[i], cfg_.reward, cfg_.max_intruders), exiting[i],
                         &snapshot_};
    }

    const auto onsets = tracker_.update(snapshot_);
    stats_.nmac_events += static_cast<int>(onsets.nmac.size());
    stats_.los_events += static_cast<int>(onsets.los.size());
    for (std::size_t i = 0; i < snapshot_.aircraft.size(); ++i)
      for (std::size_t j = i + 1; j < snapshot_.aircraft.size(); ++j)
        stats_.min_separation = std::min(stats_.min_separation, distance(snapshot_.aircraft[i].state.position(),
                                                                         snapshot_.aircraft[j].state.position()));
    if (log_) {
      for (const auto& e : onsets.nmac) log_pair(e, "nmac");
      for (const auto& e : onsets.los) log_pair(e, "los");
    }

    std::vector<Aircraft> kept;
    kept.reserve(traffic_.aircraft.size());
    for (std::size_t i = 0; i < traffic_.aircraft.size(); ++i) {
      if (exiting[i]) {
        ++stats_.exited;
        log_event(traffic_.aircraft[i], "exit");
      } else {
        kept.push_back(traffic_.aircraft[i]);
      }
    }
    traffic_.aircraft = std::move(kept);
    spawn_due();
    return out;
  }

 private:
  void spawn_due() {
    for (std::size_t r = 0; r < pending_.size(); ++r) {
      while (cursor_[r] < pending_[r].size() && pending_[r][cursor_[r]] <= traffic_.time) {
        ++cursor_[r];
        const Route& route = cfg_.network.routes[r];
        Aircraft a;
        a.id = next_id_++;
        a.cursor = RouteCursor{static_cast<int>(r), 1};
        const Vec2 p0 = route.waypoints.front();
        const Vec2 p1 = route.waypoints.at(1);
        a.state = AircraftState{p0.x, p0.y, wrap_angle(std::atan2(p1.y - p0.y, p1.x - p0.x)), cfg_.cruise_speed,
                                route.length(), 0.0};
        traffic_.aircraft.push_back(a);
        ++stats_.spawned;
        log_event(a, "spawn");
      }
    }
  }

  void log_event(const Aircraft& a, const char* type) {
    if (!log_) return;
    *log_ << traffic_.time << ',' << a.id << ',' << a.state.x << ',' << a.state.y << ',' << a.state.speed << ','
          << type << '\n';
  }

  void log_pair(const PairOnset& e, const char* type) {
    for (int id : {e.first, e.second})
      for (const auto& a : snapshot_.aircraft)
        if (a.id == id) log_event(a, type);
  }

  SimConfig cfg_;
  TrafficState traffic_;
  TrafficState snapshot_;
  EpisodeStats stats_;
  EncounterTracker tracker_;
  std::vector<std::vector<double>> pending_;
  std::vector<std::size_t> cursor_;
  int next_id_ = 0;
  std::ostream* log_ = nullptr;
};

inline constexpr const char* kEventLogHeader = "time,id,x,y,v,event";

}  // namespace rsep
