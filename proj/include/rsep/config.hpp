#pragma once

// Scenario/training config files are plain `key = value` lines. Blank lines
// and text after '#' are ignored. Lists are whitespace or comma separated;
// route waypoints are "x y; x y; ...".
//
// Required: seed, total_steps, arrival_rate.
// Optional keys and their defaults are listed in README.md.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsep/airspace.hpp"
#include "rsep/diffnet.hpp"
#include "rsep/observation.hpp"
#include "rsep/trainer.hpp"

namespace rsep {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingKeyError : public ConfigError {
 public:
  explicit MissingKeyError(const std::string& key) : ConfigError("missing required config key '" + key + "'"), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse number '" + text + "'");
  }
  if (trim(text.substr(used)).size()) throw ConfigError("config key '" + key + "': trailing text in '" + text + "'");
  return v;
}

}  // namespace detail

class Config {
 public:
  static Config parse(std::istream& in) {
    Config c;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
      const std::string key = detail::trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
      if (c.values_.count(key)) throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
      c.values_[key] = detail::trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw MissingKeyError(key);
    used_.insert(key);
    return it->second;
  }

  double number(const std::string& key) const { return detail::parse_double(key, raw(key)); }
  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

  std::int64_t integer(const std::string& key) const {
    const double v = number(key);
    if (v != std::floor(v)) throw ConfigError("config key '" + key + "' must be an integer");
    return static_cast<std::int64_t>(v);
  }
  std::int64_t integer(const std::string& key, std::int64_t fallback) const { return has(key) ? integer(key) : fallback; }

  std::string text(const std::string& key, const std::string& fallback) const { return has(key) ? raw(key) : fallback; }

  std::vector<double> list(const std::string& key) const {
    std::string s = raw(key);
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    std::vector<double> out;
    std::string tok;
    while (is >> tok) out.push_back(detail::parse_double(key, tok));
    return out;
  }

  std::vector<double> list(const std::string& key, std::size_t expected) const {
    auto v = list(key);
    if (v.size() != expected)
      throw ConfigError("config key '" + key + "' needs " + std::to_string(expected) + " values, got " +
                        std::to_string(v.size()));
    return v;
  }

  std::vector<Vec2> points(const std::string& key) const {
    std::vector<Vec2> pts;
    std::stringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ';')) {
      if (detail::trim(item).empty()) continue;
      std::istringstream is(item);
      std::string a, b, extra;
      if (!(is >> a >> b) || (is >> extra)) throw ConfigError("config key '" + key + "': waypoint '" + item + "' is not 'x y'");
      pts.push_back({detail::parse_double(key, a), detail::parse_double(key, b)});
    }
    return pts;
  }

  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

inline SimConfig sim_config_from(const Config& c) {
  SimConfig s;
  s.arrival_rate = c.number("arrival_rate");
  s.min_headway = c.number("min_headway", s.min_headway);
  s.cruise_speed = c.number("cruise_speed", s.cruise_speed);
  s.limits.min = c.number("speed_min", s.limits.min);
  s.limits.max = c.number("speed_max", s.limits.max);
  s.wind.east = c.number("wind_east", s.wind.east);
  s.wind.north = c.number("wind_north", s.wind.north);
  s.dt = c.number("dt", s.dt);
  s.episode_length = c.number("episode_length", s.episode_length);
  s.max_spawns_per_route = static_cast<int>(c.integer("max_spawns_per_route", s.max_spawns_per_route));
  s.max_intruders = static_cast<int>(c.integer("max_intruders", s.max_intruders));
  s.network.capture_radius = c.number("capture_radius", s.network.capture_radius);
  if (c.has("route.0")) {
    s.network.routes.clear();
    for (int r = 0; c.has("route." + std::to_string(r)); ++r) s.network.routes.push_back(Route{c.points("route." + std::to_string(r))});
  }
  RewardParams& p = s.reward;
  p.alpha = c.number("reward.alpha", p.alpha);
  p.beta = c.number("reward.beta", p.beta);
  p.nmac_penalty = c.number("reward.nmac_penalty", p.nmac_penalty);
  p.action_weight = c.number("reward.action_weight", p.action_weight);
  p.protected_radius = c.number("protected_radius", p.protected_radius);
  p.detection_radius = c.number("detection_radius", p.detection_radius);
  s.validate();
  return s;
}

inline NetConfig net_config_from(const Config& c, int max_intruders) {
  NetConfig n;
  n.max_intruders = max_intruders;
  n.enc_width = static_cast<int>(c.integer("net.enc_width", n.enc_width));
  n.heads = static_cast<int>(c.integer("net.heads", n.heads));
  n.head_dim = static_cast<int>(c.integer("net.head_dim", n.head_dim));
  n.trunk_width = static_cast<int>(c.integer("net.trunk_width", n.trunk_width));
  n.leaky_slope = c.number("net.leaky_slope", n.leaky_slope);
  n.rel_gain_x = c.number("net.rel_gain_x", n.rel_gain_x);
  n.rel_gain_y = c.number("net.rel_gain_y", n.rel_gain_y);
  return n;
}

inline Experiment experiment_from(const Config& c) {
  Experiment e;
  e.sim = sim_config_from(c);
  e.net = net_config_from(c, e.sim.max_intruders);
  if (c.has("norm.offset")) {
    const auto v = c.list("norm.offset", kStateCols);
    std::copy(v.begin(), v.end(), e.normalizer.offset.begin());
  }
  if (c.has("norm.scale")) {
    const auto v = c.list("norm.scale", kStateCols);
    std::copy(v.begin(), v.end(), e.normalizer.scale.begin());
  }
  e.normalizer.validate();
  if (c.has("kappa")) {
    const auto v = c.list("kappa", kStateCols);
    std::copy(v.begin(), v.end(), e.kappa_columns.begin());
    if (c.has("kappa.heading_deg")) throw ConfigError("give either kappa or kappa.heading_deg, not both");
  }
  if (c.has("kappa.heading_deg")) e.kappa_columns[kColHeading] = c.number("kappa.heading_deg") * std::numbers::pi / 180.0;
  for (double k : e.kappa_columns)
    if (!(k >= 0.0)) throw ConfigError("kappa entries must be nonnegative");
  return e;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.seed = static_cast<std::uint64_t>(c.integer("seed"));
  t.total_steps = c.integer("total_steps");
  t.gamma = c.number("ppo.gamma", t.gamma);
  t.gae_lambda = c.number("ppo.gae_lambda", t.gae_lambda);
  t.clip_eps = c.number("ppo.clip_eps", t.clip_eps);
  t.lr = c.number("ppo.lr", t.lr);
  t.epochs = static_cast<int>(c.integer("ppo.epochs", t.epochs));
  t.value_coef = c.number("ppo.value_coef", t.value_coef);
  t.entropy_coef = c.number("ppo.entropy_coef", t.entropy_coef);
  t.batch_size = static_cast<int>(c.integer("ppo.batch_size", t.batch_size));
  t.minibatch_size = static_cast<int>(c.integer("ppo.minibatch_size", t.minibatch_size));
  t.max_grad_norm = c.number("ppo.max_grad_norm", t.max_grad_norm);
  t.num_envs = static_cast<int>(c.integer("ppo.num_envs", t.num_envs));
  t.lambda_inv = c.number("robust.lambda_inv", t.lambda_inv);
  t.lambda_anchor = c.number("robust.lambda_anchor", t.lambda_anchor);
  if (c.has("robust.curriculum")) t.curriculum = c.list("robust.curriculum");
  const std::string init = c.text("robust.init", "teacher");
  if (init != "fresh" && init != "teacher") throw ConfigError("robust.init must be 'fresh' or 'teacher'");
  t.init_from_teacher = init == "teacher";
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return t;
}

}  // namespace rsep
