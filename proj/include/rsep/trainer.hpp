#pragma once

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rsep/adversary.hpp"
#include "rsep/airspace.hpp"
#include "rsep/diffnet.hpp"
#include "rsep/distributions.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"

namespace rsep {

/// The simulated world plus the observation model shared by training and
/// evaluation.
struct Experiment {
  SimConfig sim;
  NetConfig net;
  Normalizer normalizer;
  std::array<double, kStateCols> kappa_columns = CorruptionBounds::default_columns();

  CorruptionBounds bounds() const { return CorruptionBounds::uniform_rows(sim.max_intruders, kappa_columns); }
};

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double lr = 2.5e-4;
  int epochs = 8;
  double value_coef = 0.5;
  double entropy_coef = 0.1;
  double lambda_inv = 0.01;
  double lambda_anchor = 0.01;
  std::vector<double> curriculum{0.0, 0.05, 0.15, 0.25, 0.35, 0.5};
  std::int64_t total_steps = 200000;  // pooled agent transitions per phase
  int batch_size = 4096;
  int minibatch_size = 256;
  double max_grad_norm = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int num_envs = 4;
  std::uint64_t seed = 0;
  bool init_from_teacher = true;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) fail("clip_eps must lie in (0, 1)");
    if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must lie in [0, 1)");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
    for (double v : {lr, value_coef, entropy_coef, lambda_inv, lambda_anchor, max_grad_norm})
      if (!(v >= 0.0)) fail("coefficients must be nonnegative");
    if (epochs < 1 || batch_size < 1 || minibatch_size < 1 || num_envs < 1 || total_steps < 1)
      fail("counts must be positive");
    if (curriculum.empty()) fail("curriculum is empty");
    for (double r : curriculum)
      if (!(r >= 0.0 && r < 1.0)) fail("curriculum rates must lie in [0, 1)");
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, PolicyNet last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const PolicyNet& last_good() const { return last_good_; }

 private:
  PolicyNet last_good_;
};

/// One pooled agent step. The next observation is not copied: `next`
/// links to the same aircraft's following transition in the batch, and
/// `bootstrap_value` holds V(next observation) when that link is absent.
struct Transition {
  StateMatrix observation;  // what the policy acted on
  StateMatrix clean;        // true state at decision time
  StateMatrix adversarial;  // teacher first-order worst case around `clean`
  bool corrupted = false;
  int action = 1;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  StateMatrix next_true;
  bool done = false;
  std::ptrdiff_t next = -1;
  double bootstrap_value = 0.0;
  std::array<double, kActionCount> teacher_prob{1.0 / 3, 1.0 / 3, 1.0 / 3};
  int env = 0;
  int aircraft = 0;
};

struct Batch {
  std::vector<Transition> transitions;
  std::vector<double> completed_returns;  // undiscounted per-flight returns that finished in this batch
  std::int64_t corrupted = 0;
  std::int64_t box_violations = 0;
};

/// Runs `num_envs` independent airspaces in lock-step with one shared
/// policy. Corrupted observations follow the teacher's first-order
/// adversary; without a teacher the adversarial state equals the clean one.
class RolloutCollector {
 public:
  RolloutCollector(const Experiment& exp, int num_envs, std::uint64_t seed) : exp_(exp), bounds_(exp.bounds()), seed_(seed) {
    for (int e = 0; e < num_envs; ++e) {
      slots_.emplace_back(exp.sim);
      auto& s = slots_.back();
      s.action_rng = make_rng(seed, {kActionStream, static_cast<std::uint64_t>(e)});
      s.corruption_rng = make_rng(seed, {kCorruptionStream, static_cast<std::uint64_t>(e)});
      reset_slot(e);
    }
  }

  std::int64_t env_steps() const { return env_steps_; }

  Batch collect(const PolicyNet& policy, const PolicyNet* teacher, double rate, int min_transitions,
                bool need_teacher_probs) {
    Batch batch;
    batch.transitions.reserve(static_cast<std::size_t>(min_transitions) + 256);
    for (auto& s : slots_) s.open.clear();
    while (static_cast<int>(batch.transitions.size()) < min_transitions) {
      // Observations for aircraft that appeared since the last step.
      std::vector<PendingRequest> req;
      for (int e = 0; e < static_cast<int>(slots_.size()); ++e)
        for (const auto& a : slots_[static_cast<std::size_t>(e)].sim.traffic().aircraft)
          if (!slots_[static_cast<std::size_t>(e)].pending.count(a.id))
            req.push_back({e, a.id,
                           assemble_state(slots_[static_cast<std::size_t>(e)].sim.traffic(), a.id,
                                          exp_.sim.reward.detection_radius, exp_.sim.max_intruders)});
      prepare(req, teacher, rate, batch);

      // Act.
      std::vector<StateMatrix> obs;
      std::vector<std::pair<int, int>> who;
      for (int e = 0; e < static_cast<int>(slots_.size()); ++e)
        for (const auto& a : slots_[static_cast<std::size_t>(e)].sim.traffic().aircraft) {
          obs.push_back(exp_.normalizer.normalize(slots_[static_cast<std::size_t>(e)].pending.at(a.id).observation));
          who.emplace_back(e, a.id);
        }
      ForwardTape tape;
      if (!obs.empty()) tape = forward(policy.params, obs);

      std::size_t k = 0;
      std::vector<PendingRequest> next_req;
      std::vector<int> finished;
      for (int e = 0; e < static_cast<int>(slots_.size()); ++e) {
        auto& slot = slots_[static_cast<std::size_t>(e)];
        const std::size_t n = slot.sim.traffic().aircraft.size();
        std::vector<double> commands(n);
        std::vector<std::size_t> index(n);
        for (std::size_t i = 0; i < n; ++i, ++k) {
          const int id = who[k].second;
          const ActionDistribution d = tape.distribution(static_cast<int>(k));
          const int action = sample(d, slot.action_rng);
          Pending& p = slot.pending.at(id);
          Transition tr;
          tr.observation = std::move(p.observation);
          tr.clean = std::move(p.clean);
          tr.adversarial = std::move(p.adversarial);
          tr.corrupted = p.corrupted;
          tr.action = action;
          tr.log_prob = log_prob(d, action);
          tr.value = tape.value(static_cast<Eigen::Index>(k));
          tr.env = e;
          tr.aircraft = id;
          commands[i] = command_mps(action, exp_.sim.reward.speed_step);
          index[i] = batch.transitions.size();
          if (auto it = slot.open.find(id); it != slot.open.end())
            batch.transitions[it->second].next = static_cast<std::ptrdiff_t>(index[i]);
          slot.open[id] = index[i];
          batch.transitions.push_back(std::move(tr));
        }
        slot.pending.clear();
        const auto steps = slot.sim.step(commands);
        ++env_steps_;
        for (std::size_t i = 0; i < n; ++i) {
          Transition& tr = batch.transitions[index[i]];
          tr.reward = steps[i].reward;
          tr.next_true = assemble_state(*steps[i].snapshot, steps[i].id, exp_.sim.reward.detection_radius,
                                        exp_.sim.max_intruders);
          tr.done = steps[i].exited;
          slot.returns[steps[i].id] += tr.reward;
          if (tr.done) {
            batch.completed_returns.push_back(slot.returns[steps[i].id]);
            slot.returns.erase(steps[i].id);
            slot.open.erase(steps[i].id);
          } else {
            next_req.push_back({e, steps[i].id, tr.next_true});
          }
        }
        if (slot.sim.done()) finished.push_back(e);
      }
      prepare(next_req, teacher, rate, batch);

      if (!finished.empty()) {
        bootstrap(policy, batch, finished);
        for (int e : finished) reset_slot(e);
      }
    }
    std::vector<int> all(slots_.size());
    std::iota(all.begin(), all.end(), 0);
    bootstrap(policy, batch, all);

    if (need_teacher_probs && teacher) {
      std::vector<StateMatrix> clean;
      clean.reserve(batch.transitions.size());
      for (const auto& t : batch.transitions) clean.push_back(t.clean);
      const auto out = evaluate(*teacher, clean);
      for (std::size_t i = 0; i < out.size(); ++i) batch.transitions[i].teacher_prob = out[i].dist.prob;
    }
    return batch;
  }

 private:
  struct Pending {
    StateMatrix clean;
    StateMatrix adversarial;
    StateMatrix observation;
    bool corrupted = false;
  };
  struct PendingRequest {
    int env;
    int id;
    StateMatrix clean;
  };
  struct Slot {
    explicit Slot(const SimConfig& c) : sim(c) {}
    Airspace sim;
    Rng action_rng;
    Rng corruption_rng;
    std::uint64_t episodes = 0;
    std::map<int, Pending> pending;
    std::map<int, std::size_t> open;
    std::map<int, double> returns;
  };

  void reset_slot(int e) {
    auto& s = slots_[static_cast<std::size_t>(e)];
    s.sim.reset(derive_seed(seed_, {kEnvStream, static_cast<std::uint64_t>(e), s.episodes++}));
    s.pending.clear();
    s.open.clear();
    s.returns.clear();
  }

  void prepare(std::vector<PendingRequest>& req, const PolicyNet* teacher, double rate, Batch& batch) {
    if (req.empty()) return;
    std::vector<StateMatrix> adv;
    if (teacher) {
      std::vector<StateMatrix> states;
      states.reserve(req.size());
      for (const auto& r : req) states.push_back(r.clean);
      for (auto& o : fo_adversarial_batch(*teacher, states, bounds_)) adv.push_back(std::move(o.perturbed));
    } else {
      for (const auto& r : req) adv.push_back(r.clean);
    }
    for (std::size_t i = 0; i < req.size(); ++i) {
      auto& slot = slots_[static_cast<std::size_t>(req[i].env)];
      if (!in_uncertainty_set(adv[i], req[i].clean, bounds_)) ++batch.box_violations;
      auto sample = sample_observation(req[i].clean, rate, adv[i], bounds_, slot.corruption_rng);
      batch.corrupted += sample.corrupted ? 1 : 0;
      slot.pending[req[i].id] = Pending{std::move(req[i].clean), std::move(adv[i]), std::move(sample.observed),
                                        sample.corrupted};
    }
  }

  // V(next observation) for every still-open transition in the given envs.
  void bootstrap(const PolicyNet& policy, Batch& batch, const std::vector<int>& envs) {
    std::vector<StateMatrix> obs;
    std::vector<std::size_t> target;
    for (int e : envs) {
      auto& slot = slots_[static_cast<std::size_t>(e)];
      for (const auto& [id, idx] : slot.open) {
        obs.push_back(exp_.normalizer.normalize(slot.pending.at(id).observation));
        target.push_back(idx);
      }
      slot.open.clear();
    }
    if (obs.empty()) return;
    const ForwardTape t = forward(policy.params, obs);
    for (std::size_t i = 0; i < target.size(); ++i)
      batch.transitions[target[i]].bootstrap_value = t.value(static_cast<Eigen::Index>(i));
  }

  const Experiment& exp_;
  CorruptionBounds bounds_;
  std::uint64_t seed_;
  std::vector<Slot> slots_;
  std::int64_t env_steps_ = 0;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// GAE over linked transitions: `next[i]` is the index of the same
/// trajectory's following step (or -1), `bootstrap[i]` the value used past
/// a truncation. Terminal steps (`done`) do not bootstrap.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const std::uint8_t> done, std::span<const std::ptrdiff_t> next,
                             std::span<const double> bootstrap, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (n == 0) throw std::invalid_argument("compute_gae: empty trajectory");
  if (values.size() != n || done.size() != n || next.size() != n || bootstrap.size() != n)
    throw std::invalid_argument("compute_gae: length mismatch");
  // Links may point anywhere in the buffer, so walk each chain from its head
  // and fill it back to front.
  std::vector<std::uint8_t> has_pred(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (next[i] < 0) continue;
    const auto j = static_cast<std::size_t>(next[i]);
    if (j >= n || j == i || has_pred[j]) throw std::invalid_argument("compute_gae: malformed links");
    has_pred[j] = 1;
  }
  GaeResult g{std::vector<double>(n), std::vector<double>(n)};
  std::vector<std::size_t> chain;
  std::size_t visited = 0;
  for (std::size_t head = 0; head < n; ++head) {
    if (has_pred[head]) continue;
    chain.clear();
    for (std::ptrdiff_t k = static_cast<std::ptrdiff_t>(head); k >= 0; k = next[static_cast<std::size_t>(k)])
      chain.push_back(static_cast<std::size_t>(k));
    visited += chain.size();
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      const std::size_t ii = *it;
      const bool terminal = done[ii] != 0;
      const bool linked = next[ii] >= 0;
      const double next_value =
          terminal ? 0.0 : (linked ? values[static_cast<std::size_t>(next[ii])] : bootstrap[ii]);
      const double delta = rewards[ii] + gamma * next_value - values[ii];
      const double carry = (!terminal && linked) ? g.advantages[static_cast<std::size_t>(next[ii])] : 0.0;
      g.advantages[ii] = delta + gamma * lambda * carry;
      g.returns[ii] = g.advantages[ii] + values[ii];
    }
  }
  if (visited != n) throw std::invalid_argument("compute_gae: cyclic links");
  return g;
}

/// Single trajectory in time order; `last_value` bootstraps the final step
/// unless it is terminal.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values, bool terminal,
                             double last_value, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  std::vector<std::uint8_t> done(n, 0);
  std::vector<std::ptrdiff_t> next(n);
  std::vector<double> boot(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) next[i] = i + 1 < n ? static_cast<std::ptrdiff_t>(i + 1) : -1;
  if (n) {
    done[n - 1] = terminal ? 1 : 0;
    boot[n - 1] = last_value;
  }
  return compute_gae(rewards, values, done, next, boot, gamma, lambda);
}

inline GaeResult compute_gae(const Batch& b, double gamma, double lambda) {
  const std::size_t n = b.transitions.size();
  std::vector<double> r(n), v(n), boot(n);
  std::vector<std::uint8_t> done(n);
  std::vector<std::ptrdiff_t> next(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = b.transitions[i];
    r[i] = t.reward;
    v[i] = t.value;
    boot[i] = t.bootstrap_value;
    done[i] = t.done ? 1 : 0;
    next[i] = t.next;
  }
  return compute_gae(r, v, done, next, boot, gamma, lambda);
}

/// Zero mean, unit standard deviation (population std, floored at 1e-8).
inline void normalize_advantages(std::vector<double>& a) {
  if (a.empty()) return;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(a.size())), 1e-8);
  for (double& x : a) x = (x - mean) / sd;
}

struct LossBreakdown {
  double clip = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double inv = 0.0;
  double anchor = 0.0;
  double total = 0.0;
  double clip_fraction = 0.0;

  bool finite() const {
    return std::isfinite(clip) && std::isfinite(value) && std::isfinite(entropy) && std::isfinite(inv) &&
           std::isfinite(anchor) && std::isfinite(total);
  }
};

struct LossOptions {
  bool regularizers = false;  // evaluate L_inv / L_anchor (needs adversarial states and teacher probs)
};

/// L_total = L_clip + c_V L_V - c_H H + lambda_inv L_inv + lambda_anchor L_anchor
/// on the transitions `idx`. The ratio uses the stored behavior log-prob.
/// Parameter gradients are accumulated into `grad` when given.
inline LossBreakdown ppo_losses(const PolicyNet& net, const Batch& batch, std::span<const std::size_t> idx,
                                std::span<const double> advantages, std::span<const double> returns,
                                const TrainConfig& cfg, const LossOptions& opt, NetParams* grad) {
  const int M = static_cast<int>(idx.size());
  if (M == 0) return {};
  const double inv_m = 1.0 / M;
  LossBreakdown L;

  std::vector<StateMatrix> obs(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) obs[static_cast<std::size_t>(i)] = net.normalizer.normalize(batch.transitions[idx[static_cast<std::size_t>(i)]].observation);
  const ForwardTape t_obs = forward(net.params, obs);
  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(kActionCount, M);
  Eigen::RowVectorXd d_value = Eigen::RowVectorXd::Zero(M);
  for (int i = 0; i < M; ++i) {
    const std::size_t j = idx[static_cast<std::size_t>(i)];
    const Transition& tr = batch.transitions[j];
    const ActionDistribution d = t_obs.distribution(i);
    const double A = advantages[j];
    const double ratio = std::exp(log_prob(d, tr.action) - tr.log_prob);
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    L.clip -= std::min(ratio * A, clipped * A) * inv_m;
    const bool clip_active = (A > 0.0 && ratio > 1.0 + cfg.clip_eps) || (A < 0.0 && ratio < 1.0 - cfg.clip_eps);
    if (clip_active) L.clip_fraction += inv_m;
    Eigen::Vector3d d_logp = Eigen::Vector3d::Zero();
    if (!clip_active) d_logp(tr.action) = -ratio * A * inv_m;
    Eigen::Vector3d dz = logits_from_logprob_grad(d, d_logp);

    const double h = entropy(d);
    L.entropy += h * inv_m;
    for (int a = 0; a < kActionCount; ++a)
      dz(a) += cfg.entropy_coef * inv_m * d.prob[static_cast<std::size_t>(a)] * (d.log_prob[static_cast<std::size_t>(a)] + h);
    d_logits.col(i) = dz;

    const double err = t_obs.value(i) - returns[j];
    L.value += err * err * inv_m;
    d_value(i) = cfg.value_coef * 2.0 * err * inv_m;
  }
  if (grad) backward(net.params, t_obs, d_logits, d_value, grad, nullptr);

  if (opt.regularizers) {
    std::vector<StateMatrix> clean(static_cast<std::size_t>(M)), adv(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
      const auto& tr = batch.transitions[idx[static_cast<std::size_t>(i)]];
      clean[static_cast<std::size_t>(i)] = net.normalizer.normalize(tr.clean);
      adv[static_cast<std::size_t>(i)] = net.normalizer.normalize(tr.adversarial);
    }
    const ForwardTape t_clean = forward(net.params, clean);
    const ForwardTape t_adv = forward(net.params, adv);
    Eigen::MatrixXd dz_clean = Eigen::MatrixXd::Zero(kActionCount, M);
    Eigen::MatrixXd dz_adv = Eigen::MatrixXd::Zero(kActionCount, M);
    for (int i = 0; i < M; ++i) {
      const auto& tr = batch.transitions[idx[static_cast<std::size_t>(i)]];
      const ActionDistribution p = t_clean.distribution(i);
      const ActionDistribution q = t_adv.distribution(i);
      const ActionDistribution teach = ActionDistribution::from_probs(tr.teacher_prob);
      L.inv += kl(p, q) * inv_m;
      L.anchor += kl(teach, p) * inv_m;
      Eigen::Vector3d dp = Eigen::Vector3d::Zero(), dq = Eigen::Vector3d::Zero();
      for (int a = 0; a < kActionCount; ++a) {
        const auto u = static_cast<std::size_t>(a);
        const double pf = std::max(p.prob[u], kProbFloor), qf = std::max(q.prob[u], kProbFloor);
        if (p.prob[u] > 0.0) {
          dp(a) += cfg.lambda_inv * inv_m * (std::log(pf) - std::log(qf) + (p.prob[u] > kProbFloor ? 1.0 : 0.0));
          if (q.prob[u] > kProbFloor) dq(a) -= cfg.lambda_inv * inv_m * p.prob[u] / q.prob[u];
        }
        if (teach.prob[u] > 0.0 && p.prob[u] > kProbFloor)
          dp(a) -= cfg.lambda_anchor * inv_m * teach.prob[u] / p.prob[u];
      }
      dz_clean.col(i) = logits_from_prob_grad(p, dp);
      dz_adv.col(i) = logits_from_prob_grad(q, dq);
    }
    if (grad && cfg.lambda_inv + cfg.lambda_anchor > 0.0) {
      const Eigen::RowVectorXd zero = Eigen::RowVectorXd::Zero(M);
      backward(net.params, t_clean, dz_clean, zero, grad, nullptr);
      if (cfg.lambda_inv > 0.0) backward(net.params, t_adv, dz_adv, zero, grad, nullptr);
    }
  }
  L.total = L.clip + cfg.value_coef * L.value - cfg.entropy_coef * L.entropy + cfg.lambda_inv * L.inv +
            cfg.lambda_anchor * L.anchor;
  return L;
}

/// Adaptive-moment gradient descent on a flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index n, double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& x, const Eigen::VectorXd& g) {
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * g;
    v_ = b2_ * v_ + (1.0 - b2_) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    x.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  double lr_, b1_, b2_, eps_;
  Eigen::VectorXd m_, v_;
  std::int64_t t_ = 0;
};

inline void clip_grad_norm(Eigen::VectorXd& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0.0 && n > max_norm) g *= max_norm / n;
}

/// Mean KL(pi(.|S) || pi(.|Xi)) over (clean, adversarial) pairs.
inline double kl_budget_probe(const PolicyNet& policy, std::span<const StateMatrix> clean,
                              std::span<const StateMatrix> adversarial) {
  if (clean.empty() || clean.size() != adversarial.size())
    throw std::invalid_argument("kl_budget_probe: need equally sized, nonempty datasets");
  const auto p = evaluate(policy, clean);
  const auto q = evaluate(policy, adversarial);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += kl(p[i].dist, q[i].dist);
  return s / static_cast<double>(p.size());
}

struct IterationLog {
  int phase = 1;
  int iteration = 0;
  std::int64_t steps = 0;
  double rate = 0.0;
  double mean_return = std::numeric_limits<double>::quiet_NaN();
  double mean_reward = 0.0;
  LossBreakdown loss;
  double kl_probe = std::numeric_limits<double>::quiet_NaN();
  double corrupted_fraction = 0.0;
  std::uint64_t checksum = 0;
};

inline constexpr const char* kTrainingCsvHeader =
    "phase,iteration,steps,R,mean_return,mean_reward,loss_clip,loss_value,entropy,loss_inv,loss_anchor,loss_total,"
    "clip_fraction,kl_probe,corrupted_fraction";

struct PhaseResult {
  PolicyNet net;
  std::vector<IterationLog> log;
  std::int64_t box_violations = 0;
  std::int64_t reward_mismatches = 0;
};

struct PhaseHooks {
  std::function<void(const IterationLog&)> on_iteration;
  std::function<void(const Batch&)> on_batch;
  int max_iterations = -1;
};

/// One uniform draw from the curriculum.
inline double draw_rate(const std::vector<double>& curriculum, Rng& rng) {
  if (curriculum.empty()) throw std::invalid_argument("draw_rate: empty curriculum");
  std::uniform_int_distribution<std::size_t> pick(0, curriculum.size() - 1);
  return curriculum[pick(rng)];
}

/// Shared PPO loop. With `teacher` unset this is nominal training (every
/// observation clean, no regularizers). With a teacher, each iteration draws
/// R uniformly from `cfg.curriculum`, corrupts observations through the
/// teacher's first-order adversary and adds the KL regularizers.
inline PhaseResult train_phase(const Experiment& exp, const TrainConfig& cfg, const PolicyNet* teacher, int phase,
                               const PhaseHooks& hooks = {}) {
  cfg.validate();
  PhaseResult out;
  Rng init_rng = make_rng(cfg.seed, {kInitStream});
  if (teacher && cfg.init_from_teacher) {
    out.net = *teacher;
  } else {
    out.net = PolicyNet{NetParams::initialized(exp.net, init_rng), exp.normalizer};
  }
  const std::vector<double> curriculum = teacher ? cfg.curriculum : std::vector<double>{0.0};
  Rng curriculum_rng = make_rng(cfg.seed, {kCurriculumStream});
  Rng update_rng = make_rng(cfg.seed, {kUpdateStream});
  RolloutCollector collector(exp, cfg.num_envs, cfg.seed);
  Adam adam(out.net.params.size(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const LossOptions opt{teacher != nullptr};
  const std::uint64_t teacher_sum = teacher ? teacher->params.checksum() : 0;

  std::int64_t steps = 0;
  for (int it = 0; steps < cfg.total_steps; ++it) {
    if (hooks.max_iterations >= 0 && it >= hooks.max_iterations) break;
    const double rate = draw_rate(curriculum, curriculum_rng);
    Batch batch = collector.collect(out.net, teacher, rate, cfg.batch_size, opt.regularizers);
    steps += static_cast<std::int64_t>(batch.transitions.size());
    out.box_violations += batch.box_violations;
    for (const auto& t : batch.transitions)
      if (reward_from_distances(intruder_distances(t.next_true), command_mps(t.action, exp.sim.reward.speed_step),
                                exp.sim.reward) != t.reward)
        ++out.reward_mismatches;
    if (hooks.on_batch) hooks.on_batch(batch);

    GaeResult gae = compute_gae(batch, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(gae.advantages);

    std::vector<std::size_t> order(batch.transitions.size());
    std::iota(order.begin(), order.end(), 0);
    LossBreakdown mean_loss;
    int updates = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), update_rng);
      for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.minibatch_size)) {
        const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.minibatch_size));
        NetParams grad = out.net.params.zeros_like();
        LossBreakdown L;
        try {
          L = ppo_losses(out.net, batch, std::span<const std::size_t>(order).subspan(lo, hi - lo), gae.advantages,
                         gae.returns, cfg, opt, &grad);
        } catch (const std::runtime_error& e) {
          throw TrainingDiverged(std::string("training diverged: ") + e.what(), out.net);
        }
        if (!L.finite() || !grad.flat().allFinite())
          throw TrainingDiverged("training diverged: non-finite loss at iteration " + std::to_string(it), out.net);
        clip_grad_norm(grad.flat(), cfg.max_grad_norm);
        adam.step(out.net.params.flat(), grad.flat());
        if (epoch == cfg.epochs - 1) {
          mean_loss.clip += L.clip;
          mean_loss.value += L.value;
          mean_loss.entropy += L.entropy;
          mean_loss.inv += L.inv;
          mean_loss.anchor += L.anchor;
          mean_loss.total += L.total;
          mean_loss.clip_fraction += L.clip_fraction;
          ++updates;
        }
      }
    }
    if (updates > 0) {
      for (double* v : {&mean_loss.clip, &mean_loss.value, &mean_loss.entropy, &mean_loss.inv, &mean_loss.anchor,
                        &mean_loss.total, &mean_loss.clip_fraction})
        *v /= updates;
    }

    IterationLog log;
    log.phase = phase;
    log.iteration = it;
    log.steps = steps;
    log.rate = rate;
    if (!batch.completed_returns.empty())
      log.mean_return = std::accumulate(batch.completed_returns.begin(), batch.completed_returns.end(), 0.0) /
                        static_cast<double>(batch.completed_returns.size());
    double rsum = 0.0;
    for (const auto& t : batch.transitions) rsum += t.reward;
    log.mean_reward = rsum / static_cast<double>(batch.transitions.size());
    log.loss = mean_loss;
    log.corrupted_fraction = static_cast<double>(batch.corrupted) / static_cast<double>(batch.transitions.size());
    if (teacher) {
      std::vector<StateMatrix> clean, adv;
      clean.reserve(batch.transitions.size());
      adv.reserve(batch.transitions.size());
      for (const auto& t : batch.transitions) {
        clean.push_back(t.clean);
        adv.push_back(t.adversarial);
      }
      log.kl_probe = kl_budget_probe(out.net, clean, adv);
    }
    log.checksum = out.net.params.checksum();
    out.log.push_back(log);
    spdlog::debug("phase {} iter {} steps {} R={:.2f} return={:.3f} reward={:.4f} total={:.4f} H={:.3f}", phase, it,
                  steps, rate, log.mean_return, log.mean_reward, mean_loss.total, mean_loss.entropy);
    if (hooks.on_iteration) hooks.on_iteration(log);
  }
  if (teacher && teacher->params.checksum() != teacher_sum)
    throw std::logic_error("teacher parameters changed during robust training");
  return out;
}

/// Nominal teacher: clean observations throughout.
inline PhaseResult pretrain_nominal(const Experiment& exp, const TrainConfig& cfg, const PhaseHooks& hooks = {}) {
  TrainConfig c = cfg;
  c.lambda_inv = 0.0;
  c.lambda_anchor = 0.0;
  return train_phase(exp, c, nullptr, 1, hooks);
}

/// Robust student trained against the frozen teacher's adversary.
inline PhaseResult robust_train(const Experiment& exp, const PolicyNet& teacher, const TrainConfig& cfg,
                                const PhaseHooks& hooks = {}) {
  return train_phase(exp, cfg, &teacher, 2, hooks);
}

/// (clean, adversarial) pairs seen by `policy` flying at R = 0, with the
/// adversary built from `critic`.
inline std::pair<std::vector<StateMatrix>, std::vector<StateMatrix>> collect_probe_pairs(
    const Experiment& exp, const PolicyNet& policy, const PolicyNet& critic, int count, std::uint64_t seed) {
  RolloutCollector collector(exp, 1, derive_seed(seed, {kProbeStream}));
  std::vector<StateMatrix> clean, adv;
  while (static_cast<int>(clean.size()) < count) {
    Batch b = collector.collect(policy, &critic, 0.0, std::min(count, 1024), false);
    for (auto& t : b.transitions) {
      if (static_cast<int>(clean.size()) >= count) break;
      clean.push_back(std::move(t.clean));
      adv.push_back(std::move(t.adversarial));
    }
  }
  return {std::move(clean), std::move(adv)};
}

}  // namespace rsep
