// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance [--criteria 1,2,...] [--workdir DIR] [--seed N]

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "rsep/checkpoint.hpp"
#include "rsep/evaluation.hpp"
#include "rsep/trainer.hpp"
#include "rsep/verify.hpp"

namespace fs = std::filesystem;
using namespace rsep;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int violations(const std::vector<BoundCheckRecord>& recs) {
  int v = 0;
  for (const auto& r : recs) v += r.pass ? 0 : 1;
  return v;
}

Outcome criterion1() {
  VerifyOptions o;
  Stopwatch sw;
  const auto recs = suite_fo_exact(o);
  const double t = sw.seconds();
  double worst = 0.0;
  for (const auto& r : recs) worst = std::max(worst, r.lhs);
  const int v = violations(recs);
  return {v == 0 && worst < 1e-12 && t < 5.0 && recs.size() == 1000u,
          fmt("%zu linear trials, max gap %.3g, %d failures, %.2f s", recs.size(), worst, v, t)};
}

Outcome criterion2() {
  VerifyOptions o;
  Stopwatch sw;
  const auto q = suite_remainder_quadratic(o);
  const auto n = suite_remainder_network(o);
  const double t = sw.seconds();
  const int vq = violations(q), vn = violations(n);
  double ratio = 0.0;
  for (const auto& r : n)
    if (r.rhs > 0) ratio = std::max(ratio, r.lhs / r.rhs);
  return {vq == 0 && vn == 0 && q.size() == 1000u && n.size() == 200u && t < 120.0,
          fmt("%zu quadratic (%d violations), %zu networks (%d violations, max gap/bound %.3f), %.1f s", q.size(), vq,
              n.size(), vn, ratio, t)};
}

Outcome criterion3() {
  VerifyOptions o;
  Stopwatch sw;
  const auto recs = suite_performance(o);
  const auto hand = performance_hand_case();
  const double t = sw.seconds();
  int perf = 0, v = 0;
  for (const auto& r : recs)
    if (r.suite == "performance") {
      ++perf;
      v += r.pass ? 0 : 1;
    }
  const bool hand_ok = std::abs(hand.lhs - 1.0) <= 1e-12 && std::abs(hand.rhs - std::sqrt(2.0 * std::log(2.0))) <= 1e-12 &&
                       hand.pass;
  return {perf == 1000 && v == 0 && hand_ok && t < 60.0,
          fmt("%d toy MDP triples, %d violations; hand case lhs %.15f rhs %.15f; %.1f s", perf, v, hand.lhs, hand.rhs, t)};
}

Outcome criterion4() {
  VerifyOptions o;
  Stopwatch sw;
  const auto recs = suite_contamination(o);
  const double t = sw.seconds();
  const int v = violations(recs);
  double ratio = 0.0;
  for (const auto& r : recs)
    if (r.rhs > 0) ratio = std::max(ratio, r.lhs / r.rhs);
  return {v == 0 && recs.size() == 600u && t < 600.0,
          fmt("%zu (triple, R) checks with %d rollouts each, %d violations beyond 3 sigma, max lhs/rhs %.3f, %.1f s",
              recs.size(), o.rollouts, v, ratio, t)};
}

// Random physical encounter with 0..5 intruders.
StateMatrix encounter(int m, Rng& rng) {
  const int n = static_cast<int>(uniform01(rng) * (m + 1));
  return detail::random_encounter(m, std::min(n, m), 0.05, rng);
}

double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

Outcome criterion5() {
  Stopwatch sw;
  Rng rng(derive_seed(5, {kTrialStream, 50}));
  const Normalizer norm;
  double worst_in = 0.0, worst_param = 0.0;

  // Input gradients of the full-size critic, physical units.
  const NetConfig full;
  for (int t = 0; t < 100; ++t) {
    const PolicyNet net{NetParams::initialized(full, rng), norm};
    const StateMatrix s = encounter(full.max_intruders, rng);
    const auto vg = input_gradient(net, s);
    Eigen::MatrixXd fd = Eigen::MatrixXd::Zero(s.values.rows(), kStateCols);
    for (int r = 0; r < s.values.rows(); ++r) {
      if (!s.row_valid(r)) continue;
      for (int c = 0; c < kStateCols; ++c) {
        const double h = 1e-5;
        StateMatrix a = s, b = s;
        a.values(r, c) += h;
        b.values(r, c) -= h;
        fd(r, c) = (input_gradient(net, a).value - input_gradient(net, b).value) / (2 * h);
      }
    }
    worst_in = std::max(worst_in, rel_err(vg.gradient, fd));
  }

  // Parameter gradients of a reduced network (every coordinate) through a
  // random linear functional of logits and value.
  NetConfig small;
  small.max_intruders = 2;
  small.enc_width = 6;
  small.heads = 2;
  small.head_dim = 3;
  small.trunk_width = 6;
  for (int t = 0; t < 100; ++t) {
    NetParams p = NetParams::initialized(small, rng);
    p.block(kPiW1) *= 100.0;
    p.block(kValW1) *= 10.0;
    std::vector<StateMatrix> batch;
    for (int i = 0; i < 2; ++i) batch.push_back(norm.normalize(encounter(small.max_intruders, rng)));
    Eigen::MatrixXd wl(kActionCount, 2);
    Eigen::RowVectorXd wv(2);
    for (Eigen::Index i = 0; i < wl.size(); ++i) wl(i) = 2 * uniform01(rng) - 1;
    for (Eigen::Index i = 0; i < wv.size(); ++i) wv(i) = 2 * uniform01(rng) - 1;
    auto loss = [&](const NetParams& q) {
      const auto tape = forward(q, batch);
      return (wl.array() * tape.logits.array()).sum() + (wv.array() * tape.value.array()).sum();
    };
    NetParams g = p.zeros_like();
    backward(p, forward(p, batch), wl, wv, &g, nullptr);
    Eigen::VectorXd fd(p.size());
    NetParams work = p;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double x = p.flat()(i), h = 1e-6;
      work.flat()(i) = x + h;
      const double up = loss(work);
      work.flat()(i) = x - h;
      const double down = loss(work);
      work.flat()(i) = x;
      fd(i) = (up - down) / (2 * h);
    }
    worst_param = std::max(worst_param, rel_err(g.flat(), fd));
  }
  const double t = sw.seconds();
  return {worst_in < 1e-4 && worst_param < 1e-4 && t < 60.0,
          fmt("max relative error: input %.3g (full network), parameters %.3g (every coordinate), 100 instances each, "
              "%.1f s",
              worst_in, worst_param, t)};
}

Outcome criterion6(std::uint64_t seed) {
  const Experiment exp;
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.total_steps = std::numeric_limits<std::int64_t>::max();
  PhaseHooks hooks;
  hooks.max_iterations = 50;
  const auto nominal = pretrain_nominal(exp, cfg, hooks);
  cfg.curriculum = {0.0};
  cfg.lambda_inv = 0.0;
  cfg.lambda_anchor = 0.0;
  cfg.init_from_teacher = false;
  const auto robust = robust_train(exp, nominal.net, cfg, hooks);
  int identical = 0;
  const std::size_t n = std::min(nominal.log.size(), robust.log.size());
  for (std::size_t i = 0; i < n; ++i) identical += nominal.log[i].checksum == robust.log[i].checksum ? 1 : 0;
  const bool bits = nominal.net.params.flat().cwiseEqual(robust.net.params.flat()).all();
  return {n == 50 && identical == 50 && bits,
          fmt("%d of %zu iterations with identical parameter checksums; final parameters %s", identical, n,
              bits ? "bit-identical" : "differ")};
}

// Criteria 7 to 9 share three trainings and one paired evaluation.
struct TrendRun {
  PolicyNet teacher, robust, robust_no_inv;
  EvalResult eval;
  double B_inv = 0.0, B_no_inv = 0.0;
  std::int64_t train_box_violations = 0;
};

TrendRun run_trends(std::uint64_t seed, const fs::path& workdir) {
  fs::create_directories(workdir);
  const Experiment exp;
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.total_steps = 200000;
  TrendRun out;
  std::vector<IterationLog> logs;
  PhaseHooks hooks;
  hooks.on_iteration = [&](const IterationLog& l) {
    logs.push_back(l);
    if (l.iteration % 10 == 0)
      spdlog::info("phase {} iter {} steps {} R={:.2f} mean reward {:.4f}", l.phase, l.iteration, l.steps, l.rate,
                   l.mean_reward);
  };
  spdlog::info("nominal training");
  out.teacher = pretrain_nominal(exp, cfg, hooks).net;
  spdlog::info("robust training, lambda_inv = {}", cfg.lambda_inv);
  const auto r1 = robust_train(exp, out.teacher, cfg, hooks);
  out.robust = r1.net;
  TrainConfig ablate = cfg;
  ablate.lambda_inv = 0.0;
  spdlog::info("robust training, lambda_inv = 0");
  const auto r0 = robust_train(exp, out.teacher, ablate, hooks);
  out.robust_no_inv = r0.net;
  out.train_box_violations = r1.box_violations + r0.box_violations;
  save_checkpoint((workdir / "teacher.ckpt").string(), out.teacher);
  save_checkpoint((workdir / "robust.ckpt").string(), out.robust);
  save_checkpoint((workdir / "robust_no_inv.ckpt").string(), out.robust_no_inv);
  {
    std::ofstream os(workdir / "training.csv");
    write_training_csv(os, logs);
  }

  // Same probe data for both runs: states met by the teacher at R = 0, with
  // the teacher's first-order adversary.
  const auto [clean, adv] = collect_probe_pairs(exp, out.teacher, out.teacher, 4096, seed);
  out.B_inv = kl_budget_probe(out.robust, clean, adv);
  out.B_no_inv = kl_budget_probe(out.robust_no_inv, clean, adv);

  EvalConfig ec;
  ec.grid = {0.0, 0.15, 0.35, 0.5, 0.75, 0.95};
  ec.episodes = 100;
  ec.seed = derive_seed(seed, {kEvalStream});
  out.eval = evaluate_policies(exp, {{"nominal", out.teacher}, {"robust", out.robust}}, out.teacher, ec);
  {
    std::ofstream m(workdir / "metrics.csv"), e(workdir / "episodes.csv");
    write_metrics_csv(m, out.eval.records);
    write_episodes_csv(e, out.eval.episodes);
  }
  return out;
}

Outcome criterion7(const TrendRun& t) {
  const auto& ev = t.eval;
  // (a) paired difference at R = 0.
  std::map<int, int> nom0, rob0;
  for (const auto& e : ev.episodes)
    if (e.rate == 0.0) (e.policy == "nominal" ? nom0 : rob0)[e.episode] = e.nmac;
  double paired = 0.0;
  for (const auto& [ep, n] : nom0) paired += rob0.at(ep) - n;
  paired /= static_cast<double>(nom0.size());
  const bool a = std::abs(paired) <= 1.0;
  bool b = true, c = true;
  std::ostringstream cells;
  for (double R : {0.0, 0.15, 0.35, 0.5, 0.75, 0.95}) {
    const auto& n = ev.find("nominal", R);
    const auto& r = ev.find("robust", R);
    cells << fmt(" R=%.2f %.2f/%.2f NMAC %.1f/%.1f m;", R, n.nmac_mean, r.nmac_mean, n.min_sep_mean, r.min_sep_mean);
    if (R >= 0.35) {
      b = b && r.nmac_mean <= n.nmac_mean;
      c = c && r.min_sep_mean >= n.min_sep_mean;
    }
  }
  b = b && ev.find("robust", 0.95).nmac_mean < ev.find("nominal", 0.95).nmac_mean;
  return {a && b && c, fmt("(a) %s paired R=0 difference %+.2f; (b) %s; (c) %s; nominal/robust:", a ? "ok" : "FAILED",
                           paired, b ? "ok" : "FAILED", c ? "ok" : "FAILED") +
                           cells.str()};
}

Outcome criterion8(const TrendRun& t) {
  const double R = 0.35;
  bool pass = t.train_box_violations == 0;
  std::ostringstream d;
  for (const char* tag : {"nominal", "robust"}) {
    const auto& r = t.eval.find(tag, R);
    const double n = static_cast<double>(r.observations);
    const double f = r.corrupted_fraction();
    const double band = 3.0 * std::sqrt(R * (1 - R) / n);
    const bool ok = std::abs(f - R) <= band && r.box_violations == 0 && r.corrupted > 0;
    pass = pass && ok;
    d << fmt("%s: %lld of %.0f observations corrupted (%.4f, band %.4f..%.4f), %lld outside the box; ", tag,
             static_cast<long long>(r.corrupted), n, f, R - band, R + band, static_cast<long long>(r.box_violations));
  }
  for (const auto& r : t.eval.records) pass = pass && r.box_violations == 0;
  d << fmt("training adversarial states outside the box: %lld", static_cast<long long>(t.train_box_violations));
  return {pass, d.str()};
}

Outcome criterion9(const TrendRun& t) {
  return {t.B_inv < t.B_no_inv, fmt("B with lambda_inv = 0.01: %.6g; with lambda_inv = 0: %.6g", t.B_inv, t.B_no_inv)};
}

std::set<int> parse_criteria(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    const int c = std::stoi(tok);
    if (c < 1 || c > 9) throw std::invalid_argument("criteria are numbered 1 to 9");
    out.insert(c);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string which = "1,2,3,4,5,6,7,8,9";
  std::string workdir = "acceptance_run";
  std::uint64_t seed = 7;
  app.add_option("--criteria", which, "Comma-separated criterion numbers");
  app.add_option("--workdir", workdir, "Where criteria 7 to 9 write checkpoints and CSVs");
  app.add_option("--seed", seed, "Seed for training and evaluation");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_pattern("[%H:%M:%S] %v");

  std::set<int> criteria;
  try {
    criteria = parse_criteria(which);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }

  const std::map<int, std::string> names{{1, "closed-form adversary exactness"},
                                         {2, "remainder bound"},
                                         {3, "performance bound"},
                                         {4, "contamination bound"},
                                         {5, "gradient fidelity"},
                                         {6, "PPO reduction identity"},
                                         {7, "desk-scale trends"},
                                         {8, "corruption statistics"},
                                         {9, "regularizer effect"}};
  std::optional<TrendRun> trends;
  int failed = 0;
  for (int c : criteria) {
    Outcome o;
    try {
      switch (c) {
        case 1: o = criterion1(); break;
        case 2: o = criterion2(); break;
        case 3: o = criterion3(); break;
        case 4: o = criterion4(); break;
        case 5: o = criterion5(); break;
        case 6: o = criterion6(seed); break;
        default:
          if (!trends) trends = run_trends(seed, workdir);
          o = c == 7 ? criterion7(*trends) : c == 8 ? criterion8(*trends) : criterion9(*trends);
      }
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << "criterion " << c << " [" << names.at(c) << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
