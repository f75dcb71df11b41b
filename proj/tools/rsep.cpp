// rsep: train, evaluate and bound-check robust separation policies.
//
// Exit codes: 0 success, 1 unexpected failure, 2 bad config or arguments,
// 3 training diverged, 4 checkpoint version mismatch, 5 bound violations.

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "rsep/checkpoint.hpp"
#include "rsep/config.hpp"
#include "rsep/evaluation.hpp"
#include "rsep/trainer.hpp"
#include "rsep/verify.hpp"

namespace fs = std::filesystem;
using namespace rsep;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kBadInput = 2, kDiverged = 3, kVersion = 4, kViolations = 5 };

void warn_unused(const Config& c) {
  for (const auto& k : c.unused_keys()) spdlog::warn("config key '{}' is not used", k);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  const Config cfg = Config::load(config_path);
  const Experiment exp = experiment_from(cfg);
  const TrainConfig tc = train_config_from(cfg);
  warn_unused(cfg);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  std::vector<IterationLog> logs;
  PhaseHooks hooks;
  hooks.on_iteration = [&](const IterationLog& l) {
    logs.push_back(l);
    spdlog::info("phase {} iter {:4d} steps {:8d} R={:.2f} mean reward {:.4f} entropy {:.3f}", l.phase, l.iteration,
                 l.steps, l.rate, l.mean_reward, l.loss.entropy);
  };
  auto dump_log = [&] {
    auto os = open_out(out / "training.csv");
    write_training_csv(os, logs);
  };
  try {
    spdlog::info("phase 1: nominal pretraining, {} steps", tc.total_steps);
    const PhaseResult teacher = pretrain_nominal(exp, tc, hooks);
    save_checkpoint((out / "teacher.ckpt").string(), teacher.net);
    spdlog::info("phase 2: robust training, {} steps", tc.total_steps);
    const PhaseResult robust = robust_train(exp, teacher.net, tc, hooks);
    save_checkpoint((out / "robust.ckpt").string(), robust.net);
    if (teacher.reward_mismatches + robust.reward_mismatches > 0)
      spdlog::warn("{} stored rewards disagreed with their true next state",
                   teacher.reward_mismatches + robust.reward_mismatches);
    if (robust.box_violations > 0) spdlog::warn("{} adversarial states left the uncertainty box", robust.box_violations);
  } catch (const TrainingDiverged& e) {
    dump_log();
    const fs::path p = out / "diverged.ckpt";
    save_checkpoint(p.string(), e.last_good());
    spdlog::error("{}; last finite parameters saved to {}", e.what(), p.string());
    return kDiverged;
  }
  dump_log();
  spdlog::info("wrote {}, {}, {}", (out / "teacher.ckpt").string(), (out / "robust.ckpt").string(),
               (out / "training.csv").string());
  return kOk;
}

struct EvalArgs {
  std::string config;
  std::string grid;
  int episodes = -1;
  long long seed = -1;
  std::string out;
  std::vector<std::string> policies;
  std::string teacher;
  std::string checkpoints;
  bool stochastic = false;
};

int cmd_eval(const EvalArgs& a) {
  const Config cfg = Config::load(a.config);
  const Experiment exp = experiment_from(cfg);
  EvalConfig ec;
  ec.grid = a.grid.empty() ? (cfg.has("eval.grid") ? parse_grid(cfg.raw("eval.grid")) : default_grid()) : parse_grid(a.grid);
  ec.episodes = a.episodes > 0 ? a.episodes : static_cast<int>(cfg.integer("eval.episodes", 100));
  ec.seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : static_cast<std::uint64_t>(cfg.integer("seed", 0));
  ec.greedy = !a.stochastic;
  ec.validate();

  const fs::path ckdir(a.checkpoints.empty() ? a.out : a.checkpoints);
  std::vector<NamedPolicy> policies;
  if (a.policies.empty()) {
    policies.push_back({"nominal", load_checkpoint((ckdir / "teacher.ckpt").string())});
    policies.push_back({"robust", load_checkpoint((ckdir / "robust.ckpt").string())});
  } else {
    for (const auto& spec : a.policies) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--policy", "expected tag=path, got " + spec);
      policies.push_back({spec.substr(0, eq), load_checkpoint(spec.substr(eq + 1))});
    }
  }
  const PolicyNet critic = load_checkpoint(a.teacher.empty() ? (ckdir / "teacher.ckpt").string() : a.teacher);
  for (const auto& p : policies)
    if (p.net.params.config().max_intruders != exp.sim.max_intruders)
      throw ConfigError("policy '" + p.tag + "' was built for a different max_intruders");

  const EvalResult res = evaluate_policies(exp, policies, critic, ec);
  fs::create_directories(a.out);
  {
    auto os = open_out(fs::path(a.out) / "metrics.csv");
    write_metrics_csv(os, res.records);
  }
  {
    auto os = open_out(fs::path(a.out) / "episodes.csv");
    write_episodes_csv(os, res.episodes);
  }
  spdlog::info("wrote {}", (fs::path(a.out) / "metrics.csv").string());
  return kOk;
}

int cmd_verify(int trials, bool quick, const std::string& out_dir, bool inject_fault, long long seed) {
  VerifyOptions o = quick ? VerifyOptions::quick(trials > 0 ? trials : 10) : VerifyOptions{};
  if (!quick && trials > 0) {
    o.trials = trials;
    o.network_trials = std::max(1, trials / 5);
    o.contamination_trials = std::max(1, trials / 5);
  }
  if (seed >= 0) o.seed = static_cast<std::uint64_t>(seed);
  if (inject_fault) o.rhs_scale = 0.01;
  const auto recs = run_all_suites(o);
  int violations = 0;
  for (const auto& [suite, s] : summarize(recs)) {
    spdlog::info("{:<20} checks {:5d} violations {:3d} max lhs/rhs {:.4f}", suite, s.checks, s.violations, s.max_ratio);
    violations += s.violations;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    auto os = open_out(fs::path(out_dir) / "bounds.csv");
    write_bounds_csv(os, recs);
  }
  if (violations > 0) {
    spdlog::error("{} bound violations", violations);
    return kViolations;
  }
  spdlog::info("all bounds hold");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("rsep"));
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::cfg::load_env_levels();

  CLI::App app{"Robust separation assurance: training, evaluation and bound checks"};
  app.require_subcommand(1);

  std::string train_config, train_out = "out";
  auto* train = app.add_subcommand("train", "Nominal pretraining followed by robust training");
  train->add_option("--config", train_config, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Output directory")->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Paired evaluation over a grid of corruption rates");
  eval->add_option("--config", ea.config, "Config file")->required()->check(CLI::ExistingFile);
  eval->add_option("--grid", ea.grid, "R values as a:b:step or a comma list (default 0:0.95:0.05)");
  eval->add_option("--episodes", ea.episodes, "Episodes per (R, policy)");
  eval->add_option("--seed", ea.seed, "Evaluation seed");
  eval->add_option("--out", ea.out, "Output directory")->required();
  eval->add_option("--policy", ea.policies, "tag=checkpoint, repeatable (default nominal and robust from --checkpoints)");
  eval->add_option("--teacher", ea.teacher, "Checkpoint whose critic drives the adversary");
  eval->add_option("--checkpoints", ea.checkpoints, "Directory holding teacher.ckpt and robust.ckpt (default --out)");
  eval->add_flag("--stochastic", ea.stochastic, "Sample actions instead of taking the most likely one");

  int trials = 0;
  bool quick = false, inject = false;
  long long vseed = -1;
  std::string verify_out;
  auto* verify = app.add_subcommand("verify-bounds", "Randomized checks of the adversary and value bounds");
  verify->add_option("--trials", trials, "Trials per suite");
  verify->add_flag("--quick", quick, "Small suites with fewer Monte Carlo rollouts");
  verify->add_option("--out", verify_out, "Directory for bounds.csv");
  verify->add_option("--seed", vseed, "Suite seed");
  verify->add_flag("--inject-fault", inject, "Scale every bound by 0.01 to exercise the checker");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*train) return cmd_train(train_config, train_out);
    if (*eval) return cmd_eval(ea);
    if (*verify) return cmd_verify(trials, quick, verify_out, inject, vseed);
  } catch (const MissingKeyError& e) {
    spdlog::error("{}", e.what());
    return kBadInput;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kBadInput;
  } catch (const CLI::ValidationError& e) {
    spdlog::error("{}", e.what());
    return kBadInput;
  } catch (const CheckpointVersionError& e) {
    spdlog::error("{}", e.what());
    return kVersion;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kBadInput;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kFailure;
}
