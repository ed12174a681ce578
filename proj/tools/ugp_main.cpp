#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>

#include "ugp/bridge.hpp"
#include "ugp/checkpoint.hpp"
#include "ugp/errors.hpp"
#include "ugp/experiments.hpp"

namespace {

using namespace ugp;

std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  for (const std::string& item : split_list(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad lambda '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("--lambdas needs at least one value");
  return out;
}

struct StudyArgs {
  double scale = 1.0;
  std::size_t seeds = 3;
  std::uint64_t first_seed = 1;
  std::string out = "ugp-out";
  std::string config;
  std::size_t eval_episodes = 100;
  bool eval_greedy = false;
  bool quiet = false;
};

void add_study_options(CLI::App* cmd, StudyArgs& a) {
  cmd->add_option("--scale", a.scale, "Budget scale; E = 3000 * scale episodes")->check(CLI::PositiveNumber);
  cmd->add_option("--seeds", a.seeds, "Number of seeds")->check(CLI::PositiveNumber);
  cmd->add_option("--first-seed", a.first_seed, "First seed");
  cmd->add_option("--out", a.out, "Output directory (UGP_OUT overrides)");
  cmd->add_option("--config", a.config, "key = value file with hyperparameter overrides");
  cmd->add_option("--eval-episodes", a.eval_episodes, "Episodes per evaluation checkpoint");
  cmd->add_flag("--eval-greedy", a.eval_greedy, "Evaluate with argmax actions instead of sampling");
  cmd->add_flag("--quiet", a.quiet, "No progress lines");
}

StudySettings study_settings(const StudyArgs& a) {
  StudySettings s;
  s.scale = a.scale;
  s.seeds = a.seeds;
  s.first_seed = a.first_seed;
  s.out = resolve_output_dir(a.out);
  s.eval_episodes = a.eval_episodes;
  s.eval_greedy = a.eval_greedy;
  s.verbose = !a.quiet;
  if (!a.config.empty()) {
    const KeyValueConfig config = KeyValueConfig::load(a.config);
    s.hyper.apply(config);
    s.fisher_samples = config.get_size("fisher_samples", s.fisher_samples);
    s.single_actors = config.get_size("single_actors", s.single_actors);
    s.hybrid_actors_per_task = config.get_size("hybrid_actors_per_task", s.hybrid_actors_per_task);
    s.base_episodes = config.get_size("base_episodes", s.base_episodes);
    s.eval_divisions = config.get_size("eval_divisions", s.eval_divisions);
    if (auto unused = config.unused_keys(); !unused.empty()) {
      throw ConfigError("unknown config key '" + unused.front() + "'");
    }
  }
  return s;
}

void print_report(const StudyReport& r) {
  std::printf("wrote %zu report files under %s (%.1f s)\n", r.files.size(), (r.out / "report").string().c_str(),
              r.seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task actor-critic training engine with elastic weight consolidation"};
  app.require_subcommand(1);

  std::string config_path, train_out;
  auto* train = app.add_subcommand("train", "Run a key = value experiment plan");
  train->add_option("--config", config_path, "Plan file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Output directory (overrides the plan's 'out'; UGP_OUT overrides both)");
  std::string train_server;
  train->add_option("--env-server", train_server, "host:port of an environment server for non-built-in tasks");

  StudyArgs s1, s2;
  auto* study1 = app.add_subcommand("study1", "Transfer study: single-task agents vs the hybrid on shooter-c");
  add_study_options(study1, s1);
  auto* study2 = app.add_subcommand("study2", "Forgetting study: hybrid + consolidation per lambda");
  add_study_options(study2, s2);
  std::string lambdas = "0,50,100";
  study2->add_option("--lambdas", lambdas, "Comma-separated consolidation strengths");

  std::string ckpt, task, eval_server;
  std::size_t episodes = 100;
  std::uint64_t eval_seed = 0;
  bool greedy = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one task");
  eval->add_option("--checkpoint", ckpt, "Agent or params checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", task, "Task name")->required();
  eval->add_option("--episodes", episodes, "Episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Evaluation seed");
  eval->add_flag("--eval-greedy", greedy, "Argmax actions instead of sampling");
  eval->add_option("--env-server", eval_server, "host:port of an environment server");

  std::string probe_server, probe_env = "null-env";
  auto* check = app.add_subcommand("serve-check", "Probe an environment server for protocol conformance");
  check->add_option("--env-server", probe_server, "host:port")->required();
  check->add_option("--env", probe_env, "Environment name to request");

  std::string report_out = "ugp-out";
  auto* report = app.add_subcommand("report", "Regenerate tables and plots from persisted study logs");
  report->add_option("--out", report_out, "Study output directory (UGP_OUT overrides)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const KeyValueConfig config = KeyValueConfig::load(config_path);
      ExperimentPlan plan = ExperimentPlan::from_config(config);
      if (!train_out.empty()) plan.out = train_out;
      plan.out = resolve_output_dir(plan.out);
      if (!train_server.empty()) plan.registry.env_server = parse_endpoint(train_server);
      const PlanResult result = run_plan(plan);
      for (const EvalRecord& r : result.evaluations) {
        std::printf("seed %llu %s %s after %zu episodes: %.3f ± %.3f\n", static_cast<unsigned long long>(r.seed),
                    r.phase.c_str(), r.task.c_str(), r.episodes_trained, r.mean, r.stddev);
      }
      std::printf("wrote %zu files under %s\n", result.files.size(), plan.out.string().c_str());
    } else if (*study1) {
      print_report(run_study1(study_settings(s1)));
    } else if (*study2) {
      StudySettings s = study_settings(s2);
      s.lambdas = parse_lambdas(lambdas);
      print_report(run_study2(s));
    } else if (*eval) {
      const TensorArchive archive = load_archive(ckpt);
      const NetworkParams params = import_network(archive);
      TaskRegistry registry;
      registry.image_profile = params.input_shape.size() == 3;
      if (!eval_server.empty()) registry.env_server = parse_endpoint(eval_server);
      const EvalResult r = evaluate(params, task, registry.factory(task), episodes, eval_seed, greedy);
      std::printf("%s: mean %.3f ± %.3f over %zu episodes (params version %llu)\n", task.c_str(), r.mean, r.stddev,
                  r.scores.size(), static_cast<unsigned long long>(params.version));
    } else if (*check) {
      const ConformanceReport r = serve_check(parse_endpoint(probe_server), probe_env);
      for (const ConformanceCheck& c : r.checks) {
        std::printf("%-20s %s%s%s\n", c.name.c_str(), c.passed ? "ok" : "FAILED", c.detail.empty() ? "" : "  ",
                    c.detail.c_str());
      }
      return r.passed() ? 0 : 1;
    } else if (*report) {
      const auto files = emit_report(resolve_output_dir(report_out));
      std::printf("wrote %zu report files\n", files.size());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ugp: %s\n", e.what());
    return 1;
  }
  return 0;
}
