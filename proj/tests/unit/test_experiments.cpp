#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "ugp/errors.hpp"
#include "ugp/experiments.hpp"

using namespace ugp;
namespace fs = std::filesystem;

namespace {

KeyValueConfig parse(const std::string& text) {
  std::istringstream in(text);
  return KeyValueConfig::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

StudySettings tiny_study(const fs::path& out) {
  StudySettings s;
  s.out = out;
  s.base_episodes = 12;
  s.seeds = 1;
  s.eval_episodes = 3;
  s.eval_divisions = 2;
  s.single_actors = 2;
  s.hybrid_actors_per_task = 1;
  s.fisher_samples = 20;
  s.hyper.trunk = {LayerSpec::dense(8), LayerSpec::relu()};
  s.hyper.training_batch = 16;
  return s;
}

}  // namespace

TEST(KeyValue, ParsingRules) {
  const KeyValueConfig c = parse("# comment\n\n  a = 1 \nname=x y\nflag = true\nlr = 2.5e-3\n");
  EXPECT_TRUE(c.has("a"));
  EXPECT_EQ(c.get_size("a", 0), 1u);
  EXPECT_EQ(c.get("name", ""), "x y");
  EXPECT_TRUE(c.get_bool("flag", false));
  EXPECT_DOUBLE_EQ(c.get_double("lr", 0.0), 2.5e-3);
  EXPECT_EQ(c.get("missing", "d"), "d");
  EXPECT_THROW(c.require("missing"), ConfigError);
  EXPECT_TRUE(c.unused_keys().empty());

  EXPECT_THROW(parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse("no equals sign\n"), ConfigError);
  const KeyValueConfig bad = parse("n = -3\nf = maybe\nd = 1.5x\n");
  EXPECT_THROW((void)bad.get_size("n", 0), ConfigError);
  EXPECT_THROW((void)bad.get_bool("f", false), ConfigError);
  EXPECT_THROW((void)bad.get_double("d", 0.0), ConfigError);

  const KeyValueConfig partial = parse("used = 1\nunused = 2\n");
  (void)partial.get("used", "");
  EXPECT_EQ(partial.unused_keys(), std::vector<std::string>{"unused"});
}

TEST(KeyValue, TrunkDescriptions) {
  const auto t = parse_trunk("conv8x4s2,relu,fc64,relu");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(describe_trunk(t), "conv8x4s2,relu,fc64,relu");
  EXPECT_THROW(parse_trunk("fc"), ConfigError);
  EXPECT_THROW(parse_trunk("pool2"), ConfigError);
  EXPECT_THROW(parse_trunk(""), ConfigError);
  EXPECT_EQ(split_list(" a, b ,c"), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Plan, ParsesPhasesInNumericOrder) {
  const ExperimentPlan plan = ExperimentPlan::from_config(parse(
      "name = demo\n"
      "seeds = 3,4\n"
      "phase.10 = snapshot path=end.ugpc\n"
      "phase.2 = consolidate lambda=50 tasks=shooter-a,shooter-b\n"
      "phase.1 = train shooter-a:2,shooter-b:1 episodes=40\n"
      "phase.3 = evaluate shooter-a episodes=7\n"
      "learning_rate = 1e-3\n"));
  EXPECT_EQ(plan.name, "demo");
  EXPECT_EQ(plan.seeds, (std::vector<std::uint64_t>{3, 4}));
  ASSERT_EQ(plan.phases.size(), 4u);
  EXPECT_EQ(plan.phases[0].kind, PhaseKind::train);
  EXPECT_EQ(plan.phases[0].assignment, (std::map<TaskId, std::size_t>{{"shooter-a", 2}, {"shooter-b", 1}}));
  EXPECT_EQ(plan.phases[0].episodes, 40u);
  EXPECT_EQ(plan.phases[1].kind, PhaseKind::consolidate);
  EXPECT_EQ(plan.phases[1].lambda, 50.0);
  EXPECT_EQ(plan.phases[2].episodes, 7u);
  EXPECT_EQ(plan.phases[3].kind, PhaseKind::snapshot);
  EXPECT_EQ(plan.heads, (std::vector<TaskId>{"shooter-a", "shooter-b"}));
  EXPECT_DOUBLE_EQ(plan.hyper.learning_rate, 1e-3);
}

TEST(Plan, RejectsBadPlans) {
  EXPECT_THROW(ExperimentPlan::from_config(parse("name = x\n")), ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = jump\n")), ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = train shooter-a episodes=0\n")), ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = train shooter-a episodes=5 speed=9\n")), ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = consolidate lambda=5 tasks=shooter-a\n")), ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = train shooter-a episodes=5\ntypo_key = 1\n")),
               ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("heads = shooter-a\nphase.1 = train shooter-b episodes=5\n")),
               ConfigError);
  EXPECT_THROW(ExperimentPlan::from_config(parse("phase.1 = consolidate lambda=-1 tasks=shooter-a\n"
                                                 "init_checkpoint = x.ugpc\n")),
               ConfigError);
}

TEST(Plan, RunWritesLogsAndEvaluations) {
  const fs::path out = ugp::testing::scratch_dir("plan-run");
  ExperimentPlan plan = ExperimentPlan::from_config(parse(
      "trunk = fc8,relu\n"
      "training_batch = 16\n"
      "eval_episodes = 2\n"
      "fisher_samples = 10\n"
      "phase.1 = train shooter-a:2 episodes=6\n"
      "phase.2 = consolidate lambda=10 tasks=shooter-a\n"
      "phase.3 = train shooter-b:1 episodes=3\n"
      "phase.4 = evaluate shooter-a,shooter-b episodes=2\n"
      "phase.5 = snapshot path=final.ugpc\n"));
  plan.out = out;
  const PlanResult r = run_plan(plan);

  std::ifstream log_in(out / "seed-0" / "training_log.csv");
  const auto episodes = TrainingLog::read_csv(log_in);
  ASSERT_EQ(episodes.size(), 9u);
  EXPECT_EQ(episodes.back().episode_index, 8u);
  EXPECT_EQ(episodes.back().task, "shooter-b");

  // Each train phase ends with an evaluation of its own tasks.
  ASSERT_EQ(r.evaluations.size(), 4u);
  EXPECT_EQ(r.evaluations[0].phase, "phase-1");
  EXPECT_EQ(r.evaluations[0].episodes_trained, 6u);
  EXPECT_EQ(r.evaluations[1].task, "shooter-b");
  EXPECT_EQ(r.evaluations[3].phase, "phase-4");
  EXPECT_EQ(r.evaluations[3].episodes_trained, 9u);
  std::ifstream eval_in(out / "evaluations.csv");
  EXPECT_EQ(read_eval_csv(eval_in), r.evaluations);

  const Agent saved = Agent::load(out / "seed-0" / "final.ugpc");
  ASSERT_EQ(saved.anchors.size(), 1u);
  EXPECT_EQ(saved.anchors[0].lambda, 10.0);
  EXPECT_TRUE(saved.params.has_task("shooter-b"));

  // Same plan, same bytes.
  const auto first = snapshot_tree(out);
  run_plan(plan);
  EXPECT_EQ(snapshot_tree(out), first);
}

TEST(EvalCsv, RoundTripAndHeaderOnly) {
  std::vector<EvalRecord> rows = {{"hybrid", 1, "train", 200, "shooter-a", 100, 3.25, 1.5, 77},
                                  {"ugp-lambda-50", 2, "transfer", 4000, "shooter-c", 100, 12.0, 0.0, 9}};
  std::stringstream ss;
  write_eval_csv(ss, rows);
  EXPECT_EQ(read_eval_csv(ss), rows);

  std::stringstream empty;
  write_eval_csv(empty, {});
  EXPECT_EQ(empty.str(), std::string(kEvalCsvHeader) + "\n");
  EXPECT_TRUE(read_eval_csv(empty).empty());

  std::stringstream bad("agent,seed\nx,1\n");
  EXPECT_THROW(read_eval_csv(bad), std::exception);
}

TEST(FinalScores, PicksLatestCheckpointPerPhase) {
  std::vector<EvalRecord> rows = {{"a", 1, "train", 10, "t", 5, 1.0, 0, 1},
                                  {"a", 1, "train", 20, "t", 5, 2.0, 0, 2},
                                  {"a", 1, "transfer", 30, "t", 5, 9.0, 0, 3}};
  const FinalScores f = final_scores(rows, "train");
  EXPECT_EQ(f.by_agent.at("a").at(1).at("t").mean, 2.0);
  EXPECT_EQ(final_scores(rows, "transfer").by_agent.at("a").at(1).at("t").mean, 9.0);
}

TEST(OutputDir, EnvironmentOverride) {
  ::unsetenv("UGP_OUT");
  EXPECT_EQ(resolve_output_dir("x"), fs::path("x"));
  ::setenv("UGP_OUT", "/tmp/elsewhere", 1);
  EXPECT_EQ(resolve_output_dir("x"), fs::path("/tmp/elsewhere"));
  ::unsetenv("UGP_OUT");
}

TEST(Report, EmptyOutputGivesPlaceholders) {
  const fs::path out = ugp::testing::scratch_dir("report-empty");
  const auto files = emit_report(out);
  ASSERT_FALSE(files.empty());
  const std::string md = slurp(out / "report" / "summary.md");
  EXPECT_NE(md.find("No evaluation log"), std::string::npos);
}

TEST(Studies, TinyRunsAndByteIdenticalReport) {
  const fs::path out = ugp::testing::scratch_dir("tiny-study");
  StudySettings s = tiny_study(out);
  run_study1(s);
  s.lambdas = {0.0, 50.0};
  run_study2(s);

  std::ifstream in1(out / "study1" / "evaluations.csv");
  const auto rows1 = read_eval_csv(in1);
  const FinalScores pre = final_scores(rows1, "train");
  for (const char* agent : {"single-a", "single-b", "single-c", "hybrid"}) {
    EXPECT_TRUE(pre.by_agent.contains(agent)) << agent;
  }
  const FinalScores post = final_scores(rows1, "transfer");
  EXPECT_TRUE(post.by_agent.contains("hybrid"));
  EXPECT_FALSE(post.by_agent.contains("single-c"));
  EXPECT_EQ(post.by_agent.at("hybrid").at(1).at(kTaskC).episodes_trained, 12u + 4u);

  std::ifstream in2(out / "study2" / "evaluations.csv");
  const auto rows2 = read_eval_csv(in2);
  const FinalScores s2 = final_scores(rows2, "transfer");
  EXPECT_TRUE(s2.by_agent.contains("ugp-lambda-0"));
  EXPECT_TRUE(s2.by_agent.contains("ugp-lambda-50"));
  EXPECT_EQ(s2.by_agent.at("ugp-lambda-0").at(1).size(), 3u);

  // Study 2 reused the study-1 Hybrid instead of retraining.
  EXPECT_FALSE(fs::exists(out / "study2" / "seed-1" / "hybrid" / "pre.ugpc"));

  // The report is a pure function of the persisted logs.
  const auto before = snapshot_tree(out / "report");
  fs::remove_all(out / "report");
  emit_report(out);
  EXPECT_EQ(snapshot_tree(out / "report"), before);
  EXPECT_TRUE(fs::exists(out / "report" / "summary.md"));
}

// With lambda = 0 the consolidated lineage must train exactly like an
// unconsolidated copy.
TEST(Studies, LambdaZeroMatchesPlainTransfer) {
  const fs::path out = ugp::testing::scratch_dir("lambda-zero");
  StudySettings s = tiny_study(out);
  run_study1(s);
  s.lambdas = {0.0};
  run_study2(s);

  const Agent anchored = Agent::load(out / "study2" / "seed-1" / "lambda-0" / "final.ugpc");
  const Agent hybrid_final = Agent::load(out / "study1" / "seed-1" / "hybrid" / "final.ugpc");
  // Study 1's hybrid transfer is the unconsolidated run of the same lineage.
  TensorArchive a, b;
  export_network(anchored.params, a);
  export_network(hybrid_final.params, b);
  EXPECT_EQ(encode_archive(a), encode_archive(b));
}

TEST(Studies, SettingsValidation) {
  StudySettings s;
  EXPECT_EQ(s.budget(), 3000u);
  EXPECT_EQ(s.transfer_budget(), 1000u);
  s.scale = 0.1;
  EXPECT_EQ(s.budget(), 300u);
  s.scale = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.scale = 1.0;
  s.lambdas = {-1.0};
  EXPECT_THROW(s.validate(), ConfigError);
}
