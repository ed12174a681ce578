#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ugp/bridge.hpp"
#include "ugp/engine.hpp"

namespace ugp {

// Key = value configuration

/// Flat "key = value" text. Blank lines and lines starting with '#' are
/// ignored; repeated keys are a ConfigError.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, std::string_view origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  [[nodiscard]] bool has(std::string_view key) const;
  [[nodiscard]] std::string get(std::string_view key, std::string_view fallback) const;
  [[nodiscard]] std::string require(std::string_view key) const;
  [[nodiscard]] double get_double(std::string_view key, double fallback) const;
  [[nodiscard]] std::size_t get_size(std::string_view key, std::size_t fallback) const;
  [[nodiscard]] bool get_bool(std::string_view key, bool fallback) const;
  /// Keys starting with `prefix`, in lexicographic order.
  [[nodiscard]] std::vector<std::string> keys_with_prefix(std::string_view prefix) const;
  /// Keys never read through one of the accessors above.
  [[nodiscard]] std::vector<std::string> unused_keys() const;

  void set(std::string key, std::string value);

 private:
  std::map<std::string, std::string, std::less<>> values_;
  mutable std::map<std::string, bool, std::less<>> used_;
  std::string origin_;
};

std::vector<std::string> split_list(std::string_view text, char sep = ',');
/// "fc64,relu" / "conv8x4s2,relu,fc64,relu" style trunk descriptions.
std::vector<LayerSpec> parse_trunk(std::string_view text);
std::string describe_trunk(std::span<const LayerSpec> trunk);

// Hyperparameters shared by studies and plans

struct AgentHyperparams {
  std::vector<LayerSpec> trunk = {LayerSpec::dense(64), LayerSpec::relu()};
  double learning_rate = 3e-3;
  std::size_t training_batch = 16;
  std::size_t rollout_length = 5;
  double gamma = 0.99;
  LossWeights loss;
  bool deterministic = true;
  bool image_profile = false;

  void apply(const KeyValueConfig& config);
};

/// Registry resolving task names: built-in shooter variants, anything else
/// through the environment server when one is configured.
struct TaskRegistry {
  bool image_profile = false;
  std::optional<Endpoint> env_server;

  [[nodiscard]] EnvironmentFactory factory(const TaskId& task) const;
  [[nodiscard]] EnvironmentFactories factories(std::span<const TaskId> tasks) const;
  [[nodiscard]] std::size_t action_count(const TaskId& task) const;
  [[nodiscard]] Shape state_shape(const TaskId& task) const;
};

Agent make_agent(const AgentHyperparams& hp, const TaskRegistry& registry, std::span<const TaskId> tasks,
                 std::uint64_t seed);

// Evaluation checkpoints

struct EvalRecord {
  std::string agent;
  std::uint64_t seed = 0;
  std::string phase;
  std::size_t episodes_trained = 0;
  TaskId task;
  std::size_t eval_episodes = 0;
  double mean = 0.0;
  double stddev = 0.0;
  std::uint64_t params_version = 0;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

inline constexpr const char* kEvalCsvHeader =
    "agent,seed,phase,episodes_trained,task,eval_episodes,mean,stddev,params_version";
void write_eval_csv(std::ostream& out, std::span<const EvalRecord> rows);
std::vector<EvalRecord> read_eval_csv(std::istream& in);

// Plans

enum class PhaseKind { train, consolidate, evaluate, snapshot };

struct PlanPhase {
  PhaseKind kind = PhaseKind::train;
  std::map<TaskId, std::size_t> assignment;  // train
  std::size_t episodes = 0;                  // train, evaluate
  double lambda = 0.0;                       // consolidate
  std::vector<TaskId> tasks;                 // consolidate, evaluate
  std::filesystem::path path;                // snapshot
  std::string describe() const;
};

/// Ordered phases applied to one agent lineage, optionally across seeds.
struct ExperimentPlan {
  std::string name = "plan";
  std::vector<TaskId> heads;
  std::vector<PlanPhase> phases;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path out = "ugp-out";
  std::optional<std::filesystem::path> init_checkpoint;
  AgentHyperparams hyper;
  TaskRegistry registry;
  std::size_t eval_every = 0;
  std::size_t eval_episodes = 100;
  bool eval_greedy = false;
  std::size_t fisher_samples = 500;

  /// Phase lines look like "train shooter-a:2,shooter-b:2 episodes=3000",
  /// "consolidate lambda=50 tasks=shooter-a,shooter-b", "evaluate shooter-a
  /// episodes=100", "snapshot path=final.ugpc".
  static ExperimentPlan from_config(const KeyValueConfig& config);
  void validate() const;
};

struct PlanResult {
  std::vector<std::filesystem::path> files;
  std::vector<EvalRecord> evaluations;
};

PlanResult run_plan(const ExperimentPlan& plan);

/// Applies UGP_OUT when set; otherwise returns `requested`.
std::filesystem::path resolve_output_dir(const std::filesystem::path& requested);

// Studies

struct StudySettings {
  double scale = 1.0;
  std::size_t seeds = 3;
  std::uint64_t first_seed = 1;
  std::filesystem::path out = "ugp-out";
  /// E at scale 1; E(scale) = round(base_episodes * scale).
  std::size_t base_episodes = 3000;
  std::size_t eval_episodes = 100;
  bool eval_greedy = false;
  /// Evaluations happen every E / eval_divisions training episodes.
  std::size_t eval_divisions = 15;
  std::size_t single_actors = 4;
  std::size_t hybrid_actors_per_task = 2;
  std::size_t fisher_samples = 500;
  std::vector<double> lambdas = {0.0, 50.0, 100.0};
  AgentHyperparams hyper;
  /// Print one line per finished phase.
  bool verbose = false;

  [[nodiscard]] std::size_t budget() const;
  [[nodiscard]] std::size_t transfer_budget() const;
  [[nodiscard]] std::size_t eval_every() const;
  void validate() const;
};

inline constexpr const char* kTaskA = "shooter-a";
inline constexpr const char* kTaskB = "shooter-b";
inline constexpr const char* kTaskC = "shooter-c";

struct StudyReport {
  std::filesystem::path out;
  std::vector<std::filesystem::path> files;
  double seconds = 0.0;
};

/// Study 1: SingleA, SingleB, SingleC and Hybrid trained for E; SingleA,
/// SingleB and Hybrid then trained on shooter-c for E/3.
StudyReport run_study1(const StudySettings& settings);

/// Study 2: the Hybrid lineage consolidated on {a, b} per lambda, then trained
/// on shooter-c for E/3. Reuses study-1 Hybrid checkpoints found in `out`.
StudyReport run_study2(const StudySettings& settings);

/// Rebuilds CSV tables, SVG plots and summary.md from the persisted logs in
/// `out`. Output is a pure function of those files.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& out);

/// Final (last-checkpoint) evaluation per agent, seed and task, read back
/// from the persisted evaluation log.
struct FinalScores {
  std::map<std::string, std::map<std::uint64_t, std::map<TaskId, EvalRecord>>> by_agent;
};
FinalScores final_scores(std::span<const EvalRecord> rows, std::string_view phase);

}  // namespace ugp
