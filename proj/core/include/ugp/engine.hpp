#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ugp/env.hpp"
#include "ugp/losses.hpp"
#include "ugp/net.hpp"
#include "ugp/optimizer.hpp"
#include "ugp/queue.hpp"

namespace ugp {

/// Everything a learner owns: parameters, optimizer state and EWC anchors.
struct Agent {
  NetworkParams params;
  RmsPropState optimizer;
  std::vector<EwcAnchor> anchors;

  [[nodiscard]] TensorArchive to_archive() const;
  static Agent from_archive(const TensorArchive& archive);
  void save(const std::filesystem::path& path) const;
  static Agent load(const std::filesystem::path& path);
};

using EnvironmentFactories = std::map<TaskId, EnvironmentFactory, std::less<>>;

struct EngineConfig {
  /// Actor-learners per task; the actor count is the sum.
  std::map<TaskId, std::size_t> assignment;
  std::size_t prediction_batch_cap = 32;
  std::chrono::microseconds linger{2000};
  std::size_t predictor_threads = 1;
  std::size_t training_batch = 128;
  std::size_t rollout_length = 5;
  double gamma = 0.99;
  /// Total finished episodes across all tasks; 0 means unbounded.
  std::size_t max_episodes = 0;
  /// Total environment steps; 0 means unbounded.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
  /// Lock-step execution on the calling thread. The run becomes a pure
  /// function of (config, agent, factories).
  bool deterministic = true;
  LossWeights loss;
  /// Offset added to logged episode indices (for runs split into segments).
  std::size_t episode_offset = 0;

  [[nodiscard]] std::size_t actor_count() const;
  void validate() const;
};

struct EpisodeRecord {
  std::size_t episode_index = 0;
  TaskId task;
  double score = 0.0;
  std::size_t length = 0;
  std::uint64_t params_version = 0;
  std::uint64_t wallclock_ms = 0;

  friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

struct TrainingLog {
  std::vector<EpisodeRecord> episodes;
  std::size_t env_steps = 0;
  std::size_t optimizer_steps = 0;
  std::size_t skipped_steps = 0;
  /// Points trained per task, and optimizer steps whose batch contained the task.
  std::map<TaskId, std::size_t> trained_points;
  std::map<TaskId, std::size_t> steps_with_task;
  std::vector<std::string> actor_failures;
  double seconds = 0.0;

  [[nodiscard]] std::map<TaskId, std::size_t> episodes_per_task() const;

  static constexpr const char* kCsvHeader = "episode_index,task,score,length,params_version,wallclock_ms";
  void write_csv(std::ostream& out, bool with_header = true) const;
  static std::vector<EpisodeRecord> read_csv(std::istream& in);
};

/// Invoked every `every_episodes` finished episodes with the current parameters.
struct TrainingHooks {
  std::size_t every_episodes = 0;
  std::function<void(const NetworkParams& snapshot, std::size_t episodes_done)> on_checkpoint;
};

/// Raised when too many actor-learners abort.
class EngineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TrainingLog run_training(const EngineConfig& config, Agent& agent, const EnvironmentFactories& envs,
                         const TrainingHooks& hooks = {});

// Prediction service

struct PredictionRequest {
  std::size_t actor = 0;
  TaskId task;
  Tensor state;
};

/// Groups requests by task and runs one batched forward per group against a
/// single params snapshot. Results come back in request order.
std::vector<ForwardResult> predict_batch(const NetworkParams& snapshot, std::span<const PredictionRequest> requests);

/// Thrown to actors whose pending prediction was cancelled by shutdown.
class PredictionCancelled : public std::runtime_error {
 public:
  PredictionCancelled() : std::runtime_error("prediction cancelled by engine shutdown") {}
};

/// Threaded front end of predict_batch: requests are queued, batched up to
/// `batch_cap` within `linger`, and answered through futures.
class PredictionService {
 public:
  using SnapshotSource = std::function<std::shared_ptr<const NetworkParams>()>;

  PredictionService(SnapshotSource snapshots, std::size_t batch_cap, std::chrono::microseconds linger,
                    std::size_t threads = 1);
  ~PredictionService();
  PredictionService(const PredictionService&) = delete;
  PredictionService& operator=(const PredictionService&) = delete;

  std::future<ForwardResult> submit(PredictionRequest request);
  /// Stops the workers; queued requests fail with PredictionCancelled.
  void shutdown();

  [[nodiscard]] std::size_t batches_served() const;
  [[nodiscard]] std::size_t requests_served() const;

 private:
  struct Pending {
    PredictionRequest request;
    std::promise<ForwardResult> promise;
  };
  void worker();

  SnapshotSource snapshots_;
  std::size_t batch_cap_;
  std::chrono::microseconds linger_;
  BlockingQueue<Pending> queue_;
  std::vector<std::thread> workers_;
  mutable std::mutex stats_mutex_;
  std::size_t batches_ = 0;
  std::size_t requests_ = 0;
  bool stopped_ = false;
};

// Evaluation and consolidation

struct EvalResult {
  std::vector<double> scores;
  std::vector<std::size_t> lengths;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Plays `episodes` episodes without training. Actions are sampled from pi
/// unless `greedy`.
EvalResult evaluate(const NetworkParams& snapshot, std::string_view task, const EnvironmentFactory& env,
                    std::size_t episodes, std::uint64_t seed, bool greedy = false);

/// Runs the current policy and returns the first `count` states it visits.
std::vector<Tensor> collect_states(const NetworkParams& params, std::string_view task, const EnvironmentFactory& env,
                                   std::size_t count, std::uint64_t seed);

struct ConsolidationOptions {
  double lambda = 0.0;
  std::size_t sample_size = 500;
  FisherMode mode = FisherMode::exact;
  /// Tensor names the penalty covers; empty means every trunk tensor.
  std::vector<std::string> scope;
  std::uint64_t seed = 0;
};

/// Anchor from explicit per-task state samples; per-task Fisher diagonals are averaged.
EwcAnchor consolidate_from_states(const NetworkParams& params, const std::map<TaskId, std::vector<Tensor>>& states,
                                  const ConsolidationOptions& options);

EwcAnchor consolidate(const NetworkParams& params, std::span<const TaskId> tasks, const EnvironmentFactories& envs,
                      const ConsolidationOptions& options);

}  // namespace ugp
