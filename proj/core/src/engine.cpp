#include "ugp/engine.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <deque>
#include <istream>
#include <ostream>
#include <sstream>

#include "ugp/errors.hpp"
#include "ugp/rng.hpp"

namespace ugp {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kResetStream = 0x7e5e7ULL;
constexpr std::uint64_t kActionStream = 0xac7ULL;
constexpr std::uint64_t kEvalResetStream = 0xe7a1ULL;
constexpr std::uint64_t kEvalActionStream = 0xe7a2ULL;
constexpr std::uint64_t kCollectStream = 0xc011ULL;

std::uint64_t episode_seed(std::uint64_t run_seed, std::size_t actor, std::size_t episode) {
  return derive_key(derive_key(derive_key(run_seed, kResetStream), actor), episode);
}

std::uint64_t elapsed_ms(Clock::time_point start) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count());
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

/// FIFO of training points feeding fixed-size batches to the single updater.
class Updater {
 public:
  Updater(const EngineConfig& config, Agent& agent, TrainingLog& log) : config_(config), agent_(agent), log_(log) {}

  void add(std::vector<TrainingPoint>&& points) {
    for (TrainingPoint& p : points) pending_.push_back(std::move(p));
  }

  /// Trains every full batch; returns true if parameters changed.
  bool train_ready() {
    bool changed = false;
    while (pending_.size() >= config_.training_batch) changed = train(config_.training_batch) || changed;
    return changed;
  }

  bool flush() { return !pending_.empty() && train(pending_.size()); }

 private:
  bool train(std::size_t n) {
    std::map<TaskId, std::vector<TrainingPoint>> by_task;
    for (std::size_t i = 0; i < n; ++i) {
      TrainingPoint& p = pending_.front();
      by_task[p.task].push_back(std::move(p));
      pending_.pop_front();
    }
    LossResult loss = multi_env_loss(by_task, agent_.params, agent_.anchors, config_.loss);
    const ApplyReport report = apply(agent_.params, loss.grads, agent_.optimizer);
    for (const auto& [task, points] : by_task) log_.trained_points[task] += points.size();
    if (!report.applied) {
      ++log_.skipped_steps;
      return false;
    }
    ++log_.optimizer_steps;
    for (const auto& [task, points] : by_task) ++log_.steps_with_task[task];
    return true;
  }

  const EngineConfig& config_;
  Agent& agent_;
  TrainingLog& log_;
  std::deque<TrainingPoint> pending_;
};

/// One actor-learner's environment, action stream and partial rollout.
struct ActorSlot {
  std::size_t id = 0;
  TaskId task;
  std::unique_ptr<EnvironmentHandler> handler;
  CounterRng rng{0};
  std::size_t episodes_started = 0;
  Rollout rollout;
  double score = 0.0;
  std::size_t length = 0;
  bool failed = false;

  void reset_episode(std::uint64_t run_seed) {
    handler->reset(episode_seed(run_seed, id, episodes_started++));
    score = 0.0;
    length = 0;
  }

  Rollout fresh_rollout(double gamma) const {
    Rollout r;
    r.task = task;
    r.gamma = gamma;
    return r;
  }
};

std::vector<ActorSlot> make_actors(const EngineConfig& config, const EnvironmentFactories& envs,
                                   const NetworkParams& params) {
  std::vector<ActorSlot> actors;
  for (const auto& [task, count] : config.assignment) {
    auto factory = envs.find(task);
    if (factory == envs.end()) throw ConfigError("no environment registered for task '" + task + "'");
    if (!params.has_task(task)) throw ConfigError("network has no head for task '" + task + "'");
    for (std::size_t j = 0; j < count; ++j) {
      ActorSlot a;
      a.id = actors.size();
      a.task = task;
      a.handler = std::make_unique<EnvironmentHandler>(factory->second());
      if (a.handler->action_count() != params.head(task).action_count) {
        throw ConfigError("environment for task '" + task + "' has " + std::to_string(a.handler->action_count()) +
                          " actions, head has " + std::to_string(params.head(task).action_count));
      }
      if (a.handler->profile().state_shape() != params.input_shape) {
        throw ConfigError("environment for task '" + task + "' produces states " +
                          shape_to_string(a.handler->profile().state_shape()) + ", network expects " +
                          shape_to_string(params.input_shape));
      }
      a.rng = CounterRng(derive_key(derive_key(config.seed, kActionStream), a.id));
      a.rollout = a.fresh_rollout(config.gamma);
      actors.push_back(std::move(a));
    }
  }
  return actors;
}

void check_failures(const TrainingLog& log, std::size_t actors) {
  if (log.actor_failures.size() * 10 > actors) {
    std::string msg = std::to_string(log.actor_failures.size()) + " of " + std::to_string(actors) +
                      " actor-learners aborted:";
    for (const auto& f : log.actor_failures) msg += "\n  " + f;
    throw EngineError(msg);
  }
}

TrainingLog run_lockstep(const EngineConfig& config, Agent& agent, const EnvironmentFactories& envs,
                         const TrainingHooks& hooks) {
  TrainingLog log;
  Updater updater(config, agent, log);
  std::vector<ActorSlot> actors = make_actors(config, envs, agent.params);
  for (ActorSlot& a : actors) a.reset_episode(config.seed);

  std::size_t episodes_done = 0;
  bool done = false;
  std::vector<PredictionRequest> requests;
  std::vector<std::size_t> owners;
  while (!done) {
    requests.clear();
    owners.clear();
    for (ActorSlot& a : actors) {
      if (a.failed) continue;
      requests.push_back({a.id, a.task, a.handler->state()});
      owners.push_back(a.id);
    }
    if (requests.empty()) break;
    const std::vector<ForwardResult> results = predict_batch(agent.params, requests);

    for (std::size_t k = 0; k < owners.size() && !done; ++k) {
      ActorSlot& a = actors[owners[k]];
      const ForwardResult& prediction = results[k];
      if (a.rollout.steps.size() == config.rollout_length) {
        a.rollout.bootstrap_value = prediction.value;
        updater.add(compute_returns(std::move(a.rollout)));
        a.rollout = a.fresh_rollout(config.gamma);
      }
      const std::size_t action = a.rng.categorical(prediction.policy);
      try {
        HandlerStep step = a.handler->step(action);
        a.rollout.steps.push_back({std::move(requests[k].state), action, step.reward});
        a.score += step.reward;
        ++a.length;
        ++log.env_steps;
        if (step.terminal) {
          a.rollout.terminal = true;
          a.rollout.bootstrap_value = 0.0;
          updater.add(compute_returns(std::move(a.rollout)));
          a.rollout = a.fresh_rollout(config.gamma);
          log.episodes.push_back({config.episode_offset + episodes_done, a.task, a.score, a.length,
                                  agent.params.version, 0});
          ++episodes_done;
          if (hooks.on_checkpoint && hooks.every_episodes && episodes_done % hooks.every_episodes == 0) {
            hooks.on_checkpoint(agent.params, episodes_done);
          }
          if (config.max_episodes && episodes_done >= config.max_episodes) {
            done = true;
            break;
          }
          a.reset_episode(config.seed);
        }
      } catch (const std::exception& e) {
        a.failed = true;
        log.actor_failures.push_back("actor " + std::to_string(a.id) + " (" + a.task + "): " + e.what());
      }
      if (config.max_steps && log.env_steps >= config.max_steps) done = true;
    }
    updater.train_ready();
  }
  updater.flush();
  check_failures(log, actors.size());
  return log;
}

TrainingLog run_async(const EngineConfig& config, Agent& agent, const EnvironmentFactories& envs,
                      const TrainingHooks& hooks) {
  TrainingLog log;
  std::vector<ActorSlot> actors = make_actors(config, envs, agent.params);
  const auto start = Clock::now();

  std::mutex snapshot_mutex;
  auto snapshot = std::make_shared<const NetworkParams>(agent.params);
  auto current = [&] {
    std::lock_guard lock(snapshot_mutex);
    return snapshot;
  };

  PredictionService predictor(current, config.prediction_batch_cap, config.linger, config.predictor_threads);
  BlockingQueue<std::vector<TrainingPoint>> experience(4 * actors.size() + 16);

  std::atomic<bool> stop{false};
  std::atomic<std::size_t> env_steps{0};
  std::mutex log_mutex;
  std::size_t episodes_done = 0;
  std::mutex hook_mutex;

  // The single parameter updater. Only this thread touches `agent` until join.
  TrainingLog trainer_log;
  std::thread trainer([&] {
    Updater updater(config, agent, trainer_log);
    auto publish = [&] {
      auto next = std::make_shared<const NetworkParams>(agent.params);
      std::lock_guard lock(snapshot_mutex);
      snapshot = std::move(next);
    };
    while (auto points = experience.pop()) {
      updater.add(std::move(*points));
      if (updater.train_ready()) publish();
    }
    if (updater.flush()) publish();
  });

  auto actor_main = [&](ActorSlot& a) {
    try {
      a.reset_episode(config.seed);
      while (!stop.load()) {
        ForwardResult prediction = predictor.submit({a.id, a.task, a.handler->state()}).get();
        if (a.rollout.steps.size() == config.rollout_length) {
          a.rollout.bootstrap_value = prediction.value;
          experience.push(compute_returns(std::move(a.rollout)));
          a.rollout = a.fresh_rollout(config.gamma);
        }
        const std::size_t action = a.rng.categorical(prediction.policy);
        Tensor state = a.handler->state();
        HandlerStep step = a.handler->step(action);
        a.rollout.steps.push_back({std::move(state), action, step.reward});
        a.score += step.reward;
        ++a.length;
        if (config.max_steps && env_steps.fetch_add(1) + 1 >= config.max_steps) stop = true;
        if (!config.max_steps) env_steps.fetch_add(1);
        if (!step.terminal) continue;

        a.rollout.terminal = true;
        a.rollout.bootstrap_value = 0.0;
        experience.push(compute_returns(std::move(a.rollout)));
        a.rollout = a.fresh_rollout(config.gamma);
        std::size_t finished = 0;
        {
          std::lock_guard lock(log_mutex);
          if (config.max_episodes && episodes_done >= config.max_episodes) break;
          log.episodes.push_back({config.episode_offset + episodes_done, a.task, a.score, a.length,
                                  current()->version, elapsed_ms(start)});
          finished = ++episodes_done;
          if (config.max_episodes && finished >= config.max_episodes) stop = true;
        }
        if (hooks.on_checkpoint && hooks.every_episodes && finished % hooks.every_episodes == 0) {
          std::lock_guard lock(hook_mutex);
          hooks.on_checkpoint(*current(), finished);
        }
        if (stop.load()) break;
        a.reset_episode(config.seed);
      }
    } catch (const PredictionCancelled&) {
    } catch (const std::exception& e) {
      std::lock_guard lock(log_mutex);
      a.failed = true;
      log.actor_failures.push_back("actor " + std::to_string(a.id) + " (" + a.task + "): " + e.what());
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(actors.size());
  for (ActorSlot& a : actors) threads.emplace_back(actor_main, std::ref(a));
  for (std::thread& t : threads) t.join();
  predictor.shutdown();
  experience.close();
  trainer.join();

  log.env_steps = env_steps.load();
  log.optimizer_steps = trainer_log.optimizer_steps;
  log.skipped_steps = trainer_log.skipped_steps;
  log.trained_points = trainer_log.trained_points;
  log.steps_with_task = trainer_log.steps_with_task;
  check_failures(log, actors.size());
  return log;
}

}  // namespace

// Agent

TensorArchive Agent::to_archive() const {
  TensorArchive archive;
  export_network(params, archive);
  export_optimizer(optimizer, archive);
  export_anchors(anchors, archive);
  return archive;
}

Agent Agent::from_archive(const TensorArchive& archive) {
  Agent agent;
  agent.params = import_network(archive);
  if (archive.contains("opt/hparams")) agent.optimizer = import_optimizer(archive);
  agent.anchors = import_anchors(archive);
  return agent;
}

void Agent::save(const std::filesystem::path& path) const { save_archive(path, to_archive()); }

Agent Agent::load(const std::filesystem::path& path) { return from_archive(load_archive(path)); }

// Config and log

std::size_t EngineConfig::actor_count() const {
  std::size_t n = 0;
  for (const auto& [task, count] : assignment) n += count;
  return n;
}

void EngineConfig::validate() const {
  if (assignment.empty() || actor_count() == 0) throw ConfigError("engine needs at least one actor-learner");
  for (const auto& [task, count] : assignment) {
    if (count == 0) throw ConfigError("task '" + task + "' is assigned zero actor-learners");
  }
  if (prediction_batch_cap == 0 || training_batch == 0 || rollout_length == 0 || predictor_threads == 0) {
    throw ConfigError("engine batch caps, rollout length and thread counts must be at least 1");
  }
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("discount must lie in [0, 1)");
  if (max_episodes == 0 && max_steps == 0) throw ConfigError("engine needs an episode or step budget");
}

std::map<TaskId, std::size_t> TrainingLog::episodes_per_task() const {
  std::map<TaskId, std::size_t> counts;
  for (const EpisodeRecord& e : episodes) ++counts[e.task];
  return counts;
}

void TrainingLog::write_csv(std::ostream& out, bool with_header) const {
  if (with_header) out << kCsvHeader << '\n';
  for (const EpisodeRecord& e : episodes) {
    out << e.episode_index << ',' << e.task << ',' << format_number(e.score) << ',' << e.length << ','
        << e.params_version << ',' << e.wallclock_ms << '\n';
  }
}

std::vector<EpisodeRecord> TrainingLog::read_csv(std::istream& in) {
  std::vector<EpisodeRecord> rows;
  std::string line;
  if (!std::getline(in, line)) return rows;
  if (line != kCsvHeader) throw FormatError("training log has unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw FormatError("training log row has " + std::to_string(fields.size()) + " fields");
    EpisodeRecord r;
    r.episode_index = std::stoull(fields[0]);
    r.task = fields[1];
    r.score = std::stod(fields[2]);
    r.length = std::stoull(fields[3]);
    r.params_version = std::stoull(fields[4]);
    r.wallclock_ms = std::stoull(fields[5]);
    rows.push_back(std::move(r));
  }
  return rows;
}

TrainingLog run_training(const EngineConfig& config, Agent& agent, const EnvironmentFactories& envs,
                         const TrainingHooks& hooks) {
  config.validate();
  const auto start = Clock::now();
  TrainingLog log = config.deterministic ? run_lockstep(config, agent, envs, hooks)
                                         : run_async(config, agent, envs, hooks);
  log.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return log;
}

// Prediction

std::vector<ForwardResult> predict_batch(const NetworkParams& snapshot, std::span<const PredictionRequest> requests) {
  std::map<std::string_view, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < requests.size(); ++i) groups[requests[i].task].push_back(i);
  std::vector<ForwardResult> results(requests.size());
  std::vector<const Tensor*> states;
  for (const auto& [task, members] : groups) {
    states.clear();
    for (std::size_t i : members) states.push_back(&requests[i].state);
    std::vector<ForwardResult> batch = forward_batch(snapshot, task, states);
    for (std::size_t j = 0; j < members.size(); ++j) results[members[j]] = std::move(batch[j]);
  }
  return results;
}

PredictionService::PredictionService(SnapshotSource snapshots, std::size_t batch_cap, std::chrono::microseconds linger,
                                     std::size_t threads)
    : snapshots_(std::move(snapshots)),
      batch_cap_(std::max<std::size_t>(batch_cap, 1)),
      linger_(linger),
      queue_(std::max<std::size_t>(4 * batch_cap_, 64)) {
  for (std::size_t i = 0; i < std::max<std::size_t>(threads, 1); ++i) workers_.emplace_back([this] { worker(); });
}

PredictionService::~PredictionService() { shutdown(); }

std::future<ForwardResult> PredictionService::submit(PredictionRequest request) {
  Pending pending{std::move(request), {}};
  std::future<ForwardResult> result = pending.promise.get_future();
  if (!queue_.push(std::move(pending))) {
    pending.promise.set_exception(std::make_exception_ptr(PredictionCancelled()));
  }
  return result;
}

void PredictionService::worker() {
  for (;;) {
    std::vector<Pending> batch = queue_.pop_batch(batch_cap_, linger_);
    if (batch.empty()) return;
    if (queue_.closed()) {
      for (Pending& p : batch) p.promise.set_exception(std::make_exception_ptr(PredictionCancelled()));
      continue;
    }
    std::vector<PredictionRequest> requests;
    requests.reserve(batch.size());
    for (Pending& p : batch) requests.push_back(std::move(p.request));
    try {
      const auto snapshot = snapshots_();
      std::vector<ForwardResult> results = predict_batch(*snapshot, requests);
      for (std::size_t i = 0; i < batch.size(); ++i) batch[i].promise.set_value(std::move(results[i]));
    } catch (...) {
      for (Pending& p : batch) p.promise.set_exception(std::current_exception());
    }
    std::lock_guard lock(stats_mutex_);
    ++batches_;
    requests_ += batch.size();
  }
}

void PredictionService::shutdown() {
  {
    std::lock_guard lock(stats_mutex_);
    if (stopped_) return;
    stopped_ = true;
  }
  queue_.close();
  for (Pending& p : queue_.drain()) p.promise.set_exception(std::make_exception_ptr(PredictionCancelled()));
  for (std::thread& t : workers_) t.join();
}

std::size_t PredictionService::batches_served() const {
  std::lock_guard lock(stats_mutex_);
  return batches_;
}

std::size_t PredictionService::requests_served() const {
  std::lock_guard lock(stats_mutex_);
  return requests_;
}

// Evaluation and consolidation

EvalResult evaluate(const NetworkParams& snapshot, std::string_view task, const EnvironmentFactory& env,
                    std::size_t episodes, std::uint64_t seed, bool greedy) {
  EvalResult result;
  EnvironmentHandler handler(env());
  for (std::size_t e = 0; e < episodes; ++e) {
    handler.reset(derive_key(derive_key(seed, kEvalResetStream), e));
    CounterRng rng(derive_key(derive_key(seed, kEvalActionStream), e));
    double score = 0.0;
    std::size_t length = 0;
    while (!handler.terminal()) {
      const ForwardResult r = forward(snapshot, task, handler.state());
      const std::size_t action = greedy ? argmax(r.policy) : rng.categorical(r.policy);
      score += handler.step(action).reward;
      ++length;
    }
    result.scores.push_back(score);
    result.lengths.push_back(length);
  }
  if (!result.scores.empty()) {
    double sum = 0.0;
    for (double s : result.scores) sum += s;
    result.mean = sum / static_cast<double>(result.scores.size());
    if (result.scores.size() > 1) {
      double sq = 0.0;
      for (double s : result.scores) sq += (s - result.mean) * (s - result.mean);
      result.stddev = std::sqrt(sq / static_cast<double>(result.scores.size() - 1));
    }
  }
  return result;
}

std::vector<Tensor> collect_states(const NetworkParams& params, std::string_view task, const EnvironmentFactory& env,
                                   std::size_t count, std::uint64_t seed) {
  std::vector<Tensor> states;
  states.reserve(count);
  EnvironmentHandler handler(env());
  CounterRng rng(derive_key(seed, kCollectStream));
  for (std::size_t episode = 0; states.size() < count; ++episode) {
    handler.reset(derive_key(derive_key(seed, kCollectStream + 1), episode));
    while (!handler.terminal() && states.size() < count) {
      states.push_back(handler.state());
      const ForwardResult r = forward(params, task, handler.state());
      handler.step(rng.categorical(r.policy));
    }
  }
  return states;
}

EwcAnchor consolidate_from_states(const NetworkParams& params, const std::map<TaskId, std::vector<Tensor>>& states,
                                  const ConsolidationOptions& options) {
  if (states.empty()) throw ContractViolation("consolidation needs at least one task");
  std::vector<std::string> scope = options.scope;
  if (scope.empty()) {
    for (const std::string& name : params.tensor_names()) {
      if (NetworkParams::is_trunk_name(name)) scope.push_back(name);
    }
  }
  EwcAnchor anchor;
  anchor.lambda = options.lambda;
  for (const std::string& name : scope) {
    const Tensor* theta = params.find(name);
    if (!theta) throw LookupError("consolidation scope names unknown tensor '" + name + "'");
    anchor.theta_star.emplace(name, *theta);
    anchor.fisher.emplace(name, Tensor(theta->shape()));
  }
  const double weight = 1.0 / static_cast<double>(states.size());
  std::uint64_t index = 0;
  for (const auto& [task, samples] : states) {
    const auto fisher = estimate_fisher(params, task, samples, options.mode, derive_key(options.seed, index++));
    for (auto& [name, acc] : anchor.fisher) {
      auto it = fisher.find(name);
      if (it != fisher.end()) acc.add_scaled(it->second, weight);
    }
  }
  anchor.validate();
  return anchor;
}

EwcAnchor consolidate(const NetworkParams& params, std::span<const TaskId> tasks, const EnvironmentFactories& envs,
                      const ConsolidationOptions& options) {
  std::map<TaskId, std::vector<Tensor>> states;
  std::uint64_t index = 0;
  for (const TaskId& task : tasks) {
    auto env = envs.find(task);
    if (env == envs.end()) throw ConfigError("no environment registered for task '" + task + "'");
    states[task] = collect_states(params, task, env->second, options.sample_size,
                                  derive_key(derive_key(options.seed, 0xc0150ULL), index++));
  }
  return consolidate_from_states(params, states, options);
}

}  // namespace ugp
