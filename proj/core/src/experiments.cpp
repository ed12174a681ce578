#include "ugp/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "ugp/checkpoint.hpp"
#include "ugp/errors.hpp"
#include "ugp/rng.hpp"
#include "ugp/shooter.hpp"

namespace ugp {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTrainStream = 0x7a1ULL;
constexpr std::uint64_t kTransferStream = 0x7a2ULL;
constexpr std::uint64_t kConsolidateStream = 0xc05ULL;
constexpr std::uint64_t kEvalStream = 0xe7aULL;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double parse_double(std::string_view text, std::string_view what) {
  double v = 0.0;
  const std::string s = trim(text);
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError("expected a number for " + std::string(what) + ", got '" + s + "'");
  }
  return v;
}

std::size_t parse_size(std::string_view text, std::string_view what) {
  std::size_t v = 0;
  const std::string s = trim(text);
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError("expected a nonnegative integer for " + std::string(what) + ", got '" + s + "'");
  }
  return v;
}

std::uint64_t eval_seed(std::uint64_t seed, std::string_view task) {
  return derive_key(derive_key(seed, kEvalStream), fnv1a(task));
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_log(const fs::path& path, const TrainingLog& log) {
  std::ostringstream ss;
  log.write_csv(ss);
  write_text(path, ss.str());
}

void write_evals(const fs::path& path, std::span<const EvalRecord> rows) {
  std::ostringstream ss;
  write_eval_csv(ss, rows);
  write_text(path, ss.str());
}

std::vector<EvalRecord> read_evals(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return read_eval_csv(in);
}

void save_params(const fs::path& path, const NetworkParams& params) {
  TensorArchive archive;
  export_network(params, archive);
  fs::create_directories(path.parent_path());
  save_archive(path, archive);
}

std::string lambda_label(double lambda) { return "lambda-" + format_number(lambda); }

}  // namespace

// Key = value configuration

KeyValueConfig KeyValueConfig::parse(std::istream& in, std::string_view origin) {
  KeyValueConfig config;
  config.origin_ = std::string(origin);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(config.origin_ + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(config.origin_ + ":" + std::to_string(number) + ": empty key");
    if (config.values_.contains(key)) {
      throw ConfigError(config.origin_ + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
    }
    config.set(std::move(key), std::move(value));
  }
  return config;
}

KeyValueConfig KeyValueConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in, path.string());
}

void KeyValueConfig::set(std::string key, std::string value) {
  used_[key] = false;
  values_[std::move(key)] = std::move(value);
}

bool KeyValueConfig::has(std::string_view key) const { return values_.contains(key); }

std::string KeyValueConfig::get(std::string_view key, std::string_view fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::string(fallback);
  used_.find(key)->second = true;
  return it->second;
}

std::string KeyValueConfig::require(std::string_view key) const {
  if (!has(key)) throw ConfigError(origin_ + ": missing required key '" + std::string(key) + "'");
  return get(key, "");
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  return has(key) ? parse_double(get(key, ""), key) : fallback;
}

std::size_t KeyValueConfig::get_size(std::string_view key, std::size_t fallback) const {
  return has(key) ? parse_size(get(key, ""), key) : fallback;
}

bool KeyValueConfig::get_bool(std::string_view key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean for " + std::string(key) + ", got '" + v + "'");
}

std::vector<std::string> KeyValueConfig::keys_with_prefix(std::string_view prefix) const {
  std::vector<std::string> keys;
  for (const auto& [k, v] : values_) {
    if (k.starts_with(prefix)) keys.push_back(k);
  }
  return keys;
}

std::vector<std::string> KeyValueConfig::unused_keys() const {
  std::vector<std::string> keys;
  for (const auto& [k, used] : used_) {
    if (!used) keys.push_back(k);
  }
  return keys;
}

std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(sep, start), text.size());
    std::string item = trim(text.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = end + 1;
  }
  return out;
}

std::vector<LayerSpec> parse_trunk(std::string_view text) {
  std::vector<LayerSpec> trunk;
  for (const std::string& token : split_list(text)) {
    if (token == "relu") {
      trunk.push_back(LayerSpec::relu());
    } else if (token.starts_with("fc")) {
      trunk.push_back(LayerSpec::dense(parse_size(std::string_view(token).substr(2), "trunk layer " + token)));
    } else if (token.starts_with("conv")) {
      // convFxKsS
      const std::string body = token.substr(4);
      const auto x = body.find('x');
      const auto s = body.find('s', x == std::string::npos ? 0 : x);
      if (x == std::string::npos || s == std::string::npos) {
        throw ConfigError("convolution layers are written convFxKsS, got '" + token + "'");
      }
      trunk.push_back(LayerSpec::conv(parse_size(body.substr(0, x), token),
                                      parse_size(body.substr(x + 1, s - x - 1), token),
                                      parse_size(body.substr(s + 1), token)));
    } else {
      throw ConfigError("unknown trunk layer '" + token + "'");
    }
  }
  if (trunk.empty()) throw ConfigError("trunk description is empty");
  return trunk;
}

std::string describe_trunk(std::span<const LayerSpec> trunk) {
  std::string out;
  for (const LayerSpec& l : trunk) {
    if (!out.empty()) out += ',';
    switch (l.kind) {
      case LayerKind::relu: out += "relu"; break;
      case LayerKind::fully_connected: out += "fc" + std::to_string(l.width); break;
      case LayerKind::convolution:
        out += "conv" + std::to_string(l.filters) + "x" + std::to_string(l.kernel) + "s" + std::to_string(l.stride);
        break;
      case LayerKind::softmax: out += "softmax"; break;
    }
  }
  return out;
}

void AgentHyperparams::apply(const KeyValueConfig& config) {
  if (config.has("trunk")) trunk = parse_trunk(config.get("trunk", ""));
  learning_rate = config.get_double("learning_rate", learning_rate);
  training_batch = config.get_size("training_batch", training_batch);
  rollout_length = config.get_size("rollout_length", rollout_length);
  gamma = config.get_double("gamma", gamma);
  loss.value = config.get_double("value_weight", loss.value);
  loss.entropy = config.get_double("entropy_weight", loss.entropy);
  deterministic = config.get_bool("deterministic", deterministic);
  image_profile = config.get_bool("image_profile", image_profile);
}

// Tasks and agents

EnvironmentFactory TaskRegistry::factory(const TaskId& task) const {
  if (is_shooter_variant(task)) {
    const bool image = image_profile;
    return [task, image] { return make_shooter(task, image); };
  }
  if (env_server) return remote_factory(*env_server, task);
  throw ConfigError("task '" + task + "' is not a built-in shooter and no --env-server was given");
}

EnvironmentFactories TaskRegistry::factories(std::span<const TaskId> tasks) const {
  EnvironmentFactories out;
  for (const TaskId& t : tasks) out.emplace(t, factory(t));
  return out;
}

std::size_t TaskRegistry::action_count(const TaskId& task) const { return factory(task)()->action_count(); }

Shape TaskRegistry::state_shape(const TaskId& task) const {
  return factory(task)()->frame_profile().state_shape();
}

Agent make_agent(const AgentHyperparams& hp, const TaskRegistry& registry, std::span<const TaskId> tasks,
                 std::uint64_t seed) {
  if (tasks.empty()) throw ConfigError("an agent needs at least one task head");
  std::map<TaskId, std::size_t> heads;
  Shape input;
  for (const TaskId& t : tasks) {
    auto env = registry.factory(t)();
    const Shape shape = env->frame_profile().state_shape();
    if (input.empty()) {
      input = shape;
    } else if (shape != input) {
      throw ConfigError("task '" + t + "' produces states " + shape_to_string(shape) + " but '" + tasks.front() +
                        "' produces " + shape_to_string(input) + "; one trunk cannot serve both");
    }
    heads[t] = env->action_count();
  }
  Agent agent;
  agent.params = build_network(hp.trunk, input, heads, seed);
  agent.optimizer.learning_rate = hp.learning_rate;
  agent.optimizer.validate();
  return agent;
}

// Evaluation CSV

void write_eval_csv(std::ostream& out, std::span<const EvalRecord> rows) {
  out << kEvalCsvHeader << '\n';
  for (const EvalRecord& r : rows) {
    out << r.agent << ',' << r.seed << ',' << r.phase << ',' << r.episodes_trained << ',' << r.task << ','
        << r.eval_episodes << ',' << format_number(r.mean) << ',' << format_number(r.stddev) << ','
        << r.params_version << '\n';
  }
}

std::vector<EvalRecord> read_eval_csv(std::istream& in) {
  std::vector<EvalRecord> rows;
  std::string line;
  if (!std::getline(in, line)) return rows;
  if (line != kEvalCsvHeader) throw FormatError("evaluation log has unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_list(line);
    if (f.size() != 9) throw FormatError("evaluation log row has " + std::to_string(f.size()) + " fields");
    EvalRecord r;
    r.agent = f[0];
    r.seed = parse_size(f[1], "seed");
    r.phase = f[2];
    r.episodes_trained = parse_size(f[3], "episodes_trained");
    r.task = f[4];
    r.eval_episodes = parse_size(f[5], "eval_episodes");
    r.mean = parse_double(f[6], "mean");
    r.stddev = parse_double(f[7], "stddev");
    r.params_version = parse_size(f[8], "params_version");
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

/// One agent lineage: trains with periodic evaluation and records everything.
struct Trainer {
  std::string agent_name;
  std::uint64_t seed = 0;
  const AgentHyperparams& hp;
  const TaskRegistry& registry;
  std::size_t eval_every = 0;
  std::size_t eval_episodes = 100;
  bool greedy = false;
  std::vector<EvalRecord>& evals;

  void evaluate_now(const NetworkParams& params, const std::string& phase, std::size_t episodes_trained,
                    std::span<const TaskId> tasks) {
    for (const TaskId& task : tasks) {
      const EvalResult r = evaluate(params, task, registry.factory(task), eval_episodes, eval_seed(seed, task), greedy);
      evals.push_back({agent_name, seed, phase, episodes_trained, task, eval_episodes, r.mean, r.stddev,
                       params.version});
    }
  }

  TrainingLog train(Agent& agent, const std::map<TaskId, std::size_t>& assignment, std::size_t episodes,
                    std::uint64_t run_seed, std::size_t offset, const std::string& phase,
                    std::span<const TaskId> eval_tasks) {
    EngineConfig config;
    config.assignment = assignment;
    config.training_batch = hp.training_batch;
    config.rollout_length = hp.rollout_length;
    config.gamma = hp.gamma;
    config.loss = hp.loss;
    config.deterministic = hp.deterministic;
    config.max_episodes = episodes;
    config.seed = run_seed;
    config.episode_offset = offset;
    std::vector<TaskId> tasks;
    for (const auto& [t, n] : assignment) tasks.push_back(t);
    TrainingHooks hooks;
    if (eval_every > 0 && !eval_tasks.empty()) {
      hooks.every_episodes = eval_every;
      hooks.on_checkpoint = [&](const NetworkParams& snapshot, std::size_t done) {
        if (done < episodes) evaluate_now(snapshot, phase, offset + done, eval_tasks);
      };
    }
    TrainingLog log = run_training(config, agent, registry.factories(tasks), hooks);
    if (!eval_tasks.empty()) evaluate_now(agent.params, phase, offset + episodes, eval_tasks);
    return log;
  }
};

}  // namespace

// Plans

std::string PlanPhase::describe() const {
  switch (kind) {
    case PhaseKind::train: {
      std::string s = "train";
      for (const auto& [t, n] : assignment) s += " " + t + ":" + std::to_string(n);
      return s + " episodes=" + std::to_string(episodes);
    }
    case PhaseKind::consolidate: {
      std::string s = "consolidate lambda=" + format_number(lambda) + " tasks=";
      for (std::size_t i = 0; i < tasks.size(); ++i) s += (i ? "," : "") + tasks[i];
      return s;
    }
    case PhaseKind::evaluate: {
      std::string s = "evaluate";
      for (const TaskId& t : tasks) s += " " + t;
      return s + " episodes=" + std::to_string(episodes);
    }
    case PhaseKind::snapshot:
      return "snapshot path=" + path.string();
  }
  return "?";
}

namespace {

PlanPhase parse_phase(const std::string& key, const std::string& text) {
  std::istringstream ss(text);
  std::string verb;
  ss >> verb;
  PlanPhase p;
  std::map<std::string, std::string> options;
  std::vector<std::string> positional;
  std::string word;
  while (ss >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) {
      positional.push_back(word);
    } else {
      options[word.substr(0, eq)] = word.substr(eq + 1);
    }
  }
  auto take = [&](const std::string& name) -> std::optional<std::string> {
    auto it = options.find(name);
    if (it == options.end()) return std::nullopt;
    std::string v = it->second;
    options.erase(it);
    return v;
  };
  if (verb == "train") {
    p.kind = PhaseKind::train;
    for (const std::string& item : positional) {
      for (const std::string& entry : split_list(item)) {
        const auto colon = entry.rfind(':');
        if (colon == std::string::npos) {
          p.assignment[entry] += 1;
        } else {
          p.assignment[entry.substr(0, colon)] += parse_size(entry.substr(colon + 1), key);
        }
      }
    }
    p.episodes = parse_size(take("episodes").value_or(""), key + " episodes");
  } else if (verb == "consolidate") {
    p.kind = PhaseKind::consolidate;
    p.lambda = parse_double(take("lambda").value_or(""), key + " lambda");
    p.tasks = split_list(take("tasks").value_or(""));
  } else if (verb == "evaluate") {
    p.kind = PhaseKind::evaluate;
    for (const std::string& item : positional) {
      for (const std::string& t : split_list(item)) p.tasks.push_back(t);
    }
    p.episodes = parse_size(take("episodes").value_or("100"), key + " episodes");
  } else if (verb == "snapshot") {
    p.kind = PhaseKind::snapshot;
    p.path = take("path").value_or(positional.empty() ? "" : positional.front());
    if (p.path.empty()) throw ConfigError(key + ": snapshot needs a path");
  } else {
    throw ConfigError(key + ": unknown phase '" + verb + "'");
  }
  if (!options.empty()) throw ConfigError(key + ": unknown option '" + options.begin()->first + "'");
  return p;
}

}  // namespace

ExperimentPlan ExperimentPlan::from_config(const KeyValueConfig& config) {
  ExperimentPlan plan;
  plan.name = config.get("name", plan.name);
  plan.out = config.get("out", plan.out.string());
  if (config.has("init_checkpoint")) plan.init_checkpoint = fs::path(config.get("init_checkpoint", ""));
  plan.eval_every = config.get_size("eval_every", plan.eval_every);
  plan.eval_episodes = config.get_size("eval_episodes", plan.eval_episodes);
  plan.eval_greedy = config.get_bool("eval_greedy", plan.eval_greedy);
  plan.fisher_samples = config.get_size("fisher_samples", plan.fisher_samples);
  plan.hyper.apply(config);
  plan.registry.image_profile = plan.hyper.image_profile;
  if (config.has("env_server")) plan.registry.env_server = parse_endpoint(config.get("env_server", ""));
  if (config.has("seeds")) {
    plan.seeds.clear();
    for (const std::string& s : split_list(config.get("seeds", ""))) plan.seeds.push_back(parse_size(s, "seeds"));
  }

  std::vector<std::pair<std::size_t, std::string>> phase_keys;
  for (const std::string& key : config.keys_with_prefix("phase.")) {
    phase_keys.emplace_back(parse_size(std::string_view(key).substr(6), key), key);
  }
  std::sort(phase_keys.begin(), phase_keys.end());
  for (const auto& [index, key] : phase_keys) plan.phases.push_back(parse_phase(key, config.get(key, "")));

  if (config.has("heads")) {
    plan.heads = split_list(config.get("heads", ""));
  } else {
    std::set<TaskId> seen;
    for (const PlanPhase& p : plan.phases) {
      for (const auto& [t, n] : p.assignment) seen.insert(t);
      for (const TaskId& t : p.tasks) seen.insert(t);
    }
    plan.heads.assign(seen.begin(), seen.end());
  }
  if (auto unused = config.unused_keys(); !unused.empty()) {
    throw ConfigError("unknown config key '" + unused.front() + "'");
  }
  plan.validate();
  return plan;
}

void ExperimentPlan::validate() const {
  if (phases.empty()) throw ConfigError("plan '" + name + "' has no phases");
  if (seeds.empty()) throw ConfigError("plan '" + name + "' has no seeds");
  const std::set<TaskId> head_set(heads.begin(), heads.end());
  std::set<TaskId> trained;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const PlanPhase& p = phases[i];
    const std::string where = "phase " + std::to_string(i + 1) + " (" + p.describe() + ")";
    auto check_head = [&](const TaskId& t) {
      if (!head_set.contains(t)) throw ConfigError(where + " uses task '" + t + "' without a head");
    };
    switch (p.kind) {
      case PhaseKind::train:
        if (p.assignment.empty() || p.episodes == 0) throw ConfigError(where + " needs tasks and an episode budget");
        for (const auto& [t, n] : p.assignment) {
          check_head(t);
          trained.insert(t);
        }
        break;
      case PhaseKind::consolidate:
        if (p.lambda < 0.0) throw ConfigError(where + ": lambda must be nonnegative");
        if (p.tasks.empty()) throw ConfigError(where + " lists no tasks");
        for (const TaskId& t : p.tasks) {
          check_head(t);
          if (!trained.contains(t) && !init_checkpoint) throw ConfigError(where + " consolidates untrained task " + t);
        }
        break;
      case PhaseKind::evaluate:
        if (p.tasks.empty() || p.episodes == 0) throw ConfigError(where + " needs tasks and an episode count");
        for (const TaskId& t : p.tasks) check_head(t);
        break;
      case PhaseKind::snapshot:
        break;
    }
  }
}

fs::path resolve_output_dir(const fs::path& requested) {
  if (const char* env = std::getenv("UGP_OUT"); env && *env) return fs::path(env);
  return requested;
}

PlanResult run_plan(const ExperimentPlan& plan) {
  plan.validate();
  PlanResult result;
  const fs::path out = plan.out;
  for (std::uint64_t seed : plan.seeds) {
    const fs::path dir = out / ("seed-" + std::to_string(seed));
    Agent agent = plan.init_checkpoint ? Agent::load(*plan.init_checkpoint)
                                       : make_agent(plan.hyper, plan.registry, plan.heads, seed);
    if (plan.init_checkpoint) agent.optimizer.learning_rate = plan.hyper.learning_rate;
    Trainer trainer{plan.name,       seed,          plan.hyper,       plan.registry,
                    plan.eval_every, plan.eval_episodes, plan.eval_greedy, result.evaluations};
    TrainingLog combined;
    std::size_t episodes_done = 0;
    try {
      for (std::size_t i = 0; i < plan.phases.size(); ++i) {
        const PlanPhase& p = plan.phases[i];
        const std::string phase = "phase-" + std::to_string(i + 1);
        switch (p.kind) {
          case PhaseKind::train: {
            std::vector<TaskId> tasks;
            for (const auto& [t, n] : p.assignment) tasks.push_back(t);
            TrainingLog log = trainer.train(agent, p.assignment, p.episodes, derive_key(seed, i), episodes_done,
                                            phase, tasks);
            episodes_done += log.episodes.size();
            combined.episodes.insert(combined.episodes.end(), log.episodes.begin(), log.episodes.end());
            break;
          }
          case PhaseKind::consolidate: {
            ConsolidationOptions options;
            options.lambda = p.lambda;
            options.sample_size = plan.fisher_samples;
            options.seed = derive_key(seed, kConsolidateStream + i);
            agent.anchors.push_back(consolidate(agent.params, p.tasks, plan.registry.factories(p.tasks), options));
            break;
          }
          case PhaseKind::evaluate: {
            Trainer eval = trainer;
            eval.eval_episodes = p.episodes;
            eval.evaluate_now(agent.params, phase, episodes_done, p.tasks);
            break;
          }
          case PhaseKind::snapshot: {
            const fs::path path = p.path.is_absolute() ? p.path : dir / p.path;
            fs::create_directories(path.parent_path());
            agent.save(path);
            result.files.push_back(path);
            break;
          }
        }
      }
    } catch (...) {
      write_log(dir / "training_log.csv", combined);
      write_evals(out / "evaluations.csv", result.evaluations);
      throw;
    }
    write_log(dir / "training_log.csv", combined);
    result.files.push_back(dir / "training_log.csv");
  }
  write_evals(out / "evaluations.csv", result.evaluations);
  result.files.push_back(out / "evaluations.csv");
  return result;
}

// Studies

std::size_t StudySettings::budget() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(base_episodes) * scale)));
}

std::size_t StudySettings::transfer_budget() const { return std::max<std::size_t>(1, budget() / 3); }

std::size_t StudySettings::eval_every() const {
  return eval_divisions == 0 ? 0 : std::max<std::size_t>(1, budget() / eval_divisions);
}

void StudySettings::validate() const {
  if (!(scale > 0.0)) throw ConfigError("study scale must be positive");
  if (seeds == 0) throw ConfigError("a study needs at least one seed");
  if (eval_episodes == 0) throw ConfigError("evaluation needs at least one episode");
  if (single_actors == 0 || hybrid_actors_per_task == 0) throw ConfigError("agents need at least one actor-learner");
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw ConfigError("lambda values must be nonnegative");
  }
}

namespace {

/// Everything that determines a Hybrid lineage; study 2 reuses a study-1
/// checkpoint only when these match.
std::string lineage_fingerprint(const StudySettings& s) {
  std::ostringstream ss;
  ss << "budget=" << s.budget() << '\n'
     << "hybrid_actors_per_task=" << s.hybrid_actors_per_task << '\n'
     << "single_actors=" << s.single_actors << '\n'
     << "trunk=" << describe_trunk(s.hyper.trunk) << '\n'
     << "learning_rate=" << format_number(s.hyper.learning_rate) << '\n'
     << "training_batch=" << s.hyper.training_batch << '\n'
     << "rollout_length=" << s.hyper.rollout_length << '\n'
     << "gamma=" << format_number(s.hyper.gamma) << '\n'
     << "value_weight=" << format_number(s.hyper.loss.value) << '\n'
     << "entropy_weight=" << format_number(s.hyper.loss.entropy) << '\n'
     << "deterministic=" << s.hyper.deterministic << '\n'
     << "image_profile=" << s.hyper.image_profile << '\n';
  return ss.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct AgentRoster {
  std::string name;
  std::map<TaskId, std::size_t> assignment;
  bool transfers = true;
};

std::vector<AgentRoster> study1_roster(const StudySettings& s) {
  return {
      {"single-a", {{kTaskA, s.single_actors}}, true},
      {"single-b", {{kTaskB, s.single_actors}}, true},
      {"single-c", {{kTaskC, s.single_actors}}, false},
      {"hybrid", {{kTaskA, s.hybrid_actors_per_task}, {kTaskB, s.hybrid_actors_per_task}}, true},
  };
}

const std::vector<TaskId>& all_tasks() {
  static const std::vector<TaskId> tasks = {kTaskA, kTaskB, kTaskC};
  return tasks;
}

std::map<TaskId, std::size_t> transfer_assignment(const StudySettings& s) { return {{kTaskC, s.single_actors}}; }

void log_line(const StudySettings& s, const std::string& text) {
  if (s.verbose) std::cerr << text << std::endl;
}

/// Trains the pre-transfer stage of one roster agent and persists it.
Agent train_source_stage(const StudySettings& s, const AgentRoster& roster, std::uint64_t seed, const fs::path& dir,
                         std::vector<EvalRecord>& evals, const TaskRegistry& registry) {
  Agent agent = make_agent(s.hyper, registry, all_tasks(), seed);
  Trainer trainer{roster.name, seed, s.hyper, registry, s.eval_every(), s.eval_episodes, s.eval_greedy, evals};
  std::vector<TaskId> tasks;
  for (const auto& [t, n] : roster.assignment) tasks.push_back(t);
  trainer.evaluate_now(agent.params, "train", 0, tasks);
  const TrainingLog log =
      trainer.train(agent, roster.assignment, s.budget(), derive_key(seed, kTrainStream), 0, "train", tasks);
  write_log(dir / "train.csv", log);
  agent.save(dir / "pre.ugpc");
  return agent;
}

TrainingLog train_transfer_stage(const StudySettings& s, const std::string& name, Agent& agent, std::uint64_t seed,
                                 std::span<const TaskId> eval_tasks, std::vector<EvalRecord>& evals,
                                 const TaskRegistry& registry) {
  Trainer trainer{name, seed, s.hyper, registry, s.eval_every(), s.eval_episodes, s.eval_greedy, evals};
  return trainer.train(agent, transfer_assignment(s), s.transfer_budget(), derive_key(seed, kTransferStream),
                       s.budget(), "transfer", eval_tasks);
}

}  // namespace

StudyReport run_study1(const StudySettings& settings) {
  settings.validate();
  const auto start = std::chrono::steady_clock::now();
  StudyReport report;
  report.out = settings.out;
  const fs::path root = settings.out / "study1";
  fs::create_directories(root);
  write_text(root / "lineage.txt", lineage_fingerprint(settings));
  TaskRegistry registry;
  registry.image_profile = settings.hyper.image_profile;

  std::vector<EvalRecord> evals;
  const std::vector<TaskId> transfer_eval = {kTaskC};
  try {
    for (std::size_t k = 0; k < settings.seeds; ++k) {
      const std::uint64_t seed = settings.first_seed + k;
      for (const AgentRoster& roster : study1_roster(settings)) {
        const fs::path dir = root / ("seed-" + std::to_string(seed)) / roster.name;
        Agent agent = train_source_stage(settings, roster, seed, dir, evals, registry);
        log_line(settings, "study1 seed " + std::to_string(seed) + " " + roster.name + " trained");
        if (roster.transfers) {
          const TrainingLog log = train_transfer_stage(settings, roster.name, agent, seed, transfer_eval, evals,
                                                       registry);
          write_log(dir / "transfer.csv", log);
          agent.save(dir / "final.ugpc");
          save_params(dir / "final-params.ugpc", agent.params);
          log_line(settings, "study1 seed " + std::to_string(seed) + " " + roster.name + " transferred");
        }
        write_evals(root / "evaluations.csv", evals);
      }
    }
  } catch (...) {
    write_evals(root / "evaluations.csv", evals);
    throw;
  }
  write_evals(root / "evaluations.csv", evals);
  report.files = emit_report(settings.out);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

StudyReport run_study2(const StudySettings& settings) {
  settings.validate();
  if (settings.lambdas.empty()) throw ConfigError("study 2 needs at least one lambda");
  const auto start = std::chrono::steady_clock::now();
  StudyReport report;
  report.out = settings.out;
  const fs::path root = settings.out / "study2";
  fs::create_directories(root);
  const std::string fingerprint = lineage_fingerprint(settings);
  const bool reuse = read_text(settings.out / "study1" / "lineage.txt") == fingerprint;
  TaskRegistry registry;
  registry.image_profile = settings.hyper.image_profile;

  std::vector<EvalRecord> evals;
  const std::vector<TaskId> sources = {kTaskA, kTaskB};
  try {
    for (std::size_t k = 0; k < settings.seeds; ++k) {
      const std::uint64_t seed = settings.first_seed + k;
      const fs::path seed_dir = root / ("seed-" + std::to_string(seed));
      const fs::path study1_ckpt = settings.out / "study1" / ("seed-" + std::to_string(seed)) / "hybrid" / "pre.ugpc";
      Agent hybrid;
      if (reuse && fs::exists(study1_ckpt)) {
        hybrid = Agent::load(study1_ckpt);
        log_line(settings, "study2 seed " + std::to_string(seed) + " reusing " + study1_ckpt.string());
      } else {
        std::vector<EvalRecord> scratch;
        const AgentRoster roster = study1_roster(settings)[3];
        hybrid = train_source_stage(settings, roster, seed, seed_dir / "hybrid", scratch, registry);
        log_line(settings, "study2 seed " + std::to_string(seed) + " hybrid trained in-run");
      }
      Trainer pre{"hybrid", seed, settings.hyper, registry, 0, settings.eval_episodes, settings.eval_greedy, evals};
      pre.evaluate_now(hybrid.params, "pre-transfer", settings.budget(), all_tasks());

      for (double lambda : settings.lambdas) {
        const std::string name = "ugp-" + lambda_label(lambda);
        const fs::path dir = seed_dir / lambda_label(lambda);
        Agent agent = hybrid;
        ConsolidationOptions options;
        options.lambda = lambda;
        options.sample_size = settings.fisher_samples;
        options.seed = derive_key(seed, kConsolidateStream);
        agent.anchors.push_back(consolidate(agent.params, sources, registry.factories(sources), options));
        const TrainingLog log = train_transfer_stage(settings, name, agent, seed, all_tasks(), evals, registry);
        write_log(dir / "transfer.csv", log);
        agent.save(dir / "final.ugpc");
        save_params(dir / "final-params.ugpc", agent.params);
        write_evals(root / "evaluations.csv", evals);
        log_line(settings, "study2 seed " + std::to_string(seed) + " " + name + " done");
      }
    }
  } catch (...) {
    write_evals(root / "evaluations.csv", evals);
    throw;
  }
  write_evals(root / "evaluations.csv", evals);
  report.files = emit_report(settings.out);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// Report

FinalScores final_scores(std::span<const EvalRecord> rows, std::string_view phase) {
  FinalScores out;
  for (const EvalRecord& r : rows) {
    if (r.phase != phase) continue;
    auto& slot = out.by_agent[r.agent][r.seed];
    auto it = slot.find(r.task);
    if (it == slot.end() || r.episodes_trained >= it->second.episodes_trained) slot[r.task] = r;
  }
  return out;
}

namespace {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Plain SVG line chart: one polyline per series, shared axes, legend.
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  const double W = 720, H = 440, left = 70, right = 180, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 0.0, y1 = -1e300;
  for (const Series& s : series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) {
    x0 = 0;
    x1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  y1 += 0.05 * (y1 - y0);
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title)
      << "</text>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5.0, yv = y0 + (y1 - y0) * i / 5.0;
    svg << "<line x1=\"" << fixed(px(xv), 1) << "\" y1=\"" << top + ph << "\" x2=\"" << fixed(px(xv), 1)
        << "\" y2=\"" << top + ph + 5 << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << fixed(px(xv), 1) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << fixed(xv, 0) << "</text>\n";
    svg << "<line x1=\"" << left - 5 << "\" y1=\"" << fixed(py(yv), 1) << "\" x2=\"" << left + pw << "\" y2=\""
        << fixed(py(yv), 1) << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << fixed(py(yv) + 4, 1) << "\" text-anchor=\"end\">"
        << fixed(yv, 2) << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << escape_xml(x_label)
      << "</text>\n";
  svg << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape_xml(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const Series& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < s.points.size(); ++j) {
      svg << (j ? " " : "") << fixed(px(s.points[j].first), 1) << "," << fixed(py(s.points[j].second), 1);
    }
    svg << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    svg << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape_xml(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// Mean over seeds of the evaluation curve for (agent, task) restricted to `phases`.
Series mean_curve(std::span<const EvalRecord> rows, const std::string& agent, const TaskId& task,
                  const std::set<std::string>& phases, std::string label) {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const EvalRecord& r : rows) {
    if (r.agent != agent || r.task != task || !phases.contains(r.phase)) continue;
    auto& [sum, n] = acc[r.episodes_trained];
    sum += r.mean;
    ++n;
  }
  Series s{std::move(label), {}};
  for (const auto& [x, v] : acc) s.points.emplace_back(static_cast<double>(x), v.first / static_cast<double>(v.second));
  return s;
}

struct Stats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t n = 0;
};

Stats stats_of(const std::vector<double>& v) {
  Stats s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double sq = 0.0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string pm(const Stats& s) { return s.n == 0 ? "n/a" : fixed(s.mean) + " ± " + fixed(s.stddev); }

std::vector<std::string> agents_in(std::span<const EvalRecord> rows) {
  std::vector<std::string> out;
  for (const EvalRecord& r : rows) {
    if (std::find(out.begin(), out.end(), r.agent) == out.end()) out.push_back(r.agent);
  }
  return out;
}

std::vector<TaskId> tasks_in(std::span<const EvalRecord> rows, const std::string& agent) {
  std::set<TaskId> out;
  for (const EvalRecord& r : rows) {
    if (r.agent == agent) out.insert(r.task);
  }
  return {out.begin(), out.end()};
}

std::string study1_section(std::span<const EvalRecord> rows, const fs::path& report_dir,
                           std::vector<fs::path>& files) {
  std::ostringstream md;
  md << "## Study 1: transfer to shooter-c\n\n";
  const auto trained = final_scores(rows, "train");
  const auto transfer = final_scores(rows, "transfer");
  const std::vector<std::string> agents = agents_in(rows);

  md << "Final evaluation after the source budget (mean ± std over seeds):\n\n| agent |";
  for (const TaskId& t : all_tasks()) md << ' ' << t << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < all_tasks().size(); ++i) md << "---|";
  md << '\n';
  for (const std::string& a : agents) {
    md << "| " << a << " |";
    for (const TaskId& t : all_tasks()) {
      std::vector<double> v;
      if (auto it = trained.by_agent.find(a); it != trained.by_agent.end()) {
        for (const auto& [seed, per_task] : it->second) {
          if (auto jt = per_task.find(t); jt != per_task.end()) v.push_back(jt->second.mean);
        }
      }
      md << ' ' << pm(stats_of(v)) << " |";
    }
    md << '\n';
  }

  md << "\nFinal evaluation on shooter-c after transfer:\n\n| agent | shooter-c | seeds |\n|---|---|---|\n";
  std::map<std::string, std::map<std::uint64_t, double>> c_final;
  for (const auto& [agent, seeds] : transfer.by_agent) {
    for (const auto& [seed, per_task] : seeds) {
      if (auto it = per_task.find(kTaskC); it != per_task.end()) c_final[agent][seed] = it->second.mean;
    }
  }
  for (const std::string& a : agents) {
    auto it = c_final.find(a);
    if (it == c_final.end()) continue;
    std::vector<double> v;
    for (const auto& [seed, m] : it->second) v.push_back(m);
    md << "| " << a << " | " << pm(stats_of(v)) << " | " << v.size() << " |\n";
  }
  if (c_final.contains("hybrid") && c_final.contains("single-a") && c_final.contains("single-b")) {
    std::size_t wins = 0, total = 0;
    for (const auto& [seed, h] : c_final["hybrid"]) {
      auto a = c_final["single-a"].find(seed);
      auto b = c_final["single-b"].find(seed);
      if (a == c_final["single-a"].end() || b == c_final["single-b"].end()) continue;
      ++total;
      if (h > a->second && h > b->second) ++wins;
    }
    md << "\nHybrid beats both single-task agents on shooter-c in " << wins << " of " << total << " seeds.\n";
  }
  std::vector<std::string> missing;
  for (const char* a : {"single-a", "single-b", "hybrid"}) {
    if (!c_final.contains(a)) missing.push_back(a);
  }
  if (!missing.empty()) {
    md << "\nMissing transfer checkpoints:";
    for (const auto& m : missing) md << ' ' << m;
    md << "\n";
  }

  for (const TaskId& t : all_tasks()) {
    std::vector<Series> series;
    for (const std::string& a : agents) {
      Series s = mean_curve(rows, a, t, {"train"}, a);
      if (!s.points.empty()) series.push_back(std::move(s));
    }
    if (series.empty()) continue;
    const fs::path p = report_dir / ("study1_train_" + t + ".svg");
    write_text(p, line_chart("Training on " + t, "training episodes", "mean evaluation score", series));
    files.push_back(p);
  }
  std::vector<Series> series;
  for (const std::string& a : agents) {
    Series s = mean_curve(rows, a, kTaskC, {"transfer"}, a);
    if (!s.points.empty()) series.push_back(std::move(s));
  }
  if (!series.empty()) {
    const fs::path p = report_dir / "study1_transfer_shooter-c.svg";
    write_text(p, line_chart("Transfer to shooter-c", "training episodes", "mean evaluation score", series));
    files.push_back(p);
  }
  md << "\nPlots: ";
  for (const TaskId& t : all_tasks()) md << "`study1_train_" << t << ".svg`, ";
  md << "`study1_transfer_shooter-c.svg`.\n\n";
  return md.str();
}

std::string study2_section(std::span<const EvalRecord> rows, const fs::path& report_dir,
                           std::vector<fs::path>& files) {
  std::ostringstream md;
  md << "## Study 2: forgetting and consolidation\n\n";
  const auto pre = final_scores(rows, "pre-transfer");
  const auto post = final_scores(rows, "transfer");
  std::vector<std::string> agents;
  for (const std::string& a : agents_in(rows)) {
    if (a.starts_with("ugp-")) agents.push_back(a);
  }
  auto pre_score = [&](std::uint64_t seed, const TaskId& t) -> std::optional<double> {
    auto it = pre.by_agent.find("hybrid");
    if (it == pre.by_agent.end()) return std::nullopt;
    auto jt = it->second.find(seed);
    if (jt == it->second.end()) return std::nullopt;
    auto kt = jt->second.find(t);
    if (kt == jt->second.end()) return std::nullopt;
    return kt->second.mean;
  };

  md << "Retention (post-transfer score / pre-transfer score) per source task:\n\n"
     << "| agent | task | per-seed retention | mean |\n|---|---|---|---|\n";
  for (const std::string& a : agents) {
    for (const TaskId& t : {TaskId(kTaskA), TaskId(kTaskB)}) {
      std::vector<double> ratios;
      std::string cells;
      if (auto it = post.by_agent.find(a); it != post.by_agent.end()) {
        for (const auto& [seed, per_task] : it->second) {
          auto base = pre_score(seed, t);
          auto kt = per_task.find(t);
          if (!base || kt == per_task.end() || *base <= 0.0) continue;
          const double r = kt->second.mean / *base;
          ratios.push_back(r);
          cells += (cells.empty() ? "" : ", ") + std::to_string(seed) + ": " + fixed(r, 3);
        }
      }
      md << "| " << a << " | " << t << " | " << (cells.empty() ? "n/a" : cells) << " | "
         << (ratios.empty() ? "n/a" : fixed(stats_of(ratios).mean, 3)) << " |\n";
    }
  }

  md << "\nNew-task (shooter-c) score after transfer:\n\n| agent | shooter-c | seeds |\n|---|---|---|\n";
  for (const std::string& a : agents) {
    std::vector<double> v;
    if (auto it = post.by_agent.find(a); it != post.by_agent.end()) {
      for (const auto& [seed, per_task] : it->second) {
        if (auto kt = per_task.find(kTaskC); kt != per_task.end()) v.push_back(kt->second.mean);
      }
    }
    md << "| " << a << " | " << pm(stats_of(v)) << " | " << v.size() << " |\n";
  }

  for (const TaskId& t : all_tasks()) {
    std::vector<Series> series;
    for (const std::string& a : agents) {
      Series s = mean_curve(rows, a, t, {"transfer"}, a);
      if (!s.points.empty()) series.push_back(std::move(s));
    }
    if (series.empty()) continue;
    const std::string what = t == kTaskC ? "New task " + t : "Source task " + t;
    const fs::path p = report_dir / ("study2_" + t + ".svg");
    write_text(p, line_chart(what + " during transfer", "training episodes", "mean evaluation score", series));
    files.push_back(p);
  }
  md << "\nPlots: `study2_shooter-a.svg`, `study2_shooter-b.svg`, `study2_shooter-c.svg`.\n\n";
  return md.str();
}

void per_agent_tables(const std::string& study, std::span<const EvalRecord> rows, const fs::path& report_dir,
                      std::vector<fs::path>& files) {
  for (const std::string& a : agents_in(rows)) {
    for (const TaskId& t : tasks_in(rows, a)) {
      std::vector<EvalRecord> subset;
      for (const EvalRecord& r : rows) {
        if (r.agent == a && r.task == t) subset.push_back(r);
      }
      const fs::path p = report_dir / (study + "_" + a + "_" + t + ".csv");
      write_evals(p, subset);
      files.push_back(p);
    }
  }
}

}  // namespace

std::vector<fs::path> emit_report(const fs::path& out) {
  std::vector<fs::path> files;
  const fs::path report_dir = out / "report";
  fs::create_directories(report_dir);
  std::ostringstream md;
  md << "# Study report\n\n";
  md << "Every number below is read back from the evaluation logs under `study1/` and `study2/`.\n\n";

  const fs::path s1 = out / "study1" / "evaluations.csv";
  const fs::path s2 = out / "study2" / "evaluations.csv";
  if (fs::exists(s1)) {
    const auto rows = read_evals(s1);
    per_agent_tables("study1", rows, report_dir, files);
    md << study1_section(rows, report_dir, files);
  } else {
    md << "## Study 1\n\nNo evaluation log at `study1/evaluations.csv`.\n\n";
  }
  if (fs::exists(s2)) {
    const auto rows = read_evals(s2);
    per_agent_tables("study2", rows, report_dir, files);
    md << study2_section(rows, report_dir, files);
  } else {
    md << "## Study 2\n\nNo evaluation log at `study2/evaluations.csv`.\n\n";
  }
  write_text(report_dir / "summary.md", md.str());
  files.push_back(report_dir / "summary.md");
  return files;
}

}  // namespace ugp
