#include "ugp/losses.hpp"

#include <cmath>

#include "ugp/errors.hpp"
#include "ugp/rng.hpp"

namespace ugp {

namespace {

void check_rollout(const Rollout& rollout) {
  if (rollout.steps.empty()) throw ContractViolation("rollout has no steps");
  if (!(rollout.gamma >= 0.0 && rollout.gamma < 1.0)) {
    throw ContractViolation("discount must lie in [0, 1), got " + std::to_string(rollout.gamma));
  }
  if (rollout.terminal && rollout.bootstrap_value != 0.0) {
    throw ContractViolation("terminal rollout must bootstrap from 0");
  }
}

std::string anchor_prefix(std::size_t i) { return "ewc/" + std::to_string(i) + "/"; }

}  // namespace

std::vector<TrainingPoint> compute_returns(const Rollout& rollout) {
  Rollout copy = rollout;
  return compute_returns(std::move(copy));
}

std::vector<TrainingPoint> compute_returns(Rollout&& rollout) {
  check_rollout(rollout);
  std::vector<TrainingPoint> points(rollout.steps.size());
  double running = rollout.bootstrap_value;
  for (std::size_t t = rollout.steps.size(); t-- > 0;) {
    RolloutStep& step = rollout.steps[t];
    running = step.reward + rollout.gamma * running;
    points[t].task = rollout.task;
    points[t].state = std::move(step.state);
    points[t].action = step.action;
    points[t].return_target = running;
  }
  return points;
}

LogitLoss actor_loss(std::span<const double> logits, std::size_t action, double advantage) {
  if (action >= logits.size()) {
    throw IndexError("action " + std::to_string(action) + " out of range for " + std::to_string(logits.size()) +
                     " actions");
  }
  const std::vector<double> logp = log_softmax(logits);
  LogitLoss out;
  out.value = -logp[action] * advantage;
  // d(-log pi_a)/dz_j = pi_j - [j == a]
  out.dlogits.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double indicator = j == action ? 1.0 : 0.0;
    out.dlogits[j] = advantage * (std::exp(logp[j]) - indicator);
  }
  return out;
}

LogitLoss entropy_bonus(std::span<const double> logits) {
  const std::vector<double> logp = log_softmax(logits);
  LogitLoss out;
  double h = 0.0;
  for (double lp : logp) h -= std::exp(lp) * lp;
  out.value = h;
  // dH/dz_j = -pi_j (log pi_j + H)
  out.dlogits.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out.dlogits[j] = -std::exp(logp[j]) * (logp[j] + h);
  return out;
}

CriticLoss critic_loss(double value_estimate, double return_target) {
  const double residual = return_target - value_estimate;
  return {residual * residual, -2.0 * residual};
}

LossResult environment_loss(std::span<const TrainingPoint> batch, const NetworkParams& params,
                            const LossWeights& weights) {
  if (batch.empty()) throw ContractViolation("environment loss needs a nonempty batch");
  const TaskId& task = batch.front().task;
  for (const TrainingPoint& p : batch) {
    if (p.task != task) {
      throw ContractViolation("environment loss batch mixes tasks '" + task + "' and '" + p.task + "'");
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  LossResult result;
  double total = 0.0;
  for (const TrainingPoint& p : batch) {
    const ForwardResult fr = forward(params, task, p.state);
    const double advantage = p.return_target - fr.value;
    const LogitLoss actor = actor_loss(fr.logits, p.action, advantage);
    const CriticLoss critic = critic_loss(fr.value, p.return_target);
    const LogitLoss entropy = entropy_bonus(fr.logits);
    total += actor.value + weights.value * critic.value - weights.entropy * entropy.value;

    LossGrads g;
    g.dlogits.resize(actor.dlogits.size());
    for (std::size_t j = 0; j < g.dlogits.size(); ++j) {
      g.dlogits[j] = actor.dlogits[j] - weights.entropy * entropy.dlogits[j];
    }
    g.dvalue = weights.value * critic.dvalue;
    backward_into(params, task, fr, g, result.grads, inv_n);
  }
  result.loss = total * inv_n;
  return result;
}

std::vector<std::string> EwcAnchor::scope() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : theta_star) names.push_back(name);
  return names;
}

void EwcAnchor::validate() const {
  if (!(lambda >= 0.0)) throw ContractViolation("EWC lambda must be nonnegative");
  if (theta_star.size() != fisher.size()) throw ShapeError("EWC anchor snapshot and Fisher cover different tensors");
  for (const auto& [name, star] : theta_star) {
    auto it = fisher.find(name);
    if (it == fisher.end()) throw ShapeError("EWC anchor has no Fisher diagonal for '" + name + "'");
    if (!it->second.same_shape(star)) throw ShapeError("EWC anchor Fisher/snapshot shape mismatch for '" + name + "'");
    for (double f : it->second.values()) {
      if (!(f >= 0.0)) throw ContractViolation("EWC Fisher diagonal has a negative entry in '" + name + "'");
    }
  }
}

LossResult ewc_penalty(const NetworkParams& params, const EwcAnchor& anchor) {
  LossResult result;
  double total = 0.0;
  for (const auto& [name, star] : anchor.theta_star) {
    const Tensor* theta = params.find(name);
    if (!theta) throw LookupError("EWC scope tensor '" + name + "' is not a network parameter");
    const Tensor& f = anchor.fisher.at(name);
    if (!theta->same_shape(star) || !f.same_shape(star)) {
      throw ShapeError("EWC tensor '" + name + "' has shape " + shape_to_string(theta->shape()) + ", anchor has " +
                       shape_to_string(star.shape()));
    }
    Tensor& g = result.grads.slot(name, star.shape());
    for (std::size_t j = 0; j < star.size(); ++j) {
      const double d = (*theta)[j] - star[j];
      total += f[j] * d * d;
      g[j] = 2.0 * anchor.lambda * f[j] * d;
    }
  }
  result.loss = anchor.lambda * total;
  return result;
}

LossResult multi_env_loss(const std::map<TaskId, std::vector<TrainingPoint>>& batches, const NetworkParams& params,
                          std::span<const EwcAnchor> anchors, const LossWeights& weights) {
  LossResult result;
  for (const auto& [task, batch] : batches) {
    for (const TrainingPoint& p : batch) {
      if (p.task != task) throw ContractViolation("batch keyed '" + task + "' contains a point for '" + p.task + "'");
    }
    LossResult part = environment_loss(batch, params, weights);
    result.loss += part.loss;
    result.grads.merge(part.grads);
  }
  for (const EwcAnchor& anchor : anchors) {
    // A zero-strength anchor contributes exactly nothing; skipping it keeps
    // signed zeros out of the gradient sum.
    if (anchor.lambda == 0.0) continue;
    LossResult part = ewc_penalty(params, anchor);
    result.loss += part.loss;
    result.grads.merge(part.grads);
  }
  return result;
}

std::map<std::string, Tensor, std::less<>> estimate_fisher(const NetworkParams& params, std::string_view task,
                                                           std::span<const Tensor> states, FisherMode mode,
                                                           std::uint64_t seed) {
  if (states.empty()) throw ContractViolation("Fisher estimation needs at least one state");
  const std::size_t actions = params.head(task).action_count;
  CounterRng rng(derive_key(seed, 0xf15e7ULL));
  std::map<std::string, Tensor, std::less<>> fisher;
  const double inv_n = 1.0 / static_cast<double>(states.size());

  auto add_score_squared = [&](const ForwardResult& fr, std::size_t action, double weight) {
    // Score of log pi(action): d/dz_j = [j == action] - pi_j; as a loss gradient
    // the sign is irrelevant once squared.
    LossGrads g;
    g.dlogits.resize(actions);
    for (std::size_t j = 0; j < actions; ++j) g.dlogits[j] = (j == action ? 1.0 : 0.0) - fr.policy[j];
    const GradientSet score = backward(params, task, fr, g);
    for (const auto& [name, grad] : score) {
      if (name.find("/value/") != std::string::npos) continue;
      Tensor& acc = fisher.try_emplace(name, Tensor(grad.shape())).first->second;
      for (std::size_t k = 0; k < grad.size(); ++k) acc[k] += weight * grad[k] * grad[k];
    }
  };

  for (const Tensor& state : states) {
    const ForwardResult fr = forward(params, task, state);
    if (mode == FisherMode::sampled) {
      add_score_squared(fr, rng.categorical(fr.policy), inv_n);
    } else {
      for (std::size_t a = 0; a < actions; ++a) {
        if (fr.policy[a] == 0.0) continue;
        add_score_squared(fr, a, inv_n * fr.policy[a]);
      }
    }
  }
  // Value-head parameters do not influence log pi; report them as exact zeros.
  for (const char* field : {"weight", "bias"}) {
    const std::string name = NetworkParams::head_name(task, "value", field);
    fisher.emplace(name, Tensor(params.find(name)->shape()));
  }
  return fisher;
}

void export_anchors(std::span<const EwcAnchor> anchors, TensorArchive& archive) {
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::string prefix = anchor_prefix(i);
    for (const auto& [name, t] : anchors[i].theta_star) archive.insert_or_assign(prefix + "theta_star/" + name, t);
    for (const auto& [name, t] : anchors[i].fisher) archive.insert_or_assign(prefix + "fisher/" + name, t);
    archive.insert_or_assign(prefix + "lambda", Tensor({1}, {anchors[i].lambda}));
  }
}

std::vector<EwcAnchor> import_anchors(const TensorArchive& archive) {
  std::vector<EwcAnchor> anchors;
  for (std::size_t i = 0;; ++i) {
    const std::string prefix = anchor_prefix(i);
    auto lambda = archive.find(prefix + "lambda");
    if (lambda == archive.end()) break;
    EwcAnchor anchor;
    anchor.lambda = lambda->second[0];
    const std::string star_prefix = prefix + "theta_star/";
    const std::string fisher_prefix = prefix + "fisher/";
    for (auto it = archive.lower_bound(prefix); it != archive.end() && it->first.starts_with(prefix); ++it) {
      if (it->first.starts_with(star_prefix)) {
        anchor.theta_star.emplace(it->first.substr(star_prefix.size()), it->second);
      } else if (it->first.starts_with(fisher_prefix)) {
        anchor.fisher.emplace(it->first.substr(fisher_prefix.size()), it->second);
      }
    }
    anchor.validate();
    anchors.push_back(std::move(anchor));
  }
  return anchors;
}

}  // namespace ugp
