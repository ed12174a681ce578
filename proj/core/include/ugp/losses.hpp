#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ugp/checkpoint.hpp"
#include "ugp/net.hpp"
#include "ugp/tensor.hpp"

namespace ugp {

struct RolloutStep {
  Tensor state;
  std::size_t action = 0;
  double reward = 0.0;
};

/// Up to n consecutive steps of one actor in one task.
struct Rollout {
  TaskId task;
  std::vector<RolloutStep> steps;
  /// V(S_{t+n}) for a truncated rollout, exactly 0 when `terminal`.
  double bootstrap_value = 0.0;
  bool terminal = false;
  double gamma = 0.99;
};

struct TrainingPoint {
  TaskId task;
  Tensor state;
  std::size_t action = 0;
  double return_target = 0.0;
};

/// R_t = r_t + gamma * R_{t+1}, seeded with the bootstrap value.
std::vector<TrainingPoint> compute_returns(const Rollout& rollout);
std::vector<TrainingPoint> compute_returns(Rollout&& rollout);

/// Scalar loss term plus its gradient w.r.t. the policy logits.
struct LogitLoss {
  double value = 0.0;
  std::vector<double> dlogits;
};

/// -log pi(action) * advantage. The advantage is a constant.
LogitLoss actor_loss(std::span<const double> logits, std::size_t action, double advantage);

/// Entropy H(pi) of softmax(logits) and dH/dlogits.
LogitLoss entropy_bonus(std::span<const double> logits);

struct CriticLoss {
  double value = 0.0;
  double dvalue = 0.0;  // d/d(value_estimate)
};

/// (return_target - value_estimate)^2
CriticLoss critic_loss(double value_estimate, double return_target);

struct LossWeights {
  double value = 0.5;     // c_v
  double entropy = 0.01;  // beta
};

struct LossResult {
  double loss = 0.0;
  GradientSet grads;
};

/// Mean over points of actor + c_v * critic - beta * entropy for one task.
LossResult environment_loss(std::span<const TrainingPoint> batch, const NetworkParams& params,
                            const LossWeights& weights = {});

/// Elastic weight consolidation anchor: lambda * sum F (theta - theta*)^2 over
/// the scoped tensors (the keys of theta_star).
struct EwcAnchor {
  std::map<std::string, Tensor, std::less<>> theta_star;
  std::map<std::string, Tensor, std::less<>> fisher;
  double lambda = 0.0;

  [[nodiscard]] std::vector<std::string> scope() const;
  void validate() const;
};

LossResult ewc_penalty(const NetworkParams& params, const EwcAnchor& anchor);

/// Sum of per-task environment losses (one task at a time) plus every anchor's penalty.
LossResult multi_env_loss(const std::map<TaskId, std::vector<TrainingPoint>>& batches, const NetworkParams& params,
                          std::span<const EwcAnchor> anchors, const LossWeights& weights = {});

enum class FisherMode { sampled, exact };

/// Diagonal empirical Fisher of log pi(a|s) for the trunk and the task's head.
/// In sampled mode one action per state is drawn from pi with a stream keyed by `seed`.
std::map<std::string, Tensor, std::less<>> estimate_fisher(const NetworkParams& params, std::string_view task,
                                                           std::span<const Tensor> states, FisherMode mode,
                                                           std::uint64_t seed = 0);

/// Anchors are stored as `ewc/<i>/theta_star/<tensor>`, `ewc/<i>/fisher/<tensor>`, `ewc/<i>/lambda`.
void export_anchors(std::span<const EwcAnchor> anchors, TensorArchive& archive);
std::vector<EwcAnchor> import_anchors(const TensorArchive& archive);

}  // namespace ugp
