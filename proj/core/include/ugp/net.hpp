#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ugp/tensor.hpp"

namespace ugp {

using TaskId = std::string;

enum class LayerKind { convolution, fully_connected, relu, softmax };

/// One trunk layer description. Only the fields relevant to `kind` are read.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t filters = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t width = 0;

  static LayerSpec conv(std::size_t filters, std::size_t kernel, std::size_t stride);
  static LayerSpec dense(std::size_t width);
  static LayerSpec relu();
  static LayerSpec softmax();

  [[nodiscard]] std::string describe() const;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct TrunkLayer {
  LayerSpec spec;
  Shape input_shape;
  Shape output_shape;
  Tensor weight;  // empty for relu
  Tensor bias;
};

/// Task-private output layers: a softmax policy head and a scalar value head.
struct TaskHead {
  std::size_t action_count = 0;
  Tensor policy_weight;  // [actions, trunk_width]
  Tensor policy_bias;    // [actions]
  Tensor value_weight;   // [1, trunk_width]
  Tensor value_bias;     // [1]
  /// Number of optimizer steps that touched this head (probe for head isolation).
  std::uint64_t updates = 0;
};

/// Shared trunk plus one (policy, value) head per task.
///
/// Tensors are addressed by stable names: `trunk/<layer>/{weight,bias}` and
/// `head/<task>/{policy,value}/{weight,bias}`.
class NetworkParams {
 public:
  Shape input_shape;
  std::vector<TrunkLayer> trunk;
  std::map<TaskId, TaskHead, std::less<>> heads;
  std::uint64_t version = 0;

  [[nodiscard]] std::size_t trunk_width() const;
  [[nodiscard]] bool has_task(std::string_view task) const;
  [[nodiscard]] const TaskHead& head(std::string_view task) const;
  TaskHead& head(std::string_view task);

  [[nodiscard]] Tensor* find(std::string_view name);
  [[nodiscard]] const Tensor* find(std::string_view name) const;

  /// Calls fn(name, tensor) for every parameter tensor in name order.
  void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  [[nodiscard]] std::vector<std::string> tensor_names() const;
  [[nodiscard]] std::size_t parameter_count() const;

  static std::string trunk_name(std::size_t layer, std::string_view field);
  static std::string head_name(std::string_view task, std::string_view part, std::string_view field);
  static bool is_trunk_name(std::string_view name);
  /// Task id owning a head tensor name, or empty for trunk names.
  static std::string_view task_of(std::string_view name);
};

/// Named gradient tensors. Absent names are semantically zero.
class GradientSet {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  /// Existing tensor for `name`, or a zero tensor of `shape` inserted on demand.
  Tensor& slot(std::string_view name, const Shape& shape);
  void accumulate(std::string_view name, const Tensor& grad, double scale = 1.0);
  void merge(const GradientSet& other, double scale = 1.0);
  void scale(double factor);

  [[nodiscard]] const Tensor* find(std::string_view name) const;
  [[nodiscard]] bool contains(std::string_view name) const { return find(name) != nullptr; }
  [[nodiscard]] std::size_t size() const noexcept { return grads_.size(); }
  [[nodiscard]] bool empty() const noexcept { return grads_.empty(); }
  [[nodiscard]] double squared_norm() const;
  [[nodiscard]] bool all_finite() const;
  [[nodiscard]] bool all_zero() const;

  [[nodiscard]] Map::const_iterator begin() const { return grads_.begin(); }
  [[nodiscard]] Map::const_iterator end() const { return grads_.end(); }
  Map::iterator begin() { return grads_.begin(); }
  Map::iterator end() { return grads_.end(); }

 private:
  Map grads_;
};

struct ForwardResult {
  TaskId task;
  std::uint64_t version = 0;
  std::vector<double> logits;
  std::vector<double> policy;
  double value = 0.0;
  /// trace[0] is the input; trace[i + 1] is the output of trunk layer i.
  std::vector<Tensor> trace;
};

/// Gradient of a scalar loss with respect to the head outputs.
struct LossGrads {
  std::vector<double> dlogits;
  double dvalue = 0.0;
};

NetworkParams build_network(std::span<const LayerSpec> trunk_spec, const Shape& input_shape,
                            const std::map<TaskId, std::size_t>& tasks, std::uint64_t seed);

ForwardResult forward(const NetworkParams& params, std::string_view task, const Tensor& state);

/// One evaluation of a task head over many states. Each result is bitwise
/// identical to the corresponding single forward().
std::vector<ForwardResult> forward_batch(const NetworkParams& params, std::string_view task,
                                         std::span<const Tensor* const> states);

GradientSet backward(const NetworkParams& params, std::string_view task, const ForwardResult& trace,
                     const LossGrads& loss_grads);

/// Accumulates scale * gradient into `out` instead of allocating a new set.
void backward_into(const NetworkParams& params, std::string_view task, const ForwardResult& trace,
                   const LossGrads& loss_grads, GradientSet& out, double scale = 1.0);

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// Gradient verification.

struct HeadLoss {
  double loss = 0.0;
  LossGrads grads;
};
using HeadLossFn = std::function<HeadLoss(std::span<const double> logits, double value)>;
using BackwardFn = std::function<GradientSet(const NetworkParams&, std::string_view, const ForwardResult&,
                                             const LossGrads&)>;

struct ObjectiveValue {
  double loss = 0.0;
  GradientSet grads;
};
using ObjectiveFn = std::function<ObjectiveValue(const NetworkParams&)>;

/// Max over all parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// with central differences of step `epsilon`.
double max_relative_gradient_error(const NetworkParams& params, const ObjectiveFn& objective,
                                   double epsilon = 1e-5);

/// Checks backward() (or `backward_override`) for a head loss on one state.
double gradient_check(const NetworkParams& params, std::string_view task, const Tensor& state,
                      const HeadLossFn& loss_fn, double epsilon = 1e-5, const BackwardFn& backward_override = {});

}  // namespace ugp
