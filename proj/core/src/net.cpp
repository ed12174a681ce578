#include "ugp/net.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ugp/errors.hpp"
#include "ugp/rng.hpp"

namespace ugp {

namespace {

constexpr std::string_view kTrunkPrefix = "trunk/";
constexpr std::string_view kHeadPrefix = "head/";

void init_uniform(Tensor& t, std::size_t fan_in, std::uint64_t seed, std::string_view name) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  CounterRng rng(derive_key(seed, fnv1a(name)));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + spec.describe() + ")";
}

void dense_forward(const Tensor& weight, const Tensor& bias, std::span<const double> in, std::span<double> out) {
  const std::size_t n = in.size();
  const double* w = weight.data();
  for (std::size_t o = 0; o < out.size(); ++o) {
    const double* row = w + o * n;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += row[i] * in[i];
    out[o] = acc + bias[o];
  }
}

void conv_forward(const TrunkLayer& layer, const Tensor& in, Tensor& out) {
  const std::size_t channels = layer.input_shape[0];
  const std::size_t height = layer.input_shape[1];
  const std::size_t width = layer.input_shape[2];
  const std::size_t filters = layer.output_shape[0];
  const std::size_t out_h = layer.output_shape[1];
  const std::size_t out_w = layer.output_shape[2];
  const std::size_t k = layer.spec.kernel;
  const std::size_t s = layer.spec.stride;
  const double* w = layer.weight.data();
  for (std::size_t f = 0; f < filters; ++f) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const double* wk = w + ((f * channels + c) * k) * k;
          const double* plane = in.data() + c * height * width;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* row = plane + (oy * s + ky) * width + ox * s;
            for (std::size_t kx = 0; kx < k; ++kx) acc += wk[ky * k + kx] * row[kx];
          }
        }
        out[(f * out_h + oy) * out_w + ox] = acc + layer.bias[f];
      }
    }
  }
}

Tensor layer_forward(const TrunkLayer& layer, const Tensor& in) {
  Tensor out(layer.output_shape);
  switch (layer.spec.kind) {
    case LayerKind::fully_connected:
      dense_forward(layer.weight, layer.bias, in.values(), out.values());
      break;
    case LayerKind::convolution:
      conv_forward(layer, in, out);
      break;
    case LayerKind::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case LayerKind::softmax:
      throw ConfigError("softmax layer in trunk");
  }
  return out;
}

// Propagates `grad` (w.r.t. the layer output) into parameter gradients and,
// when `input_grad` is non-null, into the gradient w.r.t. the layer input.
void layer_backward(const TrunkLayer& layer, std::size_t index, const Tensor& input, const Tensor& grad,
                    GradientSet& out, Tensor* input_grad) {
  switch (layer.spec.kind) {
    case LayerKind::relu:
      if (input_grad) {
        for (std::size_t i = 0; i < grad.size(); ++i) (*input_grad)[i] = input[i] > 0.0 ? grad[i] : 0.0;
      }
      return;
    case LayerKind::fully_connected: {
      Tensor& dw = out.slot(NetworkParams::trunk_name(index, "weight"), layer.weight.shape());
      Tensor& db = out.slot(NetworkParams::trunk_name(index, "bias"), layer.bias.shape());
      const std::size_t n = input.size();
      const double* w = layer.weight.data();
      for (std::size_t o = 0; o < grad.size(); ++o) {
        const double g = grad[o];
        if (g == 0.0) continue;
        db[o] += g;
        double* dwr = dw.data() + o * n;
        for (std::size_t i = 0; i < n; ++i) dwr[i] += g * input[i];
        if (input_grad) {
          const double* row = w + o * n;
          for (std::size_t i = 0; i < n; ++i) (*input_grad)[i] += row[i] * g;
        }
      }
      return;
    }
    case LayerKind::convolution: {
      Tensor& dw = out.slot(NetworkParams::trunk_name(index, "weight"), layer.weight.shape());
      Tensor& db = out.slot(NetworkParams::trunk_name(index, "bias"), layer.bias.shape());
      const std::size_t channels = layer.input_shape[0];
      const std::size_t height = layer.input_shape[1];
      const std::size_t width = layer.input_shape[2];
      const std::size_t filters = layer.output_shape[0];
      const std::size_t out_h = layer.output_shape[1];
      const std::size_t out_w = layer.output_shape[2];
      const std::size_t k = layer.spec.kernel;
      const std::size_t s = layer.spec.stride;
      const double* w = layer.weight.data();
      for (std::size_t f = 0; f < filters; ++f) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double g = grad[(f * out_h + oy) * out_w + ox];
            if (g == 0.0) continue;
            db[f] += g;
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t wbase = ((f * channels + c) * k) * k;
              const std::size_t plane = c * height * width;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::size_t row = plane + (oy * s + ky) * width + ox * s;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  dw[wbase + ky * k + kx] += g * input[row + kx];
                  if (input_grad) (*input_grad)[row + kx] += w[wbase + ky * k + kx] * g;
                }
              }
            }
          }
        }
      }
      return;
    }
    case LayerKind::softmax:
      throw ConfigError("softmax layer in trunk");
  }
}

}  // namespace

// LayerSpec

LayerSpec LayerSpec::conv(std::size_t filters, std::size_t kernel, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::convolution;
  s.filters = filters;
  s.kernel = kernel;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t width) {
  LayerSpec s;
  s.kind = LayerKind::fully_connected;
  s.width = width;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::softmax() {
  LayerSpec s;
  s.kind = LayerKind::softmax;
  return s;
}

std::string LayerSpec::describe() const {
  std::ostringstream out;
  switch (kind) {
    case LayerKind::convolution:
      out << "conv " << filters << " filters " << kernel << "x" << kernel << " stride " << stride;
      break;
    case LayerKind::fully_connected:
      out << "dense " << width;
      break;
    case LayerKind::relu:
      out << "relu";
      break;
    case LayerKind::softmax:
      out << "softmax";
      break;
  }
  return out.str();
}

// NetworkParams

std::size_t NetworkParams::trunk_width() const {
  return shape_size(trunk.empty() ? input_shape : trunk.back().output_shape);
}

bool NetworkParams::has_task(std::string_view task) const { return heads.find(task) != heads.end(); }

const TaskHead& NetworkParams::head(std::string_view task) const {
  auto it = heads.find(task);
  if (it == heads.end()) throw LookupError("unknown task '" + std::string(task) + "'");
  return it->second;
}

TaskHead& NetworkParams::head(std::string_view task) {
  auto it = heads.find(task);
  if (it == heads.end()) throw LookupError("unknown task '" + std::string(task) + "'");
  return it->second;
}

std::string NetworkParams::trunk_name(std::size_t layer, std::string_view field) {
  return std::string(kTrunkPrefix) + std::to_string(layer) + "/" + std::string(field);
}

std::string NetworkParams::head_name(std::string_view task, std::string_view part, std::string_view field) {
  std::string name(kHeadPrefix);
  name.append(task).append("/").append(part).append("/").append(field);
  return name;
}

bool NetworkParams::is_trunk_name(std::string_view name) { return name.starts_with(kTrunkPrefix); }

std::string_view NetworkParams::task_of(std::string_view name) {
  if (!name.starts_with(kHeadPrefix)) return {};
  name.remove_prefix(kHeadPrefix.size());
  // The task id may itself contain '/', so strip the two trailing components.
  auto last = name.rfind('/');
  if (last == std::string_view::npos) return {};
  auto part = name.rfind('/', last - 1);
  if (part == std::string_view::npos) return {};
  return name.substr(0, part);
}

Tensor* NetworkParams::find(std::string_view name) {
  return const_cast<Tensor*>(static_cast<const NetworkParams*>(this)->find(name));
}

const Tensor* NetworkParams::find(std::string_view name) const {
  if (name.starts_with(kTrunkPrefix)) {
    std::string_view rest = name.substr(kTrunkPrefix.size());
    auto slash = rest.find('/');
    if (slash == std::string_view::npos) return nullptr;
    std::size_t index = 0;
    for (char c : rest.substr(0, slash)) {
      if (c < '0' || c > '9') return nullptr;
      index = index * 10 + static_cast<std::size_t>(c - '0');
    }
    if (index >= trunk.size()) return nullptr;
    const TrunkLayer& layer = trunk[index];
    std::string_view field = rest.substr(slash + 1);
    const Tensor* t = field == "weight" ? &layer.weight : field == "bias" ? &layer.bias : nullptr;
    return t && !t->empty() ? t : nullptr;
  }
  std::string_view task = task_of(name);
  if (task.empty()) return nullptr;
  auto it = heads.find(task);
  if (it == heads.end()) return nullptr;
  std::string_view tail = name.substr(kHeadPrefix.size() + task.size() + 1);
  const TaskHead& h = it->second;
  if (tail == "policy/weight") return &h.policy_weight;
  if (tail == "policy/bias") return &h.policy_bias;
  if (tail == "value/weight") return &h.value_weight;
  if (tail == "value/bias") return &h.value_bias;
  return nullptr;
}

void NetworkParams::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (const std::string& name : tensor_names()) fn(name, *find(name));
}

void NetworkParams::for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  for (const std::string& name : tensor_names()) fn(name, *find(name));
}

std::vector<std::string> NetworkParams::tensor_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    if (trunk[i].weight.empty()) continue;
    names.push_back(trunk_name(i, "weight"));
    names.push_back(trunk_name(i, "bias"));
  }
  for (const auto& [task, head] : heads) {
    for (const char* part : {"policy", "value"}) {
      names.push_back(head_name(task, part, "weight"));
      names.push_back(head_name(task, part, "bias"));
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

// GradientSet

Tensor& GradientSet::slot(std::string_view name, const Shape& shape) {
  auto it = grads_.find(name);
  if (it == grads_.end()) it = grads_.emplace(std::string(name), Tensor(shape)).first;
  if (it->second.shape() != shape) {
    throw ShapeError("gradient '" + std::string(name) + "' has shape " + shape_to_string(it->second.shape()) +
                     ", expected " + shape_to_string(shape));
  }
  return it->second;
}

void GradientSet::accumulate(std::string_view name, const Tensor& grad, double scale) {
  slot(name, grad.shape()).add_scaled(grad, scale);
}

void GradientSet::merge(const GradientSet& other, double scale) {
  for (const auto& [name, grad] : other.grads_) accumulate(name, grad, scale);
}

void GradientSet::scale(double factor) {
  for (auto& [name, grad] : grads_) grad.scale(factor);
}

const Tensor* GradientSet::find(std::string_view name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

double GradientSet::squared_norm() const {
  double s = 0.0;
  for (const auto& [name, grad] : grads_) s += grad.squared_norm();
  return s;
}

bool GradientSet::all_finite() const {
  return std::all_of(grads_.begin(), grads_.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

bool GradientSet::all_zero() const {
  for (const auto& [name, grad] : grads_) {
    for (double v : grad.values()) {
      if (v != 0.0) return false;
    }
  }
  return true;
}

// Network construction and evaluation

NetworkParams build_network(std::span<const LayerSpec> trunk_spec, const Shape& input_shape,
                            const std::map<TaskId, std::size_t>& tasks, std::uint64_t seed) {
  if (tasks.empty()) throw ConfigError("network needs at least one task");
  if (input_shape.empty()) throw ConfigError("network input shape is empty");
  for (std::size_t d : input_shape) {
    if (d == 0) throw ConfigError("network input shape has a zero dimension: " + shape_to_string(input_shape));
  }

  NetworkParams params;
  params.input_shape = input_shape;
  Shape current = input_shape;
  std::string previous = "input " + shape_to_string(input_shape);

  for (std::size_t i = 0; i < trunk_spec.size(); ++i) {
    const LayerSpec& spec = trunk_spec[i];
    TrunkLayer layer;
    layer.spec = spec;
    layer.input_shape = current;
    const std::string label = layer_label(i, spec);
    switch (spec.kind) {
      case LayerKind::convolution: {
        if (current.size() != 3) {
          throw ConfigError(label + " needs a [channels, height, width] input but follows " + previous +
                            " with output " + shape_to_string(current));
        }
        if (spec.filters == 0 || spec.kernel == 0 || spec.stride == 0) {
          throw ConfigError(label + " has a zero hyperparameter");
        }
        if (spec.kernel > current[1] || spec.kernel > current[2]) {
          throw ConfigError(label + " kernel exceeds the " + shape_to_string(current) + " output of " + previous);
        }
        layer.output_shape = {spec.filters, (current[1] - spec.kernel) / spec.stride + 1,
                              (current[2] - spec.kernel) / spec.stride + 1};
        layer.weight = Tensor({spec.filters, current[0], spec.kernel, spec.kernel});
        layer.bias = Tensor({spec.filters});
        const std::size_t fan_in = current[0] * spec.kernel * spec.kernel;
        init_uniform(layer.weight, fan_in, seed, NetworkParams::trunk_name(i, "weight"));
        init_uniform(layer.bias, fan_in, seed, NetworkParams::trunk_name(i, "bias"));
        break;
      }
      case LayerKind::fully_connected: {
        if (spec.width == 0) throw ConfigError(label + " has zero width");
        const std::size_t fan_in = shape_size(current);
        layer.output_shape = {spec.width};
        layer.weight = Tensor({spec.width, fan_in});
        layer.bias = Tensor({spec.width});
        init_uniform(layer.weight, fan_in, seed, NetworkParams::trunk_name(i, "weight"));
        init_uniform(layer.bias, fan_in, seed, NetworkParams::trunk_name(i, "bias"));
        break;
      }
      case LayerKind::relu:
        layer.output_shape = current;
        break;
      case LayerKind::softmax:
        throw ConfigError(label + " follows " + previous +
                          ": softmax is only allowed as the final policy-head layer");
    }
    current = layer.output_shape;
    previous = label;
    params.trunk.push_back(std::move(layer));
  }

  const std::size_t width = shape_size(current);
  for (const auto& [task, actions] : tasks) {
    if (task.empty()) throw ConfigError("task id must not be empty");
    if (actions < 2) throw ConfigError("task '" + task + "' needs at least 2 actions");
    TaskHead head;
    head.action_count = actions;
    head.policy_weight = Tensor({actions, width});
    head.policy_bias = Tensor({actions});
    head.value_weight = Tensor({1, width});
    head.value_bias = Tensor({1});
    init_uniform(head.policy_weight, width, seed, NetworkParams::head_name(task, "policy", "weight"));
    init_uniform(head.policy_bias, width, seed, NetworkParams::head_name(task, "policy", "bias"));
    init_uniform(head.value_weight, width, seed, NetworkParams::head_name(task, "value", "weight"));
    init_uniform(head.value_bias, width, seed, NetworkParams::head_name(task, "value", "bias"));
    params.heads.emplace(task, std::move(head));
  }
  return params;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - top);
  const double log_total = std::log(total) + top;
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_total;
  return out;
}

ForwardResult forward(const NetworkParams& params, std::string_view task, const Tensor& state) {
  const TaskHead& head = params.head(task);
  if (state.shape() != params.input_shape) {
    throw ShapeError("state shape " + shape_to_string(state.shape()) + " does not match network input " +
                     shape_to_string(params.input_shape));
  }
  ForwardResult result;
  result.task = std::string(task);
  result.version = params.version;
  result.trace.reserve(params.trunk.size() + 1);
  result.trace.push_back(state);
  for (const TrunkLayer& layer : params.trunk) {
    Tensor next = layer_forward(layer, result.trace.back());
    result.trace.push_back(std::move(next));
  }
  std::span<const double> features = result.trace.back().values();
  result.logits.resize(head.action_count);
  dense_forward(head.policy_weight, head.policy_bias, features, result.logits);
  double value = 0.0;
  dense_forward(head.value_weight, head.value_bias, features, std::span<double>(&value, 1));
  result.value = value;
  result.policy = softmax(result.logits);
  return result;
}

std::vector<ForwardResult> forward_batch(const NetworkParams& params, std::string_view task,
                                         std::span<const Tensor* const> states) {
  std::vector<ForwardResult> results;
  results.reserve(states.size());
  for (const Tensor* state : states) results.push_back(forward(params, task, *state));
  return results;
}

void backward_into(const NetworkParams& params, std::string_view task, const ForwardResult& trace,
                   const LossGrads& loss_grads, GradientSet& out, double scale) {
  if (trace.version != params.version) {
    throw StalenessError("forward trace from params version " + std::to_string(trace.version) +
                         " used against version " + std::to_string(params.version));
  }
  if (trace.task != task) {
    throw ContractViolation("forward trace for task '" + trace.task + "' used for task '" + std::string(task) + "'");
  }
  const TaskHead& head = params.head(task);
  if (loss_grads.dlogits.size() != head.action_count) {
    throw ShapeError("logit gradient has " + std::to_string(loss_grads.dlogits.size()) + " entries, task '" +
                     std::string(task) + "' has " + std::to_string(head.action_count) + " actions");
  }
  if (trace.trace.size() != params.trunk.size() + 1) throw ShapeError("forward trace does not match trunk depth");

  const Tensor& features = trace.trace.back();
  const std::size_t width = features.size();
  Tensor feature_grad(features.shape());

  Tensor& dpw = out.slot(NetworkParams::head_name(task, "policy", "weight"), head.policy_weight.shape());
  Tensor& dpb = out.slot(NetworkParams::head_name(task, "policy", "bias"), head.policy_bias.shape());
  for (std::size_t a = 0; a < head.action_count; ++a) {
    const double g = scale * loss_grads.dlogits[a];
    dpb[a] += g;
    double* dw = dpw.data() + a * width;
    const double* w = head.policy_weight.data() + a * width;
    for (std::size_t i = 0; i < width; ++i) {
      dw[i] += g * features[i];
      feature_grad[i] += w[i] * g;
    }
  }
  Tensor& dvw = out.slot(NetworkParams::head_name(task, "value", "weight"), head.value_weight.shape());
  Tensor& dvb = out.slot(NetworkParams::head_name(task, "value", "bias"), head.value_bias.shape());
  {
    const double g = scale * loss_grads.dvalue;
    dvb[0] += g;
    for (std::size_t i = 0; i < width; ++i) {
      dvw[i] += g * features[i];
      feature_grad[i] += head.value_weight[i] * g;
    }
  }

  Tensor grad = std::move(feature_grad);
  for (std::size_t i = params.trunk.size(); i-- > 0;) {
    const TrunkLayer& layer = params.trunk[i];
    const Tensor& input = trace.trace[i];
    if (i == 0 && layer.spec.kind == LayerKind::relu) break;
    Tensor input_grad;
    Tensor* input_grad_ptr = nullptr;
    if (i > 0) {
      input_grad = Tensor(layer.input_shape);
      input_grad_ptr = &input_grad;
    }
    layer_backward(layer, i, input, grad, out, input_grad_ptr);
    if (i > 0) grad = std::move(input_grad);
  }
}

GradientSet backward(const NetworkParams& params, std::string_view task, const ForwardResult& trace,
                     const LossGrads& loss_grads) {
  GradientSet out;
  backward_into(params, task, trace, loss_grads, out);
  return out;
}

double max_relative_gradient_error(const NetworkParams& params, const ObjectiveFn& objective, double epsilon) {
  const ObjectiveValue base = objective(params);
  NetworkParams probe = params;
  double worst = 0.0;
  for (const std::string& name : probe.tensor_names()) {
    Tensor& tensor = *probe.find(name);
    const Tensor* analytic = base.grads.find(name);
    for (std::size_t j = 0; j < tensor.size(); ++j) {
      const double original = tensor[j];
      tensor[j] = original + epsilon;
      const double plus = objective(probe).loss;
      tensor[j] = original - epsilon;
      const double minus = objective(probe).loss;
      tensor[j] = original;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = analytic ? (*analytic)[j] : 0.0;
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

double gradient_check(const NetworkParams& params, std::string_view task, const Tensor& state,
                      const HeadLossFn& loss_fn, double epsilon, const BackwardFn& backward_override) {
  auto objective = [&](const NetworkParams& p) {
    ForwardResult fr = forward(p, task, state);
    HeadLoss hl = loss_fn(fr.logits, fr.value);
    ObjectiveValue value;
    value.loss = hl.loss;
    value.grads = backward_override ? backward_override(p, task, fr, hl.grads) : backward(p, task, fr, hl.grads);
    return value;
  };
  return max_relative_gradient_error(params, objective, epsilon);
}

}  // namespace ugp
