#include "ugp/optimizer.hpp"

#include <cmath>
#include <set>

#include "ugp/errors.hpp"

namespace ugp {

namespace {
constexpr std::string_view kAccPrefix = "opt/acc/";
constexpr std::string_view kHparams = "opt/hparams";
}  // namespace

void RmsPropState::validate() const {
  if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("RMSProp decay must lie in (0, 1)");
  if (!(learning_rate > 0.0)) throw ConfigError("RMSProp learning rate must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("RMSProp epsilon must be positive");
  if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("gradient clip norm must be positive");
}

ApplyReport apply(NetworkParams& params, const GradientSet& grads, RmsPropState& state) {
  state.validate();
  ApplyReport report;
  for (const auto& [name, g] : grads) {
    const Tensor* target = params.find(name);
    if (!target) throw LookupError("gradient for unknown parameter '" + name + "'");
    if (!target->same_shape(g)) {
      throw ShapeError("gradient '" + name + "' has shape " + shape_to_string(g.shape()) + ", parameter has " +
                       shape_to_string(target->shape()));
    }
  }
  if (!grads.all_finite()) {
    report.diagnostic = "non-finite gradient; step skipped";
    return report;
  }
  report.grad_norm = std::sqrt(grads.squared_norm());
  if (grads.empty() || report.grad_norm == 0.0) {
    report.diagnostic = "zero gradient; step skipped";
    return report;
  }
  if (state.clip_norm && report.grad_norm > *state.clip_norm) report.clip_scale = *state.clip_norm / report.grad_norm;

  std::set<std::string, std::less<>> touched_heads;
  for (const auto& [name, g] : grads) {
    Tensor& theta = *params.find(name);
    Tensor& acc = state.accumulators.try_emplace(name, Tensor(theta.shape())).first->second;
    if (!acc.same_shape(theta)) throw ShapeError("RMSProp accumulator shape mismatch for '" + name + "'");
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j] * report.clip_scale;
      acc[j] = state.decay * acc[j] + (1.0 - state.decay) * gj * gj;
      theta[j] -= state.learning_rate * gj / std::sqrt(acc[j] + state.epsilon);
    }
    std::string_view task = NetworkParams::task_of(name);
    if (!task.empty()) touched_heads.emplace(task);
  }
  for (const auto& task : touched_heads) ++params.head(task).updates;
  ++params.version;
  report.applied = true;
  return report;
}

void export_optimizer(const RmsPropState& state, TensorArchive& archive) {
  for (const auto& [name, acc] : state.accumulators) archive.insert_or_assign(std::string(kAccPrefix) + name, acc);
  archive.insert_or_assign(std::string(kHparams),
                           Tensor({4}, {state.decay, state.learning_rate, state.epsilon,
                                        state.clip_norm ? *state.clip_norm : -1.0}));
}

RmsPropState import_optimizer(const TensorArchive& archive) {
  RmsPropState state;
  const Tensor& h = archive_at(archive, kHparams);
  if (h.size() != 4) throw FormatError("bad optimizer hyperparameter record");
  state.decay = h[0];
  state.learning_rate = h[1];
  state.epsilon = h[2];
  state.clip_norm = h[3] > 0.0 ? std::optional<double>(h[3]) : std::nullopt;
  for (auto it = archive.lower_bound(kAccPrefix); it != archive.end() && it->first.starts_with(kAccPrefix); ++it) {
    state.accumulators.emplace(it->first.substr(kAccPrefix.size()), it->second);
  }
  state.validate();
  return state;
}

}  // namespace ugp
