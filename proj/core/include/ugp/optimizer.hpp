#pragma once

#include <map>
#include <optional>
#include <string>

#include "ugp/checkpoint.hpp"
#include "ugp/net.hpp"

namespace ugp {

/// RMSProp without momentum. Accumulators are created lazily per parameter
/// tensor on first use and start at zero.
struct RmsPropState {
  double decay = 0.99;           // rho
  double learning_rate = 1e-3;   // alpha
  double epsilon = 1e-8;
  std::optional<double> clip_norm = 40.0;
  std::map<std::string, Tensor, std::less<>> accumulators;

  void validate() const;
};

struct ApplyReport {
  bool applied = false;
  double grad_norm = 0.0;     // before clipping
  double clip_scale = 1.0;
  std::string diagnostic;     // why a step was skipped
};

/// acc <- rho acc + (1 - rho) g^2; theta <- theta - alpha g / sqrt(acc + eps)
/// for every tensor present in `grads`. Bumps params.version on an applied step.
/// All-zero or non-finite gradients leave params, state and version untouched.
ApplyReport apply(NetworkParams& params, const GradientSet& grads, RmsPropState& state);

/// Stored as `opt/acc/<tensor>` plus `opt/hparams` = [decay, lr, epsilon, clip or -1].
void export_optimizer(const RmsPropState& state, TensorArchive& archive);
RmsPropState import_optimizer(const TensorArchive& archive);

}  // namespace ugp
