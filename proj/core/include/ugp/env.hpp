#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "ugp/tensor.hpp"

namespace ugp {

inline constexpr std::size_t kStackDepth = 4;
inline constexpr std::size_t kFrameSide = 84;

enum class FrameKind { image, vector };

/// Raw observation layout an environment produces and how it is preprocessed.
///
/// Image profile: H x W x C unsigned bytes, converted to an 84 x 84 grayscale
/// frame in [0, 1]. Vector profile: a flat feature vector passed through as is.
struct FrameProfile {
  FrameKind kind = FrameKind::vector;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t features = 0;

  static FrameProfile image(std::size_t height, std::size_t width, std::size_t channels);
  static FrameProfile vector(std::size_t features);

  [[nodiscard]] Shape frame_shape() const;
  /// [4, 84, 84] or [4, features].
  [[nodiscard]] Shape state_shape() const;
  friend bool operator==(const FrameProfile&, const FrameProfile&) = default;
};

struct Observation {
  std::vector<std::uint8_t> pixels;  // row-major H x W x C
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> features;
  double reward = 0.0;
  bool terminal = false;
};

/// Anything an actor-learner can play. Implementations must be deterministic:
/// the same seed and action sequence reproduce the same observations.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual Observation reset(std::uint64_t seed) = 0;
  /// Stepping after a terminal observation without reset is a ContractViolation.
  virtual Observation step(std::size_t action) = 0;
  [[nodiscard]] virtual std::size_t action_count() const = 0;
  [[nodiscard]] virtual FrameProfile frame_profile() const = 0;
};

using EnvironmentFactory = std::function<std::unique_ptr<Environment>()>;

/// Grayscale (0.299, 0.587, 0.114), area-average resize to 84 x 84, scale to
/// [0, 1] for images; identity for vectors.
Tensor preprocess(const Observation& obs, const FrameProfile& profile);

struct HandlerStep {
  Tensor state;
  double reward = 0.0;
  bool terminal = false;
};

/// Owns one environment instance and turns its observations into stacked states.
///
/// The stack always holds the 4 most recent frames, newest last; reset fills it
/// with 4 copies of the first frame.
class EnvironmentHandler {
 public:
  explicit EnvironmentHandler(std::unique_ptr<Environment> env);

  const Tensor& reset(std::uint64_t seed);
  HandlerStep step(std::size_t action);

  [[nodiscard]] const Tensor& state() const;
  [[nodiscard]] bool terminal() const noexcept { return terminal_; }
  [[nodiscard]] bool started() const noexcept { return started_; }
  [[nodiscard]] std::size_t action_count() const { return env_->action_count(); }
  [[nodiscard]] const FrameProfile& profile() const noexcept { return profile_; }
  [[nodiscard]] const std::deque<Tensor>& frames() const noexcept { return frames_; }

 private:
  void rebuild_state();

  std::unique_ptr<Environment> env_;
  FrameProfile profile_;
  std::deque<Tensor> frames_;
  Tensor state_;
  bool started_ = false;
  bool terminal_ = false;
};

}  // namespace ugp
