#include "ugp/env.hpp"

#include <algorithm>
#include <cstring>

#include "ugp/errors.hpp"

namespace ugp {

namespace {

// Integer overlap between input cell i (spanning [out_n*i, out_n*(i+1)) after
// scaling both axes by out_n * in_n) and output cell o (spanning [in_n*o, in_n*(o+1))).
struct AxisWeights {
  std::vector<std::size_t> first;                      // first input index per output cell
  std::vector<std::vector<std::uint32_t>> overlap;     // overlaps for consecutive inputs
};

AxisWeights axis_weights(std::size_t in_n, std::size_t out_n) {
  AxisWeights w;
  w.first.resize(out_n);
  w.overlap.resize(out_n);
  for (std::size_t o = 0; o < out_n; ++o) {
    const std::size_t lo = in_n * o;
    const std::size_t hi = in_n * (o + 1);
    const std::size_t i0 = lo / out_n;
    const std::size_t i1 = (hi + out_n - 1) / out_n;
    w.first[o] = i0;
    for (std::size_t i = i0; i < i1; ++i) {
      const std::size_t a = std::max(lo, out_n * i);
      const std::size_t b = std::min(hi, out_n * (i + 1));
      w.overlap[o].push_back(static_cast<std::uint32_t>(b - a));
    }
  }
  return w;
}

}  // namespace

FrameProfile FrameProfile::image(std::size_t height, std::size_t width, std::size_t channels) {
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("image profile dimensions must be positive");
  FrameProfile p;
  p.kind = FrameKind::image;
  p.height = height;
  p.width = width;
  p.channels = channels;
  return p;
}

FrameProfile FrameProfile::vector(std::size_t features) {
  if (features == 0) throw ConfigError("vector profile needs at least one feature");
  FrameProfile p;
  p.kind = FrameKind::vector;
  p.features = features;
  return p;
}

Shape FrameProfile::frame_shape() const {
  return kind == FrameKind::image ? Shape{kFrameSide, kFrameSide} : Shape{features};
}

Shape FrameProfile::state_shape() const {
  Shape s{kStackDepth};
  for (std::size_t d : frame_shape()) s.push_back(d);
  return s;
}

Tensor preprocess(const Observation& obs, const FrameProfile& profile) {
  if (profile.kind == FrameKind::vector) {
    if (obs.features.size() != profile.features) {
      throw ShapeError("observation has " + std::to_string(obs.features.size()) + " features, profile expects " +
                       std::to_string(profile.features));
    }
    Tensor frame({profile.features}, obs.features);
    if (!frame.all_finite()) throw ShapeError("observation features are not finite");
    return frame;
  }

  if (obs.height != profile.height || obs.width != profile.width || obs.channels != profile.channels ||
      obs.pixels.size() != obs.height * obs.width * obs.channels) {
    throw ShapeError("observation " + shape_to_string({obs.height, obs.width, obs.channels}) + " with " +
                     std::to_string(obs.pixels.size()) + " bytes does not match profile " +
                     shape_to_string({profile.height, profile.width, profile.channels}));
  }
  if (obs.channels != 1 && obs.channels != 3) {
    throw ShapeError("image observations must have 1 or 3 channels, got " + std::to_string(obs.channels));
  }

  const std::size_t h = obs.height;
  const std::size_t w = obs.width;
  std::vector<double> gray(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::uint8_t* px = obs.pixels.data() + i * obs.channels;
    gray[i] = obs.channels == 1 ? px[0] : 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  }

  const AxisWeights rows = axis_weights(h, kFrameSide);
  const AxisWeights cols = axis_weights(w, kFrameSide);

  // Rows first: tmp[oy][x] = sum_r overlap(r, oy) * gray[r][x]
  std::vector<double> tmp(kFrameSide * w, 0.0);
  for (std::size_t oy = 0; oy < kFrameSide; ++oy) {
    double* dst = tmp.data() + oy * w;
    for (std::size_t k = 0; k < rows.overlap[oy].size(); ++k) {
      const double weight = rows.overlap[oy][k];
      const double* src = gray.data() + (rows.first[oy] + k) * w;
      for (std::size_t x = 0; x < w; ++x) dst[x] += weight * src[x];
    }
  }
  Tensor frame({kFrameSide, kFrameSide});
  const double norm = 1.0 / (static_cast<double>(h) * static_cast<double>(w) * 255.0);
  for (std::size_t oy = 0; oy < kFrameSide; ++oy) {
    for (std::size_t ox = 0; ox < kFrameSide; ++ox) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cols.overlap[ox].size(); ++k) {
        acc += cols.overlap[ox][k] * tmp[oy * w + cols.first[ox] + k];
      }
      frame[oy * kFrameSide + ox] = std::clamp(acc * norm, 0.0, 1.0);
    }
  }
  return frame;
}

EnvironmentHandler::EnvironmentHandler(std::unique_ptr<Environment> env) : env_(std::move(env)) {
  if (!env_) throw ConfigError("environment handler needs an environment");
  profile_ = env_->frame_profile();
}

const Tensor& EnvironmentHandler::reset(std::uint64_t seed) {
  Observation obs;
  try {
    obs = env_->reset(seed);
  } catch (const std::exception& e) {
    throw EnvironmentError("environment reset(seed=" + std::to_string(seed) + ") failed: " + e.what());
  }
  Tensor frame = preprocess(obs, profile_);
  frames_.assign(kStackDepth, frame);
  started_ = true;
  terminal_ = obs.terminal;
  rebuild_state();
  return state_;
}

HandlerStep EnvironmentHandler::step(std::size_t action) {
  if (!started_) throw ContractViolation("environment handler stepped before reset");
  if (terminal_) throw ContractViolation("environment handler stepped after a terminal observation");
  if (action >= env_->action_count()) {
    throw IndexError("action " + std::to_string(action) + " out of range for " +
                     std::to_string(env_->action_count()) + " actions");
  }
  Observation obs;
  try {
    obs = env_->step(action);
  } catch (const ContractViolation&) {
    throw;
  } catch (const std::exception& e) {
    throw EnvironmentError(std::string("environment step failed: ") + e.what());
  }
  frames_.pop_front();
  frames_.push_back(preprocess(obs, profile_));
  terminal_ = obs.terminal;
  rebuild_state();
  return {state_, obs.reward, obs.terminal};
}

const Tensor& EnvironmentHandler::state() const {
  if (!started_) throw ContractViolation("environment handler has no state before reset");
  return state_;
}

void EnvironmentHandler::rebuild_state() {
  const std::size_t frame_size = frames_.front().size();
  std::vector<double> data(kStackDepth * frame_size);
  for (std::size_t i = 0; i < kStackDepth; ++i) {
    std::memcpy(data.data() + i * frame_size, frames_[i].data(), frame_size * sizeof(double));
  }
  state_ = Tensor(profile_.state_shape(), std::move(data));
}

}  // namespace ugp
