#include <benchmark/benchmark.h>

#include "ugp/bridge.hpp"
#include "ugp/engine.hpp"
#include "ugp/env.hpp"
#include "ugp/shooter.hpp"

using namespace ugp;

namespace {

Tensor noise(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape);
  CounterRng rng(seed);
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

NetworkParams vector_net() {
  return build_network(std::vector<LayerSpec>{LayerSpec::dense(64), LayerSpec::relu()},
                       make_shooter("shooter-a")->frame_profile().state_shape(), {{"a", 4}, {"b", 4}}, 1);
}

NetworkParams image_net() {
  return build_network(std::vector<LayerSpec>{LayerSpec::conv(8, 4, 2), LayerSpec::relu(), LayerSpec::dense(64),
                                              LayerSpec::relu()},
                       {4, 84, 84}, {{"a", 4}}, 1);
}

void BM_ForwardVector(benchmark::State& state) {
  const NetworkParams p = vector_net();
  const Tensor x = noise(p.input_shape, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, "a", x));
}
BENCHMARK(BM_ForwardVector);

void BM_ForwardBackwardVector(benchmark::State& state) {
  const NetworkParams p = vector_net();
  const Tensor x = noise(p.input_shape, 2);
  LossGrads g{{0.1, -0.2, 0.05, 0.05}, 0.3};
  for (auto _ : state) {
    const ForwardResult r = forward(p, "a", x);
    benchmark::DoNotOptimize(backward(p, "a", r, g));
  }
}
BENCHMARK(BM_ForwardBackwardVector);

void BM_ForwardImage(benchmark::State& state) {
  const NetworkParams p = image_net();
  const Tensor x = noise(p.input_shape, 3);
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, "a", x));
}
BENCHMARK(BM_ForwardImage)->Unit(benchmark::kMillisecond);

void BM_PredictBatch(benchmark::State& state) {
  const NetworkParams p = vector_net();
  std::vector<PredictionRequest> reqs;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    reqs.push_back({static_cast<std::size_t>(i), i % 2 ? "a" : "b", noise(p.input_shape, 10 + i)});
  }
  for (auto _ : state) benchmark::DoNotOptimize(predict_batch(p, reqs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PredictBatch)->Arg(1)->Arg(8)->Arg(32)->Arg(64);

void BM_ShooterStep(benchmark::State& state) {
  const char* variants[] = {"shooter-a", "shooter-b", "shooter-c"};
  auto env = make_shooter(variants[state.range(0)]);
  CounterRng rng(4);
  env->reset(0);
  std::uint64_t episode = 0;
  for (auto _ : state) {
    if (env->step(rng.below(kShooterActions)).terminal) env->reset(++episode);
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_ShooterStep)->DenseRange(0, 2);

void BM_Preprocess(benchmark::State& state) {
  Observation o;
  o.height = 210;
  o.width = 160;
  o.channels = 3;
  o.pixels.resize(210 * 160 * 3);
  CounterRng rng(5);
  for (auto& px : o.pixels) px = static_cast<std::uint8_t>(rng.below(256));
  const FrameProfile profile = FrameProfile::image(210, 160, 3);
  for (auto _ : state) benchmark::DoNotOptimize(preprocess(o, profile));
}
BENCHMARK(BM_Preprocess);

void BM_CodecObsRoundTrip(benchmark::State& state) {
  wire::Obs o{1.0, false, 210, 160, 3, std::vector<std::uint8_t>(210 * 160 * 3, 7)};
  const WireMessage m = o;
  std::vector<std::uint8_t> buf;
  for (auto _ : state) {
    buf.clear();
    encode_into(m, buf);
    benchmark::DoNotOptimize(decode(buf));
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(o.pixels.size()));
}
BENCHMARK(BM_CodecObsRoundTrip);

void BM_CodecStepRoundTrip(benchmark::State& state) {
  const WireMessage m = wire::Step{3};
  for (auto _ : state) benchmark::DoNotOptimize(decode(encode(m)));
}
BENCHMARK(BM_CodecStepRoundTrip);

}  // namespace

BENCHMARK_MAIN();
