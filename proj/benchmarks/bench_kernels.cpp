// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <vector>

#include "kanpaint/autograd.hpp"
#include "kanpaint/kan.hpp"
#include "kanpaint/ops.hpp"
#include "kanpaint/ukan.hpp"

using namespace kanpaint;

static void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor x = Tensor::randn({2, c, 32, 32}, rng);
  Tensor k = Tensor::randn({c, c, 3, 3}, rng);
  Tensor b = Tensor::randn({c}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k, b, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(32);

static void BM_KanLinear(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  kan::KanLayer layer(c, c, kan::SplineGrid(), rng);
  Tensor x = Tensor::uniform({1024, c}, rng, -1.0, 1.0);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_KanLinear)->Arg(16)->Arg(64);

static void BM_KanLinearBackward(benchmark::State& state) {
  Rng rng(3);
  kan::KanLayer layer(32, 32, kan::SplineGrid(), rng);
  Tensor x = Tensor::uniform({1024, 32}, rng, -1.0, 1.0);
  for (auto _ : state) {
    Tensor loss = ops::mean(layer.forward(x));
    backward(loss);
  }
}
BENCHMARK(BM_KanLinearBackward);

static void BM_Attention(benchmark::State& state) {
  const auto tokens = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  Tensor q = Tensor::randn({2 * tokens, 32}, rng);
  Tensor k = Tensor::randn({2 * tokens, 32}, rng);
  Tensor v = Tensor::randn({2 * tokens, 32}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ops::scaled_dot_product_attention(q, k, v, 2, 1));
}
BENCHMARK(BM_Attention)->Arg(64)->Arg(256);

static void BM_DenoiserForward(benchmark::State& state) {
  ukan::UkanConfig config;
  config.arch = ukan::parse_arch("CCK");
  config.base_channels = 8;
  config.max_timestep = 100;
  ukan::ConditionalUkan model(config, 5);
  model.set_training(false);
  Rng rng(6);
  Tensor x = Tensor::randn({1, 1, 64, 64}, rng);
  Tensor scan = Tensor::uniform({1, 1, 64, 64}, rng, 0.0, 1.0);
  const std::vector<int> t{50};
  const std::vector<ukan::TumorGeometry> tumor(1);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(x, scan, t, tumor));
}
BENCHMARK(BM_DenoiserForward)->Unit(benchmark::kMillisecond);

static void BM_TrainingStep(benchmark::State& state) {
  ukan::UkanConfig config;
  config.arch = ukan::parse_arch("CCK");
  config.base_channels = 8;
  config.max_timestep = 100;
  ukan::ConditionalUkan model(config, 7);
  Rng rng(8);
  Tensor x = Tensor::randn({2, 1, 64, 64}, rng);
  Tensor scan = Tensor::uniform({2, 1, 64, 64}, rng, 0.0, 1.0);
  const std::vector<int> t{10, 90};
  const std::vector<ukan::TumorGeometry> tumor(2);
  for (auto _ : state) {
    Tensor loss = ops::mean(ops::square(model.predict(x, scan, t, tumor)));
    backward(loss);
    model.zero_grad();
  }
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
