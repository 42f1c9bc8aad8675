#include <benchmark/benchmark.h>

#include "tfl/layers.hpp"
#include "tfl/losses.hpp"
#include "tfl/model.hpp"
#include "tfl/train.hpp"

using namespace tfl;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  RngStream rng(seed);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

} // namespace

static void BM_Conv2dForward(benchmark::State& state) {
  const int64_t c = state.range(0);
  Tensor x = random_tensor({32, 32, c}, 1);
  Tensor k = random_tensor({3, 3, c, c}, 2);
  Tensor b = random_tensor({c}, 3);
  for (auto _ : state) {
    Tensor y = conv2d(x, k, b, 1, 1, Padding::same);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 32 * 32 * c * c * 9);
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

static void BM_Conv2dBackward(benchmark::State& state) {
  const int64_t c = state.range(0);
  Tensor x = random_tensor({32, 32, c}, 1);
  Tensor k = random_tensor({3, 3, c, c}, 2);
  Tensor b = random_tensor({c}, 3);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  for (auto _ : state) {
    Tensor loss = sum(conv2d(x, k, b, 1, 1, Padding::same));
    backward(loss);
    benchmark::DoNotOptimize(k.grad().data());
    x.zero_grad();
    k.zero_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16);

static void BM_LuongAttention(benchmark::State& state) {
  Tensor x = random_tensor({16, 16, state.range(0)}, 4);
  for (auto _ : state) {
    Tensor y = luong_channel_attention(x);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_LuongAttention)->Arg(16)->Arg(64);

static void BM_BahdanauAttention(benchmark::State& state) {
  Tensor x = random_tensor({16, 16, state.range(0)}, 5);
  for (auto _ : state) {
    Tensor y = bahdanau_channel_attention(x);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_BahdanauAttention)->Arg(16)->Arg(64);

static void BM_ModelForward(benchmark::State& state) {
  ModelSpec spec = catalog(state.range(0) == 0 ? "C-1" : "A-1");
  spec.stem.width = 16;
  BuiltModel m = build_model(spec, {24, 32, 3}, 7);
  Tensor x = random_tensor({24, 32, 3}, 8);
  ForwardCtx ctx;
  for (auto _ : state) {
    Tensor y = m.forward(x, ctx);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_ModelForward)->Arg(0)->Arg(1);

static void BM_TrainEpoch(benchmark::State& state) {
  RngStream rng(9);
  Dataset d = synth_generate(8, 24, 32, rng);
  ModelSpec spec = catalog("C-1");
  spec.stem.width = 8;
  spec.stem.depth = 2;
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.eval_every = 0;
  for (auto _ : state) {
    state.PauseTiming();
    BuiltModel m = build_model(spec, {24, 32, 3}, 7);
    state.ResumeTiming();
    RunLog log = train_model(m, d, {}, tc);
    benchmark::DoNotOptimize(log.epochs.data());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
