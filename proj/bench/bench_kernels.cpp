// Serial reference ops versus the OpenMP kernels on TinyIceNet-shaped layers.

#include <benchmark/benchmark.h>

#include "tinyicenet/kernels.hpp"
#include "tinyicenet/reference_ops.hpp"
#include "tinyicenet/rng.hpp"

namespace {

using namespace tinyicenet;

Tensor32 random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor32 t(s);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// args: channels in, channels out, spatial size, kernel size
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({2, 16, 128, 3})->Args({16, 16, 128, 3})->Args({64, 64, 32, 3})->Args({64, 7, 128, 1});
}

void BM_conv2d_reference(benchmark::State& state) {
  const auto ci = static_cast<std::size_t>(state.range(0)), co = static_cast<std::size_t>(state.range(1));
  const auto hw = static_cast<std::size_t>(state.range(2)), k = static_cast<std::size_t>(state.range(3));
  const Tensor32 x = random_tensor({1, ci, hw, hw}, 1);
  const ConvKernel<float> kernel{random_tensor({co, ci, k, k}, 2), {}};
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_ref(x, kernel, k / 2));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * hw * hw * ci * co * k * k));
}

void BM_conv2d_kernel(benchmark::State& state) {
  const auto ci = static_cast<std::size_t>(state.range(0)), co = static_cast<std::size_t>(state.range(1));
  const auto hw = static_cast<std::size_t>(state.range(2)), k = static_cast<std::size_t>(state.range(3));
  const Tensor32 x = random_tensor({1, ci, hw, hw}, 1);
  const Tensor32 w = random_tensor({co, ci, k, k}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d<float>(x, w, {}, k / 2));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * hw * hw * ci * co * k * k));
}

void BM_conv2d_grad_params(benchmark::State& state) {
  const auto ci = static_cast<std::size_t>(state.range(0)), co = static_cast<std::size_t>(state.range(1));
  const auto hw = static_cast<std::size_t>(state.range(2)), k = static_cast<std::size_t>(state.range(3));
  const Tensor32 x = random_tensor({1, ci, hw, hw}, 1);
  const Tensor32 g = random_tensor({1, co, hw, hw}, 3);
  Tensor32 gw({co, ci, k, k});
  for (auto _ : state) {
    kernels::conv2d_grad_params<float>(g, x, k / 2, gw, nullptr);
    benchmark::DoNotOptimize(gw.data().data());
  }
}

}  // namespace

BENCHMARK(BM_conv2d_reference)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_kernel)->Apply(conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_grad_params)->Apply(conv_args)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
