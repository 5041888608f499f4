// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "nncomp/linalg.hpp"
#include "nncomp/ops.hpp"
#include "nncomp/pruning.hpp"
#include "nncomp/quantization.hpp"
#include "nncomp/rng.hpp"

using namespace nncomp;

namespace {

Tensor filled(const Shape& shape, std::uint64_t seed) {
  Tensor t(shape, DType::F64);
  Rng rng(seed);
  for (double& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = filled({n, n}, 1), b = filled({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_Conv2d(benchmark::State& state) {
  Tensor x = filled({static_cast<std::size_t>(state.range(0)), 8, 13, 13}, 3);
  Tensor w = filled({16, 8, 3, 3}, 4), b = filled({16}, 5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 0));
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(16);

static void BM_LevelMask(benchmark::State& state) {
  Tensor w = filled({static_cast<std::size_t>(state.range(0)), 256}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(level_mask(w, 0.7, Granularity::element()));
}
BENCHMARK(BM_LevelMask)->Arg(64)->Arg(512);

static void BM_FakeQuant(benchmark::State& state) {
  Tensor x = filled({256, 256}, 7);
  QuantParams qp = qparams_from_tensor(x, 8, QuantMode::Asymmetric, QuantGranularity::per_channel(0));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(fake_quant(x, qp));
}
BENCHMARK(BM_FakeQuant);

static void BM_SvdJacobi(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Matrix a(n, n);
  Rng rng(8);
  for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(svd_jacobi(a));
}
BENCHMARK(BM_SvdJacobi)->Arg(16)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
