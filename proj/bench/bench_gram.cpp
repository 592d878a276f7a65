// Parallel vs serial Gram assembly for the composite spatio-temporal kernel.

#include "stgp/kernels.hpp"

#include <benchmark/benchmark.h>

using namespace stgp;

namespace {

Kernel composite() {
  return Kernel::product({Kernel::active_dims({0, 1}, Kernel::squared_exponential(1.0, 0.5)),
                          Kernel::active_dims({2}, Kernel::sum({Kernel::periodic(24.0), Kernel::periodic(168.0)}))});
}

MatrixXd inputs(Index n) {
  Rng rng(7);
  MatrixXd X(n, 3);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 3; ++j) X(i, j) = standard_normal(rng);
  return X;
}

void BM_GramParallel(benchmark::State& state) {
  const Kernel k = composite();
  const MatrixXd X = inputs(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(gram(k, X, X));
  state.SetComplexityN(state.range(0));
}

void BM_GramSerial(benchmark::State& state) {
  const Kernel k = composite();
  const MatrixXd X = inputs(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(gram_serial(k, X, X));
  state.SetComplexityN(state.range(0));
}

}  // namespace

BENCHMARK(BM_GramParallel)->RangeMultiplier(2)->Range(128, 2048)->Complexity(benchmark::oNSquared);
BENCHMARK(BM_GramSerial)->RangeMultiplier(2)->Range(128, 2048)->Complexity(benchmark::oNSquared);

BENCHMARK_MAIN();
