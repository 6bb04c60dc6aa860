#include <benchmark/benchmark.h>

#include "miniprune/rng.hpp"
#include "miniprune/tensor.hpp"

using namespace miniprune;

namespace {

Tensor filled(std::int64_t rows, std::int64_t cols, std::uint64_t seed) {
    Tensor t({rows, cols});
    RngStream rng(seed, 1);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.next_uniform() - 0.5);
    return t;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor a = filled(n, n, 1), b = filled(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

void BM_MatmulNt(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor a = filled(n, n, 1), b = filled(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul_nt(a, b));
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_MatmulNt)->Arg(128)->Arg(512);

void BM_Softmax(benchmark::State& state) {
    const Tensor x = filled(128, 256, 3);
    for (auto _ : state) benchmark::DoNotOptimize(softmax_rows(x));
}
BENCHMARK(BM_Softmax);

void BM_GaussianFill(benchmark::State& state) {
    for (auto _ : state) {
        RngStream rng(42, 7);
        benchmark::DoNotOptimize(sample_perturbation(rng, {256, 256}, Distribution::kGaussian));
    }
    state.SetItemsProcessed(state.iterations() * 256 * 256);
}
BENCHMARK(BM_GaussianFill);

}  // namespace
