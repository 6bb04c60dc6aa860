#include <benchmark/benchmark.h>

#include "miniprune/model.hpp"
#include "miniprune/rng.hpp"
#include "miniprune/scoring.hpp"
#include "miniprune/zo.hpp"

using namespace miniprune;

namespace {

ModelConfig bench_config() {
    ModelConfig c;
    c.d_model = 128;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_ff = 256;
    c.max_seq_len = 128;
    return c;
}

TokenBatch bench_batch(int rows, int cols) {
    RngStream rng(5, 0);
    std::vector<std::int32_t> t(static_cast<std::size_t>(rows * cols));
    for (auto& v : t) v = static_cast<std::int32_t>(rng.next_below(256));
    return TokenBatch(rows, cols, std::move(t));
}

void BM_Forward(benchmark::State& state) {
    const auto ckpt = init_checkpoint(bench_config(), 1);
    const auto batch = bench_batch(static_cast<int>(state.range(0)), 128);
    for (auto _ : state) benchmark::DoNotOptimize(forward_loss(ckpt, batch));
    state.SetItemsProcessed(state.iterations() * batch.rows * batch.cols);
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Backward(benchmark::State& state) {
    const auto ckpt = init_checkpoint(bench_config(), 1);
    const auto batch = bench_batch(16, 128);
    for (auto _ : state) benchmark::DoNotOptimize(backward(ckpt, batch));
    state.SetItemsProcessed(state.iterations() * batch.rows * batch.cols);
}
BENCHMARK(BM_Backward)->Unit(benchmark::kMillisecond);

void BM_ZoEstimate(benchmark::State& state) {
    auto ckpt = init_checkpoint(bench_config(), 1);
    const auto batch = bench_batch(4, 128);
    zo::PerturbSpec spec;
    spec.n_samples = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(zo::estimate_gradients(ckpt, batch, spec));
}
BENCHMARK(BM_ZoEstimate)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_ScoreFmsZo(benchmark::State& state) {
    auto ckpt = init_checkpoint(bench_config(), 1);
    const auto batch = bench_batch(4, 128);
    const auto grads = zo::estimate_gradients(ckpt, batch, zo::PerturbSpec{});
    const auto acts = activation_norms(forward_capture(ckpt, batch).record);
    const auto source = GradientSource::estimated(grads);
    for (auto _ : state) benchmark::DoNotOptimize(score(ckpt, Criterion::kFmsZo, &source, &acts));
}
BENCHMARK(BM_ScoreFmsZo)->Unit(benchmark::kMillisecond);

}  // namespace
