#include <benchmark/benchmark.h>

#include <numeric>

#include "capwm/adaptive/adaptive.hpp"
#include "capwm/capacity/evaluator.hpp"
#include "capwm/harness/latency.hpp"
#include "capwm/prf.hpp"
#include "capwm/toylm/transformer.hpp"

namespace {

using namespace capwm;

const TransformerModel& latency_model() {
  static const TransformerModel model(latency_model_config());
  return model;
}

TokenSeq prompt_of(int n) {
  TokenSeq p(static_cast<std::size_t>(n));
  SplitMix64 rng(1);
  for (auto& t : p) t = static_cast<TokenId>(rng.below(64));
  return p;
}

// Next-position logits for `range(0)` candidates after a 128-token prefix.
void BM_Branch(benchmark::State& state, BranchMode mode) {
  auto session = latency_model().open_session();
  session->extend(prompt_of(128));
  std::vector<TokenId> cands(static_cast<std::size_t>(state.range(0)));
  std::iota(cands.begin(), cands.end(), 0);
  for (auto _ : state) benchmark::DoNotOptimize(session->branch(cands, mode));
  state.counters["candidates"] = static_cast<double>(cands.size());
}
BENCHMARK_CAPTURE(BM_Branch, tree, BranchMode::kTree)->DenseRange(1, 8)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Branch, sequential, BranchMode::kSequential)->DenseRange(1, 8)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Branch, batched, BranchMode::kBatched)->DenseRange(1, 8)->Unit(benchmark::kMillisecond);

void BM_Extend(benchmark::State& state) {
  const auto prompt = prompt_of(128);
  const TokenId next = 3;
  for (auto _ : state) {
    state.PauseTiming();
    auto session = latency_model().open_session();
    session->extend(prompt);
    state.ResumeTiming();
    benchmark::DoNotOptimize(session->extend(std::span<const TokenId>(&next, 1)));
  }
}
BENCHMARK(BM_Extend)->Unit(benchmark::kMillisecond);

// 16 new tokens after a 128-token prompt for each decode loop.
void BM_Greedy(benchmark::State& state) {
  const auto prompt = prompt_of(128);
  for (auto _ : state) benchmark::DoNotOptimize(generate_greedy(latency_model(), prompt, {16, std::nullopt, std::nullopt}));
}
BENCHMARK(BM_Greedy)->Unit(benchmark::kMillisecond);

void BM_Adaptive(benchmark::State& state, BranchMode mode) {
  const auto prompt = prompt_of(128);
  CAWConfig cfg;
  cfg.scheme = SchemeConfig::kgw(4.0);
  cfg.max_new_tokens = 16;
  const EvaluatorCapacity capacity(init_evaluator(WindowShape{64, 1, 1}, 64, 32, 1));
  const auto key = WatermarkKey::from_seed(1);
  for (auto _ : state) benchmark::DoNotOptimize(generate_wm(latency_model(), prompt, key, cfg, capacity, mode));
}
BENCHMARK_CAPTURE(BM_Adaptive, tree, BranchMode::kTree)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Adaptive, sequential, BranchMode::kSequential)->Unit(benchmark::kMillisecond);

void BM_Evaluator(benchmark::State& state) {
  const auto params = init_evaluator(WindowShape{64, 1, 1}, 64, 32, 1);
  std::vector<double> x(192, 1.0 / 64);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_features(params, x));
}
BENCHMARK(BM_Evaluator);

}  // namespace

BENCHMARK_MAIN();
