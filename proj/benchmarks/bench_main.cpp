#include <benchmark/benchmark.h>

#include <random>

#include "triad/preprocess.hpp"
#include "triad/pretrain.hpp"

namespace {

triad::Volume noise_volume(triad::Shape3 shape, triad::Vec3 spacing) {
  auto v = triad::Volume::zeros(shape, spacing);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& x : v.data) x = u(rng);
  return v;
}

void BM_ResampleIso(benchmark::State& state) {
  const auto n = state.range(0);
  const auto v = noise_volume({n, n, n}, {1.0, 1.25, 0.8});
  for (auto _ : state) benchmark::DoNotOptimize(triad::resample_iso(v, 1.0));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_ResampleIso)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ResizeTo(benchmark::State& state) {
  const auto n = state.range(0);
  const auto v = noise_volume({n, n, n}, {1.0, 1.0, 1.0});
  for (auto _ : state) benchmark::DoNotOptimize(triad::resize_to(v, {96, 96, 96}));
  state.SetItemsProcessed(state.iterations() * 96 * 96 * 96);
}
BENCHMARK(BM_ResizeTo)->Arg(48)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Reorient(benchmark::State& state) {
  const auto v = noise_volume({64, 64, 64}, {1.0, 1.0, 1.0});
  const auto target = triad::AxisCode::parse("LPI");
  for (auto _ : state) benchmark::DoNotOptimize(triad::reorient(v, target));
}
BENCHMARK(BM_Reorient)->Unit(benchmark::kMillisecond);

void BM_LogRatioLoss(benchmark::State& state) {
  const auto b = state.range(0);
  torch::manual_seed(0);
  auto f = torch::randn({b, 768});
  auto y = torch::randn({b, 256});
  for (auto _ : state) benchmark::DoNotOptimize(triad::log_ratio_loss(f, y).item<float>());
}
BENCHMARK(BM_LogRatioLoss)->Arg(4)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_LogRatioBackward(benchmark::State& state) {
  const auto b = state.range(0);
  torch::manual_seed(0);
  auto f = torch::randn({b, 768}, torch::requires_grad());
  auto y = torch::randn({b, 256});
  for (auto _ : state) {
    auto loss = triad::log_ratio_loss(f, y);
    loss.backward();
    f.mutable_grad().zero_();
  }
}
BENCHMARK(BM_LogRatioBackward)->Arg(16)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
