// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "dimlight/causal.hpp"
#include "dimlight/g2af.hpp"
#include "dimlight/len.hpp"
#include "dimlight/network.hpp"
#include "dimlight/objective.hpp"
#include "dimlight/random.hpp"
#include "dimlight/uad.hpp"

using namespace dimlight;

namespace {

Tensor input(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n) * c * h * w);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from({n, c, h, w}, v);
}

void BM_Conv3x3(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  ParameterSet ps;
  const Conv2d conv(Builder{ps, 1}, "conv", 16, 16, 3);
  const Tensor x = input(1, 16, s, s, 2);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv(x));
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(32)->Arg(64);

void BM_Fft2(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const Tensor x = input(1, 8, s, s, 3);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(fft2(x));
}
BENCHMARK(BM_Fft2)->Arg(8)->Arg(16)->Arg(32)->Arg(31);

void BM_EntropyMap(benchmark::State& state) {
  const Tensor x = input(1, 32, 16, 16, 4);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(entropy_map(x));
}
BENCHMARK(BM_EntropyMap);

void BM_NecoForward(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  ParameterSet ps;
  const Neco neco(Builder{ps, 5}, "neco", 8);
  const Tensor x = input(1, 8, s, s, 6);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(neco(x));
}
BENCHMARK(BM_NecoForward)->Arg(16)->Arg(32);

void BM_AscForward(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  ParameterSet ps;
  const Asc asc(Builder{ps, 7}, "asc", 8);
  const Tensor x = input(1, 8, s, s, 8);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(asc(x));
}
BENCHMARK(BM_AscForward)->Arg(16)->Arg(32);

void BM_ToyForward(benchmark::State& state) {
  const Model m(ModelConfig::toy_preset());
  const Tensor x = input(1, 3, 32, 32, 9);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(m(x));
}
BENCHMARK(BM_ToyForward);

void BM_ToyTrainStep(benchmark::State& state) {
  Model m(ModelConfig::toy_preset());
  const Objective objective;
  const Tensor x = input(1, 3, 32, 32, 10);
  const Tensor gt = input(1, 3, 32, 32, 11);
  for (auto _ : state) {
    const auto out = m.run(x, RunMode{true, 1});
    const LossTerms terms = objective(out.image, gt, out.prior, len_target(x, gt));
    benchmark::DoNotOptimize(backward(terms.total, m.params()));
  }
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

void BM_ReferenceForward(benchmark::State& state) {
  const Model m(ModelConfig::reference());
  const Tensor x = input(1, 3, 64, 64, 12);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(m(x));
}
BENCHMARK(BM_ReferenceForward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
