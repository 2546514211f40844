// Serial vs OpenMP kernels, plus the encoder forward at growing lengths.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "qgs/kernels.hpp"

namespace k = qgs::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

k::SegmentLayout layout(benchmark::State& state) {
  return {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 64};
}

template <bool Parallel>
void BM_DecayScan(benchmark::State& state) {
  const auto l = layout(state);
  const std::size_t n = l.segments * l.seg_len * l.dim;
  const auto s = random_vec(n, 1);
  std::vector<float> gamma(l.dim, 0.95f), c(n);
  k::set_threads(Parallel ? k::max_threads() : 1);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::decay_scan_forward(l, s.data(), gamma.data(), c.data());
    else
      k::serial::decay_scan_forward(l, s.data(), gamma.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(n));
}

template <bool Parallel>
void BM_DecayScanBackward(benchmark::State& state) {
  const auto l = layout(state);
  const std::size_t n = l.segments * l.seg_len * l.dim;
  const auto s = random_vec(n, 1), dc = random_vec(n, 7);
  std::vector<float> gamma(l.dim, 0.95f), c(n), ds(n), dgamma(l.dim);
  k::serial::decay_scan_forward(l, s.data(), gamma.data(), c.data());
  k::set_threads(Parallel ? k::max_threads() : 1);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::decay_scan_backward(l, c.data(), gamma.data(), dc.data(), ds.data(), dgamma.data());
    else
      k::serial::decay_scan_backward(l, c.data(), gamma.data(), dc.data(), ds.data(), dgamma.data());
    benchmark::DoNotOptimize(ds.data());
  }
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(n));
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  k::AttentionShape shape;
  shape.layout = {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 32};
  shape.heads = 4;
  shape.logit_scale = 1.0 / 8;
  const std::size_t n = shape.layout.segments * shape.layout.seg_len * shape.layout.dim;
  const auto q = random_vec(n, 2), kk = random_vec(n, 3), v = random_vec(n, 4);
  std::vector<float> out(n);
  k::set_threads(Parallel ? k::max_threads() : 1);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::attention_forward(shape, q.data(), kk.data(), v.data(), out.data());
    else
      k::serial::attention_forward(shape, q.data(), kk.data(), v.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_Gemm(benchmark::State& state) {
  const std::size_t m = static_cast<std::size_t>(state.range(0)), n = 64, kd = 64;
  const auto a = random_vec(m * kd, 5), b = random_vec(kd * n, 6);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    k::gemm<float>(false, false, m, n, kd, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
}

}  // namespace

BENCHMARK(BM_DecayScan<false>)->Args({16, 256})->Args({64, 1024});
BENCHMARK(BM_DecayScan<true>)->Args({16, 256})->Args({64, 1024});
BENCHMARK(BM_DecayScanBackward<false>)->Args({16, 256})->Args({64, 1024});
BENCHMARK(BM_DecayScanBackward<true>)->Args({16, 256})->Args({64, 1024});
BENCHMARK(BM_Attention<false>)->Args({16, 16})->Args({64, 32});
BENCHMARK(BM_Attention<true>)->Args({16, 16})->Args({64, 32});
BENCHMARK(BM_Gemm)->Arg(256)->Arg(4096);

BENCHMARK_MAIN();
