// Serial reference kernels against their OpenMP counterparts on shapes taken
// from the tiny backbone and the adapter heads.

#include <benchmark/benchmark.h>

#include <vector>

#include "splitkit/kernels.hpp"

using namespace splitkit;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (float& x : v) x = rng.uniform(-1.0f, 1.0f);
  return v;
}

// Token projection in a D=64 block: 65 tokens x 64 -> 192.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const Dim m = state.range(0), n = state.range(1), k = state.range(2);
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::gemm(false, false, m, n, k, a, b, c, false);
    else kernels::reference::gemm(false, false, m, n, k, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * m * n * k);
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const Dim side = state.range(0), ch = state.range(1);
  kernels::ConvGeometry g{side, side, ch, 3, 3, 1, 1};
  auto image = random_vec(side * side * ch, 3);
  std::vector<float> cols(static_cast<std::size_t>(g.out_h() * g.out_w() * g.col_width()));
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::im2col(g, image, cols);
    else kernels::reference::im2col(g, image, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Parallel>
void BM_Col2im(benchmark::State& state) {
  const Dim side = state.range(0), ch = state.range(1);
  kernels::ConvGeometry g{side, side, ch, 3, 3, 1, 1};
  auto cols = random_vec(static_cast<std::size_t>(g.out_h() * g.out_w() * g.col_width()), 4);
  std::vector<float> image(static_cast<std::size_t>(side * side * ch));
  for (auto _ : state) {
    std::fill(image.begin(), image.end(), 0.0f);
    if constexpr (Parallel) kernels::parallel::col2im(g, cols, image);
    else kernels::reference::col2im(g, cols, image);
    benchmark::DoNotOptimize(image.data());
  }
}

template <bool Parallel>
void BM_DeformForward(benchmark::State& state) {
  const Dim side = state.range(0), ch = state.range(1);
  kernels::DeformGeometry g{side, side, ch};
  auto image = random_vec(side * side * ch, 5);
  auto offsets = random_vec(side * side * 18, 6);
  std::vector<float> cols(static_cast<std::size_t>(side * side * g.col_width()));
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::deform_im2col(g, image, offsets, cols);
    else kernels::reference::deform_im2col(g, image, offsets, cols);
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Parallel>
void BM_DeformBackward(benchmark::State& state) {
  const Dim side = state.range(0), ch = state.range(1);
  kernels::DeformGeometry g{side, side, ch};
  auto image = random_vec(side * side * ch, 7);
  auto offsets = random_vec(side * side * 18, 8);
  auto grad_cols = random_vec(static_cast<std::size_t>(side * side * g.col_width()), 9);
  std::vector<float> gi(image.size()), go(offsets.size());
  for (auto _ : state) {
    std::fill(gi.begin(), gi.end(), 0.0f);
    std::fill(go.begin(), go.end(), 0.0f);
    if constexpr (Parallel) kernels::parallel::deform_col2im(g, image, offsets, grad_cols, gi, go);
    else kernels::reference::deform_col2im(g, image, offsets, grad_cols, gi, go);
    benchmark::DoNotOptimize(gi.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Args({65, 192, 64})->Args({65, 256, 64})->Args({256, 64, 576});
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Args({65, 192, 64})->Args({65, 256, 64})->Args({256, 64, 576});
BENCHMARK(BM_Im2col<false>)->Name("im2col/reference")->Args({8, 64})->Args({32, 64});
BENCHMARK(BM_Im2col<true>)->Name("im2col/parallel")->Args({8, 64})->Args({32, 64});
BENCHMARK(BM_Col2im<false>)->Name("col2im/reference")->Args({8, 64})->Args({32, 64});
BENCHMARK(BM_Col2im<true>)->Name("col2im/parallel")->Args({8, 64})->Args({32, 64});
BENCHMARK(BM_DeformForward<false>)->Name("deform_im2col/reference")->Args({8, 64});
BENCHMARK(BM_DeformForward<true>)->Name("deform_im2col/parallel")->Args({8, 64});
BENCHMARK(BM_DeformBackward<false>)->Name("deform_col2im/reference")->Args({8, 64});
BENCHMARK(BM_DeformBackward<true>)->Name("deform_col2im/parallel")->Args({8, 64});

BENCHMARK_MAIN();
