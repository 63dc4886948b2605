#include <omp.h>

#include <algorithm>
#include <cmath>

#include "splitkit/kernels.hpp"

namespace splitkit::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace parallel {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr Dim kParallelGrain = 1 << 14;

bool inside(Dim y, Dim x, Dim h, Dim w) { return y >= 0 && y < h && x >= 0 && x < w; }

}  // namespace

void gemm(bool trans_a, bool trans_b, Dim m, Dim n, Dim k, std::span<const float> a, std::span<const float> b,
          std::span<float> c, bool accumulate) {
  const float* A = a.data();
  const float* B = b.data();
  float* C = c.data();
  const bool go_parallel = m * n * k >= kParallelGrain;

  if (!trans_b) {
#pragma omp parallel for schedule(static) if (go_parallel)
    for (Dim i = 0; i < m; ++i) {
      float* crow = C + i * n;
      if (!accumulate) std::fill(crow, crow + n, 0.0f);
      for (Dim p = 0; p < k; ++p) {
        const float av = trans_a ? A[p * m + i] : A[i * k + p];
        if (av == 0.0f) continue;
        const float* brow = B + p * n;
#pragma omp simd
        for (Dim j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }

#pragma omp parallel for schedule(static) if (go_parallel)
  for (Dim i = 0; i < m; ++i) {
    float* crow = C + i * n;
    for (Dim j = 0; j < n; ++j) {
      const float* brow = B + j * k;
      float sum = 0.0f;
      if (!trans_a) {
        const float* arow = A + i * k;
#pragma omp simd reduction(+ : sum)
        for (Dim p = 0; p < k; ++p) sum += arow[p] * brow[p];
      } else {
        for (Dim p = 0; p < k; ++p) sum += A[p * m + i] * brow[p];
      }
      crow[j] = accumulate ? crow[j] + sum : sum;
    }
  }
}

void im2col(const ConvGeometry& g, std::span<const float> image, std::span<float> cols) {
  const Dim oh = g.out_h(), ow = g.out_w();
  const float* src = image.data();
#pragma omp parallel for schedule(static) if (oh * ow * g.col_width() >= kParallelGrain)
  for (Dim oy = 0; oy < oh; ++oy) {
    for (Dim ox = 0; ox < ow; ++ox) {
      float* row = cols.data() + (oy * ow + ox) * g.col_width();
      for (Dim ky = 0; ky < g.kernel_h; ++ky) {
        const Dim iy = oy * g.stride - g.pad + ky;
        for (Dim kx = 0; kx < g.kernel_w; ++kx) {
          const Dim ix = ox * g.stride - g.pad + kx;
          float* dst = row + (ky * g.kernel_w + kx) * g.channels;
          if (inside(iy, ix, g.height, g.width)) {
            std::copy_n(src + (iy * g.width + ix) * g.channels, g.channels, dst);
          } else {
            std::fill_n(dst, g.channels, 0.0f);
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, std::span<const float> cols, std::span<float> image) {
  const Dim oh = g.out_h(), ow = g.out_w();
  float* dst = image.data();
  // Gather form: each input pixel sums the column entries that read it.
#pragma omp parallel for schedule(static) if (g.height * g.width * g.col_width() >= kParallelGrain)
  for (Dim iy = 0; iy < g.height; ++iy) {
    for (Dim ix = 0; ix < g.width; ++ix) {
      float* pix = dst + (iy * g.width + ix) * g.channels;
      for (Dim ky = 0; ky < g.kernel_h; ++ky) {
        const Dim ty = iy + g.pad - ky;
        if (ty < 0 || ty % g.stride != 0) continue;
        const Dim oy = ty / g.stride;
        if (oy >= oh) continue;
        for (Dim kx = 0; kx < g.kernel_w; ++kx) {
          const Dim tx = ix + g.pad - kx;
          if (tx < 0 || tx % g.stride != 0) continue;
          const Dim ox = tx / g.stride;
          if (ox >= ow) continue;
          const float* src = cols.data() + (oy * ow + ox) * g.col_width() + (ky * g.kernel_w + kx) * g.channels;
#pragma omp simd
          for (Dim ch = 0; ch < g.channels; ++ch) pix[ch] += src[ch];
        }
      }
    }
  }
}

void deform_im2col(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<float> cols) {
  const Dim pixels = g.height * g.width;
#pragma omp parallel for schedule(static) if (pixels * g.col_width() >= kParallelGrain)
  for (Dim p = 0; p < pixels; ++p) {
    const Dim py = p / g.width, px = p % g.width;
    for (Dim k = 0; k < DeformGeometry::kTaps; ++k) {
      const float y = static_cast<float>(py + k / 3 - 1) + offsets[p * 18 + 2 * k];
      const float x = static_cast<float>(px + k % 3 - 1) + offsets[p * 18 + 2 * k + 1];
      bilinear_sample(image, g.height, g.width, g.channels, y, x,
                      cols.subspan(static_cast<std::size_t>(p * g.col_width() + k * g.channels),
                                   static_cast<std::size_t>(g.channels)));
    }
  }
}

void deform_col2im(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<const float> grad_cols, std::span<float> grad_image, std::span<float> grad_offsets) {
  const Dim pixels = g.height * g.width;
  const bool go_parallel = pixels * g.col_width() >= kParallelGrain;

  if (!grad_offsets.empty()) {
#pragma omp parallel for schedule(static) if (go_parallel)
    for (Dim p = 0; p < pixels; ++p) {
      const Dim py = p / g.width, px = p % g.width;
      for (Dim k = 0; k < DeformGeometry::kTaps; ++k) {
        const float y = static_cast<float>(py + k / 3 - 1) + offsets[p * 18 + 2 * k];
        const float x = static_cast<float>(px + k % 3 - 1) + offsets[p * 18 + 2 * k + 1];
        float gy = 0.0f, gx = 0.0f;
        bilinear_sample_backward(image, g.height, g.width, g.channels, y, x,
                                 grad_cols.subspan(static_cast<std::size_t>(p * g.col_width() + k * g.channels),
                                                   static_cast<std::size_t>(g.channels)),
                                 {}, gy, gx);
        grad_offsets[p * 18 + 2 * k] += gy;
        grad_offsets[p * 18 + 2 * k + 1] += gx;
      }
    }
  }

  if (grad_image.empty()) return;
  // Scatter targets depend on the offsets, so split by channel: every thread
  // owns one contiguous channel block of grad_image and walks all taps in the
  // same order, which keeps the sums independent of the thread count.
#pragma omp parallel if (go_parallel)
  {
    const Dim threads = omp_get_num_threads(), t = omp_get_thread_num();
    const Dim c0 = g.channels * t / threads, c1 = g.channels * (t + 1) / threads;
    for (Dim p = 0; c0 < c1 && p < pixels; ++p) {
      const Dim py = p / g.width, px = p % g.width;
      for (Dim k = 0; k < DeformGeometry::kTaps; ++k) {
        const float y = static_cast<float>(py + k / 3 - 1) + offsets[p * 18 + 2 * k];
        const float x = static_cast<float>(px + k % 3 - 1) + offsets[p * 18 + 2 * k + 1];
        const float y0f = std::floor(y), x0f = std::floor(x);
        const float ly = y - y0f, lx = x - x0f;
        const Dim y0 = static_cast<Dim>(y0f), x0 = static_cast<Dim>(x0f);
        const Dim ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const Dim xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const float w[4] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
        const float* gv = grad_cols.data() + p * g.col_width() + k * g.channels;
        for (int i = 0; i < 4; ++i) {
          if (!inside(ys[i], xs[i], g.height, g.width)) continue;
          float* dst = grad_image.data() + (ys[i] * g.width + xs[i]) * g.channels;
#pragma omp simd
          for (Dim ch = c0; ch < c1; ++ch) dst[ch] += w[i] * gv[ch];
        }
      }
    }
  }
}

}  // namespace parallel

}  // namespace splitkit::kernels
