#pragma once

// Serial kernels templated on the element type. The float instantiations back
// kernels::reference; the double ones back the wide evaluation used by the
// finite-difference oracle.

#include <algorithm>
#include <cmath>
#include <span>

#include "splitkit/kernels.hpp"

namespace splitkit::kernels::generic {

inline bool inside(Dim y, Dim x, Dim h, Dim w) { return y >= 0 && y < h && x >= 0 && x < w; }

template <class T>
void gemm(bool trans_a, bool trans_b, Dim m, Dim n, Dim k, std::span<const T> a, std::span<const T> b,
          std::span<T> c, bool accumulate) {
  for (Dim i = 0; i < m; ++i) {
    for (Dim j = 0; j < n; ++j) {
      double sum = 0.0;
      for (Dim p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        sum += static_cast<double>(av) * bv;
      }
      T& out = c[i * n + j];
      out = accumulate ? out + static_cast<T>(sum) : static_cast<T>(sum);
    }
  }
}

template <class T>
void im2col(const ConvGeometry& g, std::span<const T> image, std::span<T> cols) {
  const Dim oh = g.out_h(), ow = g.out_w();
  for (Dim oy = 0; oy < oh; ++oy) {
    for (Dim ox = 0; ox < ow; ++ox) {
      T* row = cols.data() + (oy * ow + ox) * g.col_width();
      for (Dim ky = 0; ky < g.kernel_h; ++ky) {
        for (Dim kx = 0; kx < g.kernel_w; ++kx) {
          const Dim iy = oy * g.stride - g.pad + ky;
          const Dim ix = ox * g.stride - g.pad + kx;
          T* dst = row + (ky * g.kernel_w + kx) * g.channels;
          for (Dim ch = 0; ch < g.channels; ++ch) {
            dst[ch] = inside(iy, ix, g.height, g.width) ? image[(iy * g.width + ix) * g.channels + ch] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, std::span<const T> cols, std::span<T> image) {
  const Dim oh = g.out_h(), ow = g.out_w();
  for (Dim oy = 0; oy < oh; ++oy) {
    for (Dim ox = 0; ox < ow; ++ox) {
      const T* row = cols.data() + (oy * ow + ox) * g.col_width();
      for (Dim ky = 0; ky < g.kernel_h; ++ky) {
        for (Dim kx = 0; kx < g.kernel_w; ++kx) {
          const Dim iy = oy * g.stride - g.pad + ky;
          const Dim ix = ox * g.stride - g.pad + kx;
          if (!inside(iy, ix, g.height, g.width)) continue;
          const T* src = row + (ky * g.kernel_w + kx) * g.channels;
          for (Dim ch = 0; ch < g.channels; ++ch) image[(iy * g.width + ix) * g.channels + ch] += src[ch];
        }
      }
    }
  }
}

template <class T>
void bilinear_sample(std::span<const T> map, Dim height, Dim width, Dim channels, T y, T x, std::span<T> out) {
  std::fill(out.begin(), out.begin() + channels, T(0));
  const T y0f = std::floor(y), x0f = std::floor(x);
  const T ly = y - y0f, lx = x - x0f;
  const Dim y0 = static_cast<Dim>(y0f), x0 = static_cast<Dim>(x0f);
  const Dim ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const Dim xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const T w[4] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
  for (int i = 0; i < 4; ++i) {
    if (!inside(ys[i], xs[i], height, width) || w[i] == T(0)) continue;
    const T* src = map.data() + (ys[i] * width + xs[i]) * channels;
    for (Dim ch = 0; ch < channels; ++ch) out[ch] += w[i] * src[ch];
  }
}

template <class T>
void deform_im2col(const DeformGeometry& g, std::span<const T> image, std::span<const T> offsets, std::span<T> cols) {
  for (Dim py = 0; py < g.height; ++py) {
    for (Dim px = 0; px < g.width; ++px) {
      const Dim p = py * g.width + px;
      for (Dim k = 0; k < DeformGeometry::kTaps; ++k) {
        const T y = static_cast<T>(py + k / 3 - 1) + offsets[p * 18 + 2 * k];
        const T x = static_cast<T>(px + k % 3 - 1) + offsets[p * 18 + 2 * k + 1];
        bilinear_sample<T>(image, g.height, g.width, g.channels, y, x,
                           cols.subspan(static_cast<std::size_t>(p * g.col_width() + k * g.channels),
                                        static_cast<std::size_t>(g.channels)));
      }
    }
  }
}

}  // namespace splitkit::kernels::generic
