#include <algorithm>
#include <cmath>

#include "kernels_generic.hpp"

namespace splitkit::kernels {

using generic::inside;

void bilinear_sample(std::span<const float> map, Dim height, Dim width, Dim channels, float y, float x,
                     std::span<float> out) {
  generic::bilinear_sample<float>(map, height, width, channels, y, x, out);
}

void bilinear_sample_backward(std::span<const float> map, Dim height, Dim width, Dim channels, float y, float x,
                              std::span<const float> grad_out, std::span<float> grad_map, float& grad_y,
                              float& grad_x) {
  const float y0f = std::floor(y);
  const float x0f = std::floor(x);
  const float ly = y - y0f, lx = x - x0f;
  const Dim y0 = static_cast<Dim>(y0f), x0 = static_cast<Dim>(x0f);
  // Corner weights and their derivatives w.r.t. y and x.
  const Dim ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const Dim xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const float w[4] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
  const float dwy[4] = {-(1 - lx), -lx, (1 - lx), lx};
  const float dwx[4] = {-(1 - ly), (1 - ly), -ly, ly};
  double gy = 0.0, gx = 0.0;
  for (int i = 0; i < 4; ++i) {
    if (!inside(ys[i], xs[i], height, width)) continue;
    const Dim base = (ys[i] * width + xs[i]) * channels;
    double dot = 0.0;
    for (Dim ch = 0; ch < channels; ++ch) {
      dot += static_cast<double>(grad_out[ch]) * map[base + ch];
      if (!grad_map.empty()) grad_map[base + ch] += w[i] * grad_out[ch];
    }
    gy += dwy[i] * dot;
    gx += dwx[i] * dot;
  }
  grad_y = static_cast<float>(gy);
  grad_x = static_cast<float>(gx);
}

namespace reference {

void gemm(bool trans_a, bool trans_b, Dim m, Dim n, Dim k, std::span<const float> a, std::span<const float> b,
          std::span<float> c, bool accumulate) {
  generic::gemm<float>(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

void im2col(const ConvGeometry& g, std::span<const float> image, std::span<float> cols) {
  generic::im2col<float>(g, image, cols);
}

void col2im(const ConvGeometry& g, std::span<const float> cols, std::span<float> image) {
  generic::col2im<float>(g, cols, image);
}

void deform_im2col(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<float> cols) {
  generic::deform_im2col<float>(g, image, offsets, cols);
}

void deform_col2im(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<const float> grad_cols, std::span<float> grad_image, std::span<float> grad_offsets) {
  for (Dim py = 0; py < g.height; ++py) {
    for (Dim px = 0; px < g.width; ++px) {
      const Dim p = py * g.width + px;
      for (Dim k = 0; k < DeformGeometry::kTaps; ++k) {
        const float y = static_cast<float>(py + k / 3 - 1) + offsets[p * 18 + 2 * k];
        const float x = static_cast<float>(px + k % 3 - 1) + offsets[p * 18 + 2 * k + 1];
        float gy = 0.0f, gx = 0.0f;
        bilinear_sample_backward(image, g.height, g.width, g.channels, y, x,
                                 grad_cols.subspan(static_cast<std::size_t>(p * g.col_width() + k * g.channels),
                                                   static_cast<std::size_t>(g.channels)),
                                 grad_image, gy, gx);
        if (!grad_offsets.empty()) {
          grad_offsets[p * 18 + 2 * k] += gy;
          grad_offsets[p * 18 + 2 * k + 1] += gx;
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace splitkit::kernels
