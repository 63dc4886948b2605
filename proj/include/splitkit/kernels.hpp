#pragma once

#include <span>

#include "splitkit/tensor.hpp"

// Hot loops behind the differentiable ops. Every kernel exists twice:
//   reference::  plain serial loops, kept as the test oracle
//   parallel::   OpenMP version used by the ops
// Parallel kernels split work over output elements only, so each output is
// produced by exactly one thread in a fixed order and results do not depend
// on the thread count.
//
// Layouts are row-major. Images are HWC. Column buffers have one row per
// output pixel and (ky, kx, c) ordered columns.

namespace splitkit::kernels {

struct ConvGeometry {
  Dim height = 0, width = 0, channels = 0;
  Dim kernel_h = 1, kernel_w = 1;
  Dim stride = 1, pad = 0;

  Dim out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  Dim out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  Dim col_width() const { return kernel_h * kernel_w * channels; }
};

// Deformable sampling is fixed to a 3x3 kernel, stride 1, padding 1.
// offsets: [H, W, 18], channel 2k is dy and 2k+1 is dx for tap k = ky*3+kx.
struct DeformGeometry {
  Dim height = 0, width = 0, channels = 0;
  static constexpr Dim kTaps = 9;
  Dim col_width() const { return kTaps * channels; }
};

/// Bilinear read of a zero-padded HWC map at fractional (y, x).
void bilinear_sample(std::span<const float> map, Dim height, Dim width, Dim channels, float y, float x,
                     std::span<float> out);

/// Scatter `grad_out` (one value per channel) into `grad_map` and return
/// d/dy, d/dx of <grad_out, sample(y, x)>.
void bilinear_sample_backward(std::span<const float> map, Dim height, Dim width, Dim channels, float y, float x,
                              std::span<const float> grad_out, std::span<float> grad_map, float& grad_y,
                              float& grad_x);

namespace reference {

// C[M,N] (+)= op(A) * op(B); op(A) is MxK, op(B) is KxN.
void gemm(bool trans_a, bool trans_b, Dim m, Dim n, Dim k, std::span<const float> a, std::span<const float> b,
          std::span<float> c, bool accumulate);
void im2col(const ConvGeometry& g, std::span<const float> image, std::span<float> cols);
// Adjoint of im2col; accumulates into image.
void col2im(const ConvGeometry& g, std::span<const float> cols, std::span<float> image);
void deform_im2col(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<float> cols);
// Accumulates into grad_image and grad_offsets.
void deform_col2im(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<const float> grad_cols, std::span<float> grad_image, std::span<float> grad_offsets);

}  // namespace reference

namespace parallel {

void gemm(bool trans_a, bool trans_b, Dim m, Dim n, Dim k, std::span<const float> a, std::span<const float> b,
          std::span<float> c, bool accumulate);
void im2col(const ConvGeometry& g, std::span<const float> image, std::span<float> cols);
void col2im(const ConvGeometry& g, std::span<const float> cols, std::span<float> image);
void deform_im2col(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<float> cols);
void deform_col2im(const DeformGeometry& g, std::span<const float> image, std::span<const float> offsets,
                   std::span<const float> grad_cols, std::span<float> grad_image, std::span<float> grad_offsets);

}  // namespace parallel

int max_threads();

}  // namespace splitkit::kernels
