#pragma once

#include <span>
#include <vector>

#include "splitkit/tensor.hpp"

// Differentiable primitives. Each op computes its output eagerly and, when
// any input requires grad and recording is enabled, appends a backward rule
// to the current GradGraph. Images are HWC.

namespace splitkit::ops {

// Elementwise. Shapes must match exactly; only scalar-with-tensor broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
/// Multiplies every element of x by the scalar tensor s.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor gelu(const Tensor& x);

// Reductions to a scalar (shape []). Accumulated in f64.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Shape ops.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> axes);
Tensor slice(const Tensor& x, int axis, Dim start, Dim length);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);
/// x[N,in] * weight[in,out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Normalisation / activation over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);
Tensor softmax(const Tensor& x);

// Convolutions on HWC maps.
/// weight [kh,kw,Cin,Cout], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Dim stride, Dim pad);
/// weight [Cin,kh,kw,Cout]; output side is (in-1)*stride - 2*pad + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Dim stride, Dim pad);
/// 2x2 window, stride 2. Odd sizes are rejected.
Tensor max_pool2x2(const Tensor& x);
/// map [H,W,C], coord [2] = (y, x) -> [C], zero padding outside the map.
Tensor bilinear_sample(const Tensor& map, const Tensor& coord);
/// 3x3, stride 1, pad 1 deformable convolution.
/// x [H,W,Cin], offsets [H,W,18], weight [3,3,Cin,Cout], bias [Cout] or undefined.
Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& weight, const Tensor& bias);

/// Mean cross-entropy of logits [P,C] against integer labels (size P).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace splitkit::ops
