// Finite-difference checks for every differentiable primitive.
// Each op output is contracted with a fixed random projection so that every
// output element contributes to the scalar under test. Projection weights are
// powers of two, so the contraction adds no rounding of its own.

#include <gtest/gtest.h>

#include "splitkit/ops.hpp"

using namespace splitkit;

namespace {

constexpr float kEps = 1e-3f;
constexpr double kTol = 1e-3;

Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  static constexpr float kLevels[] = {-1.0f, -0.5f, 0.25f, 0.5f, 1.0f, 2.0f};
  Tensor w = Tensor::zeros(y.shape());
  for (float& v : w.mutable_data()) v = kLevels[rng.below(6)];
  return ops::sum(ops::mul(y, w));
}

double check(const std::function<Tensor(const Tensor&)>& op, Tensor x) {
  return grad_check([&](const Tensor& t) { return project(op(t), 1234); }, x, kEps);
}

Tensor randn(Shape s, std::uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, scale);
}

}  // namespace

TEST(OpGradCheck, Elementwise) {
  Tensor other = randn({3, 4}, 2);
  EXPECT_LT(check([&](const Tensor& t) { return ops::add(t, other); }, randn({3, 4}, 1)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::sub(other, t); }, randn({3, 4}, 1)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::mul(t, other); }, randn({3, 4}, 1)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::mul(other, t); }, randn({3, 4}, 1)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::scale(t, -0.7f); }, randn({3, 4}, 1)), kTol);
  EXPECT_LT(check([](const Tensor& t) { return ops::gelu(t); }, randn({3, 4}, 3)), kTol);
}

TEST(OpGradCheck, ScalarBroadcast) {
  Tensor map = randn({3, 4}, 4);
  EXPECT_LT(check([&](const Tensor& s) { return ops::mul_scalar(map, s); }, Tensor::scalar(0.8f)), kTol);
  EXPECT_LT(check([&](const Tensor& s) { return ops::add(s, map); }, Tensor::scalar(0.8f)), kTol);
}

TEST(OpGradCheck, Reductions) {
  EXPECT_LT(grad_check([](const Tensor& t) { return ops::sum(ops::mul(t, t)); }, randn({2, 5}, 5), kEps), kTol);
  EXPECT_LT(grad_check([](const Tensor& t) { return ops::mean(ops::mul(t, t)); }, randn({2, 5}, 5), kEps), kTol);
}

TEST(OpGradCheck, ShapeOps) {
  EXPECT_LT(check([](const Tensor& t) { return ops::reshape(t, {6, 2}); }, randn({3, 4}, 6)), kTol);
  EXPECT_LT(check([](const Tensor& t) { return ops::permute(t, {2, 0, 1}); }, randn({2, 3, 4}, 6)), kTol);
  EXPECT_LT(check([](const Tensor& t) { return ops::slice(t, 1, 1, 2); }, randn({2, 3, 4}, 6)), kTol);
  Tensor other = randn({2, 2, 4}, 8);
  EXPECT_LT(check([&](const Tensor& t) { return ops::concat({other, t, other}, 1); }, randn({2, 3, 4}, 7)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::concat({t, t}, -1); }, randn({2, 3, 4}, 7)), kTol);
}

TEST(OpGradCheck, MatmulBothSides) {
  Tensor b = randn({4, 3}, 10);
  Tensor a = randn({2, 4}, 11);
  EXPECT_LT(check([&](const Tensor& t) { return ops::matmul(t, b); }, randn({2, 4}, 9)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::matmul(a, t); }, randn({4, 3}, 9)), kTol);
}

TEST(OpGradCheck, BatchedMatmul) {
  Tensor b = randn({2, 4, 3}, 12);
  Tensor a = randn({2, 5, 4}, 13);
  EXPECT_LT(check([&](const Tensor& t) { return ops::bmm(t, b); }, randn({2, 5, 4}, 14)), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::bmm(a, t); }, randn({2, 4, 3}, 14)), kTol);
}

TEST(OpGradCheck, Linear) {
  Tensor x = randn({3, 4}, 15), w = randn({4, 5}, 16), b = randn({5}, 17);
  EXPECT_LT(check([&](const Tensor& t) { return ops::linear(t, w, b); }, x.clone()), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::linear(x, t, b); }, w.clone()), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::linear(x, w, t); }, b.clone()), kTol);
}

TEST(OpGradCheck, LayerNorm) {
  Tensor x = randn({3, 6}, 18), g = randn({6}, 19), b = randn({6}, 20);
  EXPECT_LT(check([&](const Tensor& t) { return ops::layer_norm(t, g, b); }, x.clone()), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::layer_norm(x, t, b); }, g.clone()), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::layer_norm(x, g, t); }, b.clone()), kTol);
}

TEST(OpGradCheck, Softmax) {
  EXPECT_LT(check([](const Tensor& t) { return ops::softmax(t); }, randn({3, 5}, 21)), kTol);
}

TEST(OpGradCheck, Conv2d) {
  Tensor x = randn({5, 5, 2}, 22), w = randn({3, 3, 2, 3}, 23, 0.5f), b = randn({3}, 24);
  for (Dim stride : {1, 2}) {
    for (Dim pad : {0, 1}) {
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv2d(t, w, b, stride, pad); }, x.clone()), kTol)
          << "stride " << stride << " pad " << pad;
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv2d(x, t, b, stride, pad); }, w.clone()), kTol);
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv2d(x, w, t, stride, pad); }, b.clone()), kTol);
    }
  }
}

TEST(OpGradCheck, ConvTranspose2d) {
  Tensor x = randn({3, 3, 2}, 25), w = randn({2, 3, 3, 3}, 26, 0.5f), b = randn({3}, 27);
  for (Dim stride : {1, 2}) {
    for (Dim pad : {0, 1}) {
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv_transpose2d(t, w, b, stride, pad); }, x.clone()), kTol)
          << "stride " << stride << " pad " << pad;
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv_transpose2d(x, t, b, stride, pad); }, w.clone()), kTol);
      EXPECT_LT(check([&](const Tensor& t) { return ops::conv_transpose2d(x, w, t, stride, pad); }, b.clone()), kTol);
    }
  }
}

TEST(OpGradCheck, MaxPool) {
  // Distinct values so no window is near a tie.
  std::vector<float> v(4 * 4 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i * 7) % 32) * 0.1f;
  EXPECT_LT(check([](const Tensor& t) { return ops::max_pool2x2(t); }, Tensor::from({4, 4, 2}, v)), kTol);
}

TEST(OpGradCheck, BilinearSampleMapAndCoords) {
  Tensor map = randn({4, 4, 3}, 28);
  Tensor coord = Tensor::from({2}, {1.3f, 2.6f});
  EXPECT_LT(check([&](const Tensor& t) { return ops::bilinear_sample(t, coord); }, map.clone()), kTol);
  EXPECT_LT(check([&](const Tensor& t) { return ops::bilinear_sample(map, t); }, coord.clone()), kTol);
}

TEST(OpGradCheck, CrossEntropy) {
  std::vector<int> labels = {0, 2, 1, 2};
  EXPECT_LT(grad_check([&](const Tensor& t) { return ops::cross_entropy(t, labels); }, randn({4, 3}, 29), kEps), kTol);
}
