#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "splitkit/adapter.hpp"
#include "splitkit/ops.hpp"

using namespace splitkit;

namespace {

ViTConfig small_vit() {
  ViTConfig c;
  c.layers = 4;
  c.dim = 8;
  c.heads = 2;
  c.patch = 8;
  c.height = 32;
  c.width = 32;
  c.mlp_ratio = 2;
  return c;
}

FeatureStack random_stack(int layers, Dim h, Dim w, Dim dim, Rng& rng) {
  FeatureStack s;
  for (int i = 0; i < layers; ++i) s.push_back(Tensor::randn({h * w + 1, dim}, rng));
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (Dim i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

void fill(Tensor t, float v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

// Identity weight at the centre tap of a 3x3 kernel [3,3,C,C].
Tensor centre_identity(Dim c) {
  Tensor w = Tensor::zeros({3, 3, c, c});
  auto d = w.mutable_data();
  for (Dim i = 0; i < c; ++i) d[((1 * 3 + 1) * c + i) * c + i] = 1.0f;
  return w;
}

// Weighted sum with a fixed random projection, so every output element
// contributes a distinct gradient.
Tensor project(const Tensor& y, const Tensor& proj) { return ops::sum(ops::mul(y, proj)); }

}  // namespace

TEST(UniformSelect, WorkedExamples) {
  auto a = uniform_select(12, 2, 4);
  EXPECT_DOUBLE_EQ(a.delta, 3.0);
  EXPECT_EQ(a.indices, (std::vector<int>{2, 5, 8, 11}));

  auto b = uniform_select(40, 26, 14);
  EXPECT_DOUBLE_EQ(b.delta, 1.0);
  std::vector<int> want;
  for (int i = 26; i <= 39; ++i) want.push_back(i);
  EXPECT_EQ(b.indices, want);

  EXPECT_EQ(uniform_select(24, 23, 1).indices, std::vector<int>{23});
}

TEST(UniformSelect, HalvesRoundAwayFromZero) {
  // delta = 1.5 -> 0, 1.5, 3, 4.5 -> 0, 2, 3, 5
  EXPECT_EQ(uniform_select(6, 0, 4).indices, (std::vector<int>{0, 2, 3, 5}));
  EXPECT_EQ(round_half_away(2.5), 3);
  EXPECT_EQ(round_half_away(-2.5), -3);
  EXPECT_EQ(round_half_away(2.4999), 2);
}

TEST(UniformSelect, Errors) {
  try {
    uniform_select(12, 10, 3);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("more samples than available layers"), std::string::npos);
  }
  EXPECT_THROW(uniform_select(12, 2, 0), std::invalid_argument);
  EXPECT_THROW(uniform_select(12, 12, 1), std::invalid_argument);
  EXPECT_THROW(uniform_select(12, 11, 2), std::invalid_argument);
}

TEST(UniformSelect, Deterministic) {
  EXPECT_EQ(uniform_select(17, 3, 5).indices, uniform_select(17, 3, 5).indices);
}

TEST(GatherPrior, ChannelBlocksMatchDirectIndexing) {
  Rng rng(1);
  const Dim h = 3, w = 2, d = 4;
  FeatureStack s = random_stack(6, h, w, d, rng);
  auto plan = uniform_select(6, 1, 3);  // {1, 3, 5}
  Tensor out = gather_prior(s, plan, h, w);
  ASSERT_EQ(out.shape(), (Shape{h, w, 3 * d}));
  for (std::size_t j = 0; j < plan.indices.size(); ++j) {
    const Tensor& src = s[plan.indices[j]];
    for (Dim y = 0; y < h; ++y)
      for (Dim x = 0; x < w; ++x)
        for (Dim c = 0; c < d; ++c) {
          EXPECT_EQ(out[(y * w + x) * 3 * d + static_cast<Dim>(j) * d + c], src[(1 + y * w + x) * d + c]);
        }
  }
}

TEST(GatherPrior, ChannelCountAndSingleLayer) {
  Rng rng(2);
  FeatureStack s = random_stack(12, 2, 2, 64, rng);
  EXPECT_EQ(gather_prior(s, uniform_select(12, 2, 4), 2, 2).dim(2), 256);
  Tensor last = gather_prior(s, uniform_select(12, 11, 1), 2, 2);
  EXPECT_TRUE(bit_equal(last, tokens_to_map(s[11], 2, 2)));
}

TEST(GatherPrior, IndexOutsideStackRejected) {
  Rng rng(3);
  FeatureStack s = random_stack(4, 2, 2, 2, rng);
  auto plan = uniform_select(8, 0, 2);  // {0, 7}
  EXPECT_THROW(gather_prior(s, plan, 2, 2), std::invalid_argument);
}

TEST(SparseGate, WorkedColumn) {
  Tensor G = Tensor::from({4, 1}, {0.1f, 0.7f, 0.2f, 0.5f});
  Tensor sp = sparsify_gate(G, 2);
  EXPECT_EQ(sp[0], 0.0f);
  EXPECT_EQ(sp[2], 0.0f);
  const double e = std::exp(0.2);
  EXPECT_NEAR(sp[1], e / (e + 1.0), 1e-6);
  EXPECT_NEAR(sp[3], 1.0 / (e + 1.0), 1e-6);
  EXPECT_NEAR(sp[1], 0.5498, 5e-5);
  EXPECT_NEAR(sp[3], 0.4502, 5e-5);
}

TEST(SparseGate, TiesGoToLowerIndex) {
  Tensor G = Tensor::from({3, 1}, {0.5f, 0.5f, 0.5f});
  Tensor sp = sparsify_gate(G, 2);
  EXPECT_FLOAT_EQ(sp[0], 0.5f);
  EXPECT_FLOAT_EQ(sp[1], 0.5f);
  EXPECT_EQ(sp[2], 0.0f);
}

TEST(SparseGate, ColumnsAreSubDistributions) {
  Rng rng(4);
  const int L = 12, K = 4;
  Tensor sp = sparsify_gate(GateParams::init(L, K, rng).G, K);
  for (int j = 0; j < K; ++j) {
    int nonzero = 0;
    double total = 0.0;
    for (int i = 0; i < L; ++i) {
      const float v = sp[i * K + j];
      if (v != 0.0f) {
        ++nonzero;
        EXPECT_GT(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
      total += v;
    }
    EXPECT_EQ(nonzero, K);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(SparseGate, StraightThroughValueIsSparseGate) {
  Rng rng(5);
  Tensor G = Tensor::randn({6, 3}, rng).set_requires_grad(true);
  EXPECT_TRUE(bit_equal(straight_through_gate(G, 3), sparsify_gate(G, 3)));
}

TEST(SparseGate, StraightThroughGradientMatchesLeafGraph) {
  Rng rng(6);
  const int L = 5, K = 2;
  const Dim h = 2, w = 3, d = 4;
  FeatureStack s = random_stack(L, h, w, d, rng);
  Tensor proj = Tensor::randn({h, w, K * d}, rng);
  GateParams gate = GateParams::init(L, K, rng);

  GradGraph g1;
  {
    GraphScope scope(g1);
    backward(g1, project(sparse_gate_forward(s, gate, h, w), proj));
  }
  // Second graph: G_sp is itself the leaf, as if sparsification were identity.
  Tensor leaf = sparsify_gate(gate.G, K).set_requires_grad(true);
  GradGraph g2;
  {
    GraphScope scope(g2);
    backward(g2, project(mix_layers(s, leaf, h, w), proj));
  }
  ASSERT_TRUE(gate.G.has_grad());
  ASSERT_TRUE(leaf.has_grad());
  double diff = 0.0;
  for (std::size_t i = 0; i < leaf.grad().size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(gate.G.grad()[i]) - leaf.grad()[i]));
  }
  EXPECT_LT(diff, 1e-6);
  // Every entry of G receives gradient, including the dropped ones.
  for (float v : gate.G.grad()) EXPECT_NE(v, 0.0f);
}

TEST(SparseGate, OneHotSlotEqualsLayerMap) {
  Rng rng(7);
  FeatureStack s = random_stack(4, 2, 2, 3, rng);
  Tensor W = Tensor::zeros({4, 2});
  W.mutable_data()[2 * 2 + 0] = 1.0f;  // slot 0 <- layer 2
  W.mutable_data()[0 * 2 + 1] = 1.0f;  // slot 1 <- layer 0
  Tensor out = mix_layers(s, W, 2, 2);
  Tensor want = ops::concat({tokens_to_map(s[2], 2, 2), tokens_to_map(s[0], 2, 2)}, 2);
  EXPECT_TRUE(bit_equal(out, want));
}

TEST(SparseGate, KeepMoreThanLayersRejected) {
  Rng rng(8);
  EXPECT_THROW(sparsify_gate(Tensor::randn({3, 4}, rng), 4), std::invalid_argument);
  EXPECT_THROW(GateParams::init(3, 4, rng), std::invalid_argument);
}

TEST(TaskHead, CopiesEqualOriginalsWithIndependentStorage) {
  ViTConfig c = small_vit();
  Rng rng(9);
  auto bb = BackboneParams::init(c, rng);
  bb.freeze();
  TaskHead head = task_head_init(bb, 2);
  ASSERT_EQ(head.blocks.size(), 2u);
  for (int k = 0; k < 2; ++k) {
    auto copy = head.blocks[k].named();
    auto orig = bb.layers[c.layers - 2 + k].named();
    for (std::size_t i = 0; i < copy.size(); ++i) {
      EXPECT_TRUE(bit_equal(copy[i].second, orig[i].second)) << copy[i].first;
      EXPECT_FALSE(copy[i].second.same_node(orig[i].second));
      EXPECT_NE(copy[i].second.data().data(), orig[i].second.data().data());
      EXPECT_TRUE(copy[i].second.requires_grad());
    }
  }
}

TEST(TaskHead, CopyIdentityAtInit) {
  ViTConfig c = small_vit();
  Rng rng(10);
  auto bb = BackboneParams::init(c, rng);
  bb.freeze();
  FeatureStack s = forward_collect(Tensor::uniform({c.height, c.width, 3}, rng, 0.0f, 1.0f), bb);
  for (int kt = 1; kt <= c.layers - 1; ++kt) {
    TaskHead head = task_head_init(bb, kt);
    Tensor out = task_head_forward(s[c.layers - kt - 1], head, c.grid_h(), c.grid_w());
    EXPECT_EQ(out.shape(), (Shape{c.grid_h(), c.grid_w(), c.dim}));
    EXPECT_LT(max_abs_diff(out, tokens_to_map(s.back(), c.grid_h(), c.grid_w())), 1e-5) << "K_t=" << kt;
  }
}

TEST(TaskHead, OutOfRangeRejected) {
  ViTConfig c = small_vit();
  Rng rng(11);
  auto bb = BackboneParams::init(c, rng);
  EXPECT_THROW(task_head_init(bb, c.layers), std::invalid_argument);
  EXPECT_THROW(task_head_init(bb, 0), std::invalid_argument);
}

TEST(TaskHead, UpdateChangesCopiesOnly) {
  ViTConfig c = small_vit();
  Rng rng(12);
  auto bb = BackboneParams::init(c, rng);
  bb.freeze();
  const auto before = bb.checksum();
  TaskHead head = task_head_init(bb, 2);
  FeatureStack s = forward_collect(Tensor::uniform({c.height, c.width, 3}, rng, 0.0f, 1.0f), bb);
  GradGraph g;
  {
    GraphScope scope(g);
    backward(g, ops::mean(ops::mul(task_head_forward(s[1], head, 4, 4), task_head_forward(s[1], head, 4, 4))));
  }
  for (const auto& [name, t] : bb.named()) EXPECT_FALSE(t.has_grad()) << name;
  // Plain SGD step on the copies.
  bool moved = false;
  for (auto& block : head.blocks)
    for (auto& [name, t] : block.named()) {
      ASSERT_TRUE(t.has_grad()) << name;
      Tensor p = t;
      auto gr = t.grad();
      auto d = p.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] -= 0.1f * gr[i];
        moved = moved || gr[i] != 0.0f;
      }
    }
  EXPECT_TRUE(moved);
  EXPECT_EQ(bb.checksum(), before);
  EXPECT_FALSE(bit_equal(head.blocks[0].qkv_weight, bb.layers[2].qkv_weight));
}

TEST(TaskHead, WrongTokenCountRejected) {
  ViTConfig c = small_vit();
  Rng rng(13);
  auto bb = BackboneParams::init(c, rng);
  TaskHead head = task_head_init(bb, 1);
  EXPECT_THROW(task_head_forward(Tensor::randn({16, c.dim}, rng), head, 4, 4), std::invalid_argument);
}

TEST(DeformableConv, ZeroOffsetsMatchStandardConv) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const Dim h = 3 + trial % 4, w = 2 + trial % 5, cin = 1 + trial % 3, cout = 1 + trial % 4;
    Tensor x = Tensor::randn({h, w, cin}, rng);
    Tensor weight = Tensor::randn({3, 3, cin, cout}, rng);
    Tensor bias = Tensor::randn({cout}, rng);
    Tensor ow = Tensor::zeros({3, 3, cin, 18}), ob = Tensor::zeros({18});
    EXPECT_LT(max_abs_diff(deformable_conv2d(x, weight, bias, ow, ob), ops::conv2d(x, weight, bias, 1, 1)), 1e-5)
        << "trial " << trial;
  }
}

TEST(DeformableConv, HalfPixelOffsetAveragesFourNeighbours) {
  Tensor x = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
  Tensor ob = Tensor::full({18}, 0.5f);
  Tensor out = deformable_conv2d(x, centre_identity(1), Tensor::zeros({1}), Tensor::zeros({3, 3, 1, 18}), ob);
  EXPECT_NEAR(out[0], 2.5f, 1e-6);
}

TEST(DeformableConv, OnlyThreeByThree) {
  Rng rng(15);
  Tensor x = Tensor::randn({4, 4, 2}, rng);
  EXPECT_THROW(deformable_conv2d(x, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({2}), Tensor::zeros({3, 3, 2, 18}),
                                 Tensor::zeros({18})),
               std::invalid_argument);
}

TEST(DeformableConv, GradCheck) {
  Rng rng(16);
  Tensor x = Tensor::randn({5, 5, 2}, rng);
  Tensor weight = Tensor::randn({3, 3, 2, 3}, rng, 0.5f);
  Tensor bias = Tensor::randn({3}, rng);
  // Fractional offsets keep sample points away from the kinks at integers.
  Tensor ow = Tensor::randn({3, 3, 2, 18}, rng, 0.01f);
  Tensor ob = Tensor::uniform({18}, rng, 0.2f, 0.4f);
  Tensor proj = Tensor::randn({5, 5, 3}, rng);
  auto loss = [&] { return project(deformable_conv2d(x, weight, bias, ow, ob), proj); };
  for (Tensor* t : {&x, &weight, &bias, &ow, &ob}) {
    EXPECT_LT(grad_check([&](const Tensor&) { return loss(); }, *t, 1e-3f), 1e-3) << t - &x;
  }
}

TEST(PriorHead, ShapeAndZeroInput) {
  Rng rng(17);
  DeformBlock b = DeformBlock::init(16, 8, rng);
  EXPECT_EQ(prior_head_forward(Tensor::randn({4, 5, 16}, rng), b).shape(), (Shape{4, 5, 8}));
  Tensor out = prior_head_forward(Tensor::zeros({4, 5, 16}), b);
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(prior_head_forward(Tensor::zeros({4, 5, 8}), b), std::invalid_argument);
}

TEST(PriorHead, GradCheckFullHead) {
  Rng rng(18);
  const Dim d = 8, kp = 2;
  DeformBlock b = DeformBlock::init(kp * d, d, rng);
  b.pw_bias = Tensor::randn({d}, rng, 0.1f);
  b.norm_weight = Tensor::uniform({d}, rng, 0.5f, 1.5f);
  b.norm_bias = Tensor::randn({d}, rng, 0.1f);
  b.offset_weight = Tensor::randn({3, 3, d, 18}, rng, 0.02f);
  b.offset_bias = Tensor::uniform({18}, rng, 0.2f, 0.4f);
  b.dcn_bias = Tensor::randn({d}, rng, 0.1f);
  Tensor x = Tensor::randn({4, 4, kp * d}, rng);
  Tensor proj = Tensor::randn({4, 4, d}, rng);
  auto loss = [&](const Tensor&) { return project(prior_head_forward(x, b), proj); };
  EXPECT_LT(grad_check(loss, x, 1e-3f), 1e-3);
  for (auto& [name, t] : b.named()) EXPECT_LT(grad_check(loss, t, 1e-3f), 1e-3) << name;
}

TEST(Fusion, IdentityProjectionReturnsPrior) {
  Rng rng(19);
  const Dim d = 6;
  DeformBlock b = DeformBlock::init(2 * d, d, rng);
  b.norm_act = false;
  Tensor pw = Tensor::zeros({1, 1, 2 * d, d});
  for (Dim i = 0; i < d; ++i) pw.mutable_data()[i * d + i] = 1.0f;
  b.pw_weight = pw;
  b.dcn_weight = centre_identity(d);
  Tensor prior = Tensor::randn({3, 4, d}, rng), task = Tensor::randn({3, 4, d}, rng);
  EXPECT_LT(max_abs_diff(fusion_forward(prior, task, b), prior), 1e-5);
}

TEST(Fusion, ConcatOrderMatters) {
  Rng rng(20);
  const Dim d = 6;
  DeformBlock b = DeformBlock::init(2 * d, d, rng);
  Tensor prior = Tensor::randn({3, 4, d}, rng), task = Tensor::randn({3, 4, d}, rng);
  Tensor a = fusion_forward(prior, task, b);
  EXPECT_EQ(a.shape(), (Shape{3, 4, d}));
  EXPECT_GT(max_abs_diff(a, fusion_forward(task, prior, b)), 1e-3);
}

TEST(Fusion, ShapeMismatchRejected) {
  Rng rng(21);
  DeformBlock b = DeformBlock::init(8, 4, rng);
  EXPECT_THROW(fusion_forward(Tensor::zeros({2, 2, 4}), Tensor::zeros({2, 3, 4}), b), std::invalid_argument);
}

TEST(SegTransform, ShapeForTinyGrid) {
  Rng rng(22);
  SegHead s = SegHead::init(64, 5, rng);
  EXPECT_EQ(seg_transform(Tensor::randn({8, 8, 64}, rng), s).shape(), (Shape{32, 32, 5}));
}

TEST(SegTransform, ZeroWeightsGiveZeroLogits) {
  Rng rng(23);
  SegHead s = SegHead::init(8, 3, rng);
  for (auto& [name, t] : s.named()) fill(t, 0.0f);
  for (float v : seg_transform(Tensor::randn({2, 3, 8}, rng), s).data()) EXPECT_EQ(v, 0.0f);
}

TEST(SegTransform, GradCheck) {
  Rng rng(24);
  SegHead s = SegHead::init(4, 3, rng);
  s.up1_bias = Tensor::randn({4}, rng, 0.1f);
  s.up2_bias = Tensor::randn({4}, rng, 0.1f);
  s.cls_bias = Tensor::randn({3}, rng, 0.1f);
  Tensor x = Tensor::randn({2, 2, 4}, rng);
  Tensor proj = Tensor::randn({8, 8, 3}, rng);
  auto loss = [&](const Tensor&) { return project(seg_transform(x, s), proj); };
  EXPECT_LT(grad_check(loss, x, 1e-3f), 1e-3);
  for (auto& [name, t] : s.named()) EXPECT_LT(grad_check(loss, t, 1e-3f), 1e-3) << name;
}

TEST(DetTransform, PyramidShapes) {
  Rng rng(25);
  DetHead d = DetHead::init(8, rng);
  auto out = det_transform(Tensor::randn({8, 8, 8}, rng), d);
  EXPECT_EQ(out[0].shape(), (Shape{32, 32, 8}));
  EXPECT_EQ(out[1].shape(), (Shape{16, 16, 8}));
  EXPECT_EQ(out[2].shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(out[3].shape(), (Shape{4, 4, 8}));
}

TEST(DetTransform, IdentityOneByOneKeepsMap) {
  Rng rng(26);
  const Dim c = 4;
  DetHead d = DetHead::init(c, rng);
  Tensor eye = Tensor::zeros({1, 1, c, c});
  for (Dim i = 0; i < c; ++i) eye.mutable_data()[i * c + i] = 1.0f;
  d.x1_weight = eye;
  Tensor f = Tensor::randn({4, 6, c}, rng);
  EXPECT_TRUE(bit_equal(det_transform(f, d)[2], f));
}

TEST(DetTransform, HalfScalePicksHotPixels) {
  Rng rng(27);
  const Dim c = 2;
  DetHead d = DetHead::init(c, rng);
  Tensor eye = Tensor::zeros({1, 1, c, c});
  for (Dim i = 0; i < c; ++i) eye.mutable_data()[i * c + i] = 1.0f;
  d.x05_weight = eye;
  Tensor f = Tensor::full({4, 4, c}, -1.0f);
  auto fd = f.mutable_data();
  // One hot pixel per 2x2 cell at a different position in each cell.
  const Dim hot[4][2] = {{0, 0}, {1, 3}, {3, 0}, {2, 3}};
  for (int k = 0; k < 4; ++k)
    for (Dim ch = 0; ch < c; ++ch) fd[(hot[k][0] * 4 + hot[k][1]) * c + ch] = static_cast<float>(10 * k + ch + 1);
  Tensor half = det_transform(f, d)[3];
  for (int k = 0; k < 4; ++k) {
    const Dim cy = hot[k][0] / 2, cx = hot[k][1] / 2;
    for (Dim ch = 0; ch < c; ++ch) EXPECT_EQ(half[(cy * 2 + cx) * c + ch], static_cast<float>(10 * k + ch + 1));
  }
}

TEST(DetTransform, OddGridRejected) {
  Rng rng(28);
  DetHead d = DetHead::init(4, rng);
  EXPECT_THROW(det_transform(Tensor::zeros({5, 4, 4}), d), std::invalid_argument);
  EXPECT_THROW(det_transform(Tensor::zeros({4, 3, 4}), d), std::invalid_argument);
}

TEST(SeqTransform, RowMajorRoundTrip) {
  Rng rng(29);
  Tensor f = Tensor::randn({8, 8, 64}, rng);
  Tensor s = seq_transform(f);
  EXPECT_EQ(s.shape(), (Shape{64, 64}));
  EXPECT_TRUE(bit_equal(ops::reshape(s, {8, 8, 64}), f));
  Tensor g = Tensor::randn({3, 5, 2}, rng);
  Tensor t = seq_transform(g);
  for (Dim k = 0; k < 15; ++k)
    for (Dim c = 0; c < 2; ++c) EXPECT_EQ(t[k * 2 + c], g[((k / 5) * 5 + k % 5) * 2 + c]);
}

class AdapterModes : public ::testing::TestWithParam<std::pair<SelectionKind, FusionMode>> {};

TEST_P(AdapterModes, ParameterCountMatchesClosedForm) {
  ViTConfig vit = small_vit();
  AdapterConfig cfg;
  cfg.task_layers = 2;
  cfg.prior_layers = 2;
  cfg.start = 1;
  cfg.selection = GetParam().first;
  cfg.mode = GetParam().second;
  cfg.classes = 5;
  Rng rng(30);
  auto bb = BackboneParams::init(vit, rng);
  auto p = AdapterParams::init(bb, cfg, rng);
  EXPECT_EQ(p.parameter_count(), expected_parameter_count(vit, cfg));
  for (const auto& [name, t] : p.named()) EXPECT_TRUE(t.requires_grad()) << name;
}

TEST_P(AdapterModes, GradientReachesExactlyTheAdapter) {
  ViTConfig vit = small_vit();
  AdapterConfig cfg;
  cfg.task_layers = 2;
  cfg.prior_layers = 2;
  cfg.start = 0;
  cfg.selection = GetParam().first;
  cfg.mode = GetParam().second;
  cfg.classes = 3;
  Rng rng(31);
  auto bb = BackboneParams::init(vit, rng);
  bb.freeze();
  auto p = AdapterParams::init(bb, cfg, rng);
  FeatureStack s = forward_collect(Tensor::uniform({vit.height, vit.width, 3}, rng, 0.0f, 1.0f), bb);
  Tensor logits = adapter_forward(s, p);
  ASSERT_EQ(logits.shape(), (Shape{16, 16, 3}));
  GradGraph g;
  {
    GraphScope scope(g);
    logits = adapter_forward(s, p);
    std::vector<int> labels(16 * 16);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    backward(g, ops::cross_entropy(ops::reshape(logits, {256, 3}), labels));
  }
  for (const auto& [name, t] : bb.named()) EXPECT_FALSE(t.has_grad()) << name;
  for (const auto& [name, t] : p.named()) {
    ASSERT_TRUE(t.has_grad()) << name;
    bool nonzero = false;
    for (float v : t.grad()) nonzero = nonzero || v != 0.0f;
    EXPECT_TRUE(nonzero) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(All, AdapterModes,
                         ::testing::Values(std::pair{SelectionKind::uniform, FusionMode::fusion},
                                           std::pair{SelectionKind::sparse_gate, FusionMode::fusion},
                                           std::pair{SelectionKind::uniform, FusionMode::add},
                                           std::pair{SelectionKind::uniform, FusionMode::task_only}));

TEST(Adapter, ParameterCountForDefaultTinyConfig) {
  // D=64, r=4, K_t=3, K_p=4, C=4, uniform selection with fusion.
  const Dim D = 64;
  const Dim block = 4 * D + 3 * D * D + 3 * D + D * D + D + D * 4 * D + 4 * D + 4 * D * D + D;
  const Dim prior = 4 * D * D + D + 2 * D + 9 * D * 18 + 18 + 9 * D * D + D;
  const Dim fusion = 2 * D * D + D + 2 * D + 9 * D * 18 + 18 + 9 * D * D + D;
  const Dim seg = 2 * (4 * D * D + D) + D * 4 + 4;
  EXPECT_EQ(expected_parameter_count(ViTConfig::tiny(), AdapterConfig{}), 3 * block + prior + fusion + seg);
  Rng rng(32);
  auto bb = BackboneParams::init(ViTConfig::tiny(), rng);
  EXPECT_EQ(AdapterParams::init(bb, AdapterConfig{}, rng).parameter_count(), 3 * block + prior + fusion + seg);
}

TEST(Adapter, ComposedGradCheck) {
  ViTConfig vit = small_vit();
  vit.layers = 3;
  vit.height = 16;
  vit.width = 16;
  vit.dim = 4;
  AdapterConfig cfg;
  cfg.task_layers = 1;
  cfg.prior_layers = 2;
  cfg.start = 0;
  cfg.selection = SelectionKind::sparse_gate;
  cfg.classes = 2;
  Rng rng(33);
  auto bb = BackboneParams::init(vit, rng);
  bb.freeze();
  auto p = AdapterParams::init(bb, cfg, rng);
  p.prior->offset_bias = Tensor::uniform({18}, rng, 0.2f, 0.4f);
  p.fusion->offset_bias = Tensor::uniform({18}, rng, 0.2f, 0.4f);
  FeatureStack s = forward_collect(Tensor::uniform({vit.height, vit.width, 3}, rng, 0.0f, 1.0f), bb);
  Tensor proj = Tensor::randn({8, 8, 2}, rng);
  auto loss = [&](const Tensor&) { return project(adapter_forward(s, p), proj); };
  for (auto& [name, t] : p.named()) {
    // The key bias of a copied block has a structurally zero gradient.
    if (name.find("attn_qkv.bias") != std::string::npos) continue;
    // G gets the straight-through surrogate, not the derivative of the
    // sparsified value; StraightThroughGradientMatchesLeafGraph covers it.
    if (name == "gate.G") continue;
    EXPECT_LT(grad_check(loss, t, 1e-3f), 1e-3) << name;
  }
}

TEST(Adapter, InvalidConfigRejected) {
  ViTConfig vit = small_vit();
  Rng rng(34);
  auto bb = BackboneParams::init(vit, rng);
  AdapterConfig cfg;
  cfg.task_layers = vit.layers;
  EXPECT_THROW(AdapterParams::init(bb, cfg, rng), std::invalid_argument);
  cfg = AdapterConfig{};
  cfg.prior_layers = 3;
  cfg.start = 2;  // only layers 2, 3 remain
  EXPECT_THROW(AdapterParams::init(bb, cfg, rng), std::invalid_argument);
}

TEST(Adapter, CheckpointRoundTrip) {
  ViTConfig vit = small_vit();
  AdapterConfig cfg;
  cfg.task_layers = 2;
  cfg.prior_layers = 3;
  cfg.start = 1;
  cfg.selection = SelectionKind::sparse_gate;
  cfg.classes = 3;
  Rng rng(35);
  auto bb = BackboneParams::init(vit, rng);
  auto p = AdapterParams::init(bb, cfg, rng);
  auto bytes = adapter_to_file(p).serialize();
  auto q = adapter_from_file(TensorFile::parse(bytes), vit);
  EXPECT_EQ(q.cfg.task_layers, 2);
  EXPECT_EQ(q.cfg.prior_layers, 3);
  EXPECT_EQ(q.cfg.selection, SelectionKind::sparse_gate);
  EXPECT_EQ(adapter_to_file(q).serialize(), bytes);
  auto names = p.named();
  EXPECT_EQ(names.front().first, "task.layer0.attn_qkv.weight");
  bool has_gate = false;
  for (const auto& [name, t] : names) has_gate = has_gate || name == "gate.G";
  EXPECT_TRUE(has_gate);
}

TEST(Adapter, CheckpointMissingTensorRejected) {
  ViTConfig vit = small_vit();
  Rng rng(36);
  auto bb = BackboneParams::init(vit, rng);
  AdapterConfig cfg;
  cfg.task_layers = 1;
  cfg.prior_layers = 2;
  auto p = AdapterParams::init(bb, cfg, rng);
  TensorFile partial;
  TensorFile full = adapter_to_file(p);
  for (const auto& e : full.entries())
    if (e.name != "prior.dcn.weight") partial.add(e.name, e.tensor);
  try {
    adapter_from_file(partial, vit);
    FAIL();
  } catch (const VsptError& e) {
    EXPECT_NE(std::string(e.what()).find("prior.dcn.weight"), std::string::npos);
  }
}
