#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "splitkit/io.hpp"
#include "splitkit/ops.hpp"
#include "splitkit/vit.hpp"

using namespace splitkit;

namespace {

ViTConfig small_config() {
  ViTConfig c;
  c.layers = 3;
  c.dim = 8;
  c.heads = 2;
  c.patch = 8;
  c.height = 16;
  c.width = 24;
  c.mlp_ratio = 2;
  return c;
}

Tensor random_image(const ViTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({c.height, c.width, 3}, rng, 0.0f, 1.0f);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("splitkit_test_vit_" + name);
}

}  // namespace

TEST(ViTConfig, TinyGeometry) {
  ViTConfig c = ViTConfig::tiny();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.layers, 12);
  EXPECT_EQ(c.dim, 64);
  EXPECT_EQ(c.grid_h(), 8);
  EXPECT_EQ(c.tokens(), 65);
}

TEST(ViTConfig, RejectsInvalidGeometry) {
  ViTConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.height = 20;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.layers = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(PatchEmbed, TokenCountForThirtyTwoPixelImage) {
  ViTConfig c = small_config();
  c.height = c.width = 32;
  Rng rng(1);
  auto p = BackboneParams::init(c, rng);
  EXPECT_EQ(patch_embed(random_image(c, 2), p).shape(), (Shape{17, 8}));
}

TEST(PatchEmbed, ShapeMismatchNamesBothShapes) {
  ViTConfig c = small_config();
  Rng rng(1);
  auto p = BackboneParams::init(c, rng);
  try {
    patch_embed(Tensor::zeros({16, 16, 3}), p);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[16,24,3]"), std::string::npos);
    EXPECT_NE(msg.find("[16,16,3]"), std::string::npos);
  }
}

TEST(PatchEmbed, ZeroImageGivesBiasTokens) {
  ViTConfig c = small_config();
  Rng rng(3);
  auto p = BackboneParams::init(c, rng);
  p.patch_bias = Tensor::uniform({c.dim}, rng, -1.0f, 1.0f);
  p.pos = Tensor::zeros(p.pos.shape());
  Tensor tokens = patch_embed(Tensor::zeros({c.height, c.width, 3}), p);
  for (Dim t = 1; t < c.tokens(); ++t)
    for (Dim d = 0; d < c.dim; ++d) EXPECT_EQ(tokens[t * c.dim + d], p.patch_bias[d]);
  for (Dim d = 0; d < c.dim; ++d) EXPECT_EQ(tokens[d], p.cls[d]);
}

TEST(PatchEmbed, Deterministic) {
  ViTConfig c = small_config();
  Rng r1(5), r2(5);
  auto p1 = BackboneParams::init(c, r1), p2 = BackboneParams::init(c, r2);
  Tensor img = random_image(c, 6);
  EXPECT_TRUE(bit_equal(patch_embed(img, p1), patch_embed(img, p2)));
}

TEST(TransformerBlock, PreservesShape) {
  Rng rng(7);
  auto b = BlockParams::init(8, 16, rng);
  Tensor x = Tensor::randn({5, 8}, rng);
  EXPECT_EQ(transformer_block(x, b, 2).shape(), x.shape());
}

TEST(TransformerBlock, ZeroWeightsGiveIdentity) {
  Rng rng(8);
  auto b = BlockParams::init(8, 16, rng);
  for (auto& [name, t] : b.named()) {
    if (name.rfind("ln", 0) == 0) continue;
    Tensor h = t;
    std::fill(h.mutable_data().begin(), h.mutable_data().end(), 0.0f);
  }
  Tensor x = Tensor::randn({5, 8}, rng);
  EXPECT_TRUE(bit_equal(transformer_block(x, b, 2), x));
}

TEST(TransformerBlock, RejectsIndivisibleHeads) {
  Rng rng(9);
  auto b = BlockParams::init(8, 16, rng);
  EXPECT_THROW(transformer_block(Tensor::randn({5, 8}, rng), b, 3), std::invalid_argument);
}

TEST(TransformerBlock, GradCheckInputsAndWeights) {
  Rng rng(10);
  auto b = BlockParams::init(8, 16, rng);
  // Non-trivial layer-norm affine and biases so every path is exercised.
  b.ln1_weight = Tensor::uniform({8}, rng, 0.5f, 1.5f);
  b.ln2_bias = Tensor::uniform({8}, rng, -0.5f, 0.5f);
  b.qkv_bias = Tensor::uniform({24}, rng, -0.5f, 0.5f);
  Tensor proj = Tensor::randn({5, 8}, rng);
  auto loss = [&](const Tensor& y) { return ops::sum(ops::mul(y, proj)); };
  Tensor x = Tensor::randn({5, 8}, rng);

  EXPECT_LT(grad_check([&](const Tensor& t) { return loss(transformer_block(t, b, 2)); }, x, 1e-3f), 1e-3);
  for (auto& [name, param] : b.named()) {
    if (name == "attn_qkv.bias") continue;
    const double err = grad_check(
        [&](const Tensor&) { return loss(transformer_block(x, b, 2)); }, param, 1e-3f);
    EXPECT_LT(err, 1e-3) << name;
  }

  // The key bias shifts every score of a query by the same amount, which
  // softmax ignores, so its true gradient is exactly zero. Check the query and
  // value slices by finite differences and the key slice for vanishing.
  Tensor full_bias = b.qkv_bias;
  Tensor key_bias = ops::slice(full_bias, 0, 8, 8);
  auto with_bias = [&](const Tensor& q, const Tensor& v) {
    BlockParams bb = b;
    bb.qkv_bias = ops::concat({q, key_bias, v}, 0);
    return loss(transformer_block(x, bb, 2));
  };
  Tensor q_bias = ops::slice(full_bias, 0, 0, 8), v_bias = ops::slice(full_bias, 0, 16, 8);
  EXPECT_LT(grad_check([&](const Tensor& t) { return with_bias(t, v_bias); }, q_bias, 1e-3f), 1e-3);
  EXPECT_LT(grad_check([&](const Tensor& t) { return with_bias(q_bias, t); }, v_bias, 1e-3f), 1e-3);

  GradGraph g;
  GraphScope scope(g);
  Tensor bias = full_bias.clone().set_requires_grad(true);
  BlockParams bb = b;
  bb.qkv_bias = bias;
  backward(g, loss(transformer_block(x, bb, 2)));
  double q_norm = 0.0;
  for (Dim i = 0; i < 8; ++i) q_norm = std::max(q_norm, std::abs(static_cast<double>(bias.grad()[i])));
  for (Dim i = 8; i < 16; ++i) EXPECT_LT(std::abs(bias.grad()[i]), 1e-5 * q_norm) << "key bias " << i - 8;
}

TEST(ForwardCollect, StackHasOneEntryPerLayer) {
  ViTConfig c = small_config();
  Rng rng(11);
  auto p = BackboneParams::init(c, rng);
  FeatureStack s = forward_collect(random_image(c, 12), p);
  ASSERT_EQ(s.size(), 3u);
  for (const auto& f : s) EXPECT_EQ(f.shape(), (Shape{c.tokens(), c.dim}));
}

TEST(ForwardCollect, LastEntryEqualsReplay) {
  ViTConfig c = small_config();
  Rng rng(13);
  auto p = BackboneParams::init(c, rng);
  Tensor img = random_image(c, 14);
  FeatureStack s = forward_collect(img, p);
  Tensor x = patch_embed(img, p);
  for (int i = 0; i < c.layers; ++i) {
    x = transformer_block(x, p.layers[i], c.heads);
    EXPECT_TRUE(bit_equal(x, s[i])) << "layer " << i;
  }
}

TEST(ForwardCollect, FrozenBackboneGetsNoGradient) {
  ViTConfig c = small_config();
  Rng rng(15);
  auto p = BackboneParams::init(c, rng);
  p.unfreeze();
  p.freeze();
  Tensor head = Tensor::randn({c.dim, 2}, rng).set_requires_grad(true);
  GradGraph g;
  GraphScope scope(g);
  FeatureStack s = forward_collect(random_image(c, 16), p);
  for (const auto& f : s) EXPECT_FALSE(f.requires_grad());
  Tensor loss = ops::mean(ops::matmul(ops::add(s[0], s[2]), head));
  backward(g, loss);
  EXPECT_TRUE(head.has_grad());
  for (const auto& [name, t] : p.named()) EXPECT_FALSE(t.has_grad()) << name;
}

TEST(ForwardCollect, UnfrozenBackboneReceivesGradient) {
  ViTConfig c = small_config();
  Rng rng(17);
  auto p = BackboneParams::init(c, rng);
  p.unfreeze();
  GradGraph g;
  GraphScope scope(g);
  FeatureStack s = forward_collect(random_image(c, 18), p);
  backward(g, ops::mean(s.back()));
  for (const auto& [name, t] : p.named()) EXPECT_TRUE(t.has_grad()) << name;
}

TEST(Checkpoint, CanonicalNames) {
  ViTConfig c = small_config();
  Rng rng(19);
  auto p = BackboneParams::init(c, rng);
  TensorFile f = backbone_to_file(p);
  for (const char* name : {"backbone.patch.weight", "backbone.patch.bias", "backbone.cls", "backbone.pos",
                           "backbone.layer0.attn_qkv.weight", "backbone.layer2.mlp_fc2.bias",
                           "backbone.layer1.ln2.weight", "backbone.layer1.attn_out.bias"}) {
    EXPECT_TRUE(f.contains(name)) << name;
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  ViTConfig c = small_config();
  Rng rng(20);
  auto p = BackboneParams::init(c, rng);
  auto a = temp_path("a.vspt"), b = temp_path("b.vspt");
  save_checkpoint(p, a);
  BackboneParams q = load_checkpoint(a);
  save_checkpoint(q, b);
  EXPECT_EQ(read_file(a), read_file(b));
  EXPECT_EQ(q.checksum(), p.checksum());
  EXPECT_EQ(q.cfg, c);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Checkpoint, TruncatedFileRejected) {
  ViTConfig c = small_config();
  Rng rng(21);
  auto bytes = backbone_to_file(BackboneParams::init(c, rng)).serialize();
  for (std::size_t n : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(backbone_from_file(TensorFile::parse(std::span(bytes.data(), n))), VsptError);
  }
}

TEST(Checkpoint, MissingTensorListed) {
  ViTConfig c = small_config();
  Rng rng(22);
  TensorFile full = backbone_to_file(BackboneParams::init(c, rng));
  TensorFile partial;
  for (const auto& e : full.entries()) {
    if (e.name != "backbone.layer1.mlp_fc1.weight") partial.add(e.name, e.tensor);
  }
  try {
    backbone_from_file(partial);
    FAIL();
  } catch (const VsptError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.layer1.mlp_fc1.weight"), std::string::npos);
  }
}

TEST(Checkpoint, ChecksumDetectsSingleBitChange) {
  ViTConfig c = small_config();
  Rng rng(23);
  auto p = BackboneParams::init(c, rng);
  const auto before = p.checksum();
  Tensor w = p.layers[1].fc1_weight;
  auto data = w.mutable_data();
  data[3] = std::nextafter(data[3], 10.0f);
  EXPECT_NE(p.checksum(), before);
}
