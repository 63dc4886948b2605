#include "splitkit/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "splitkit/io.hpp"
#include "splitkit/ops.hpp"

namespace splitkit {

namespace {

constexpr const char* kConfigName = "backbone.config";

Tensor xavier(Shape shape, Dim fan_in, Dim fan_out, Rng& rng) {
  const float sd = std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
  return Tensor::randn(std::move(shape), rng, sd);
}

std::string layer_prefix(std::size_t i) { return "backbone.layer" + std::to_string(i) + "."; }

}  // namespace

void ViTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid ViT config: " + msg); };
  if (layers < 2) fail("need at least 2 layers, got " + std::to_string(layers));
  if (dim <= 0 || heads <= 0 || patch <= 0 || height <= 0 || width <= 0 || mlp_ratio <= 0) {
    fail("all sizes must be positive");
  }
  if (dim % heads != 0) {
    fail("D=" + std::to_string(dim) + " is not divisible by heads=" + std::to_string(heads));
  }
  if (height % patch != 0 || width % patch != 0) {
    fail("image " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by patch " +
         std::to_string(patch));
  }
}

BlockParams BlockParams::init(Dim dim, Dim hidden, Rng& rng) {
  BlockParams b;
  b.ln1_weight = Tensor::full({dim}, 1.0f);
  b.ln1_bias = Tensor::zeros({dim});
  b.qkv_weight = xavier({dim, 3 * dim}, dim, dim, rng);
  b.qkv_bias = Tensor::zeros({3 * dim});
  b.out_weight = xavier({dim, dim}, dim, dim, rng);
  b.out_bias = Tensor::zeros({dim});
  b.ln2_weight = Tensor::full({dim}, 1.0f);
  b.ln2_bias = Tensor::zeros({dim});
  b.fc1_weight = xavier({dim, hidden}, dim, hidden, rng);
  b.fc1_bias = Tensor::zeros({hidden});
  b.fc2_weight = xavier({hidden, dim}, hidden, dim, rng);
  b.fc2_bias = Tensor::zeros({dim});
  return b;
}

NamedTensors BlockParams::named() const {
  return {{"attn_qkv.weight", qkv_weight}, {"attn_qkv.bias", qkv_bias}, {"attn_out.weight", out_weight},
          {"attn_out.bias", out_bias},     {"mlp_fc1.weight", fc1_weight}, {"mlp_fc1.bias", fc1_bias},
          {"mlp_fc2.weight", fc2_weight},  {"mlp_fc2.bias", fc2_bias},     {"ln1.weight", ln1_weight},
          {"ln1.bias", ln1_bias},          {"ln2.weight", ln2_weight},     {"ln2.bias", ln2_bias}};
}

BlockParams BlockParams::clone() const {
  BlockParams b;
  b.ln1_weight = ln1_weight.clone();
  b.ln1_bias = ln1_bias.clone();
  b.qkv_weight = qkv_weight.clone();
  b.qkv_bias = qkv_bias.clone();
  b.out_weight = out_weight.clone();
  b.out_bias = out_bias.clone();
  b.ln2_weight = ln2_weight.clone();
  b.ln2_bias = ln2_bias.clone();
  b.fc1_weight = fc1_weight.clone();
  b.fc1_bias = fc1_bias.clone();
  b.fc2_weight = fc2_weight.clone();
  b.fc2_bias = fc2_bias.clone();
  return b;
}

BackboneParams BackboneParams::init(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneParams p;
  p.cfg = cfg;
  const Dim fan_in = cfg.patch * cfg.patch * 3;
  p.patch_weight = xavier({cfg.patch, cfg.patch, 3, cfg.dim}, fan_in, cfg.dim, rng);
  p.patch_bias = Tensor::zeros({cfg.dim});
  p.cls = Tensor::randn({1, cfg.dim}, rng, 0.02f);
  p.pos = Tensor::randn({cfg.tokens(), cfg.dim}, rng, 0.02f);
  for (int i = 0; i < cfg.layers; ++i) p.layers.push_back(BlockParams::init(cfg.dim, cfg.hidden(), rng));
  return p;
}

NamedTensors BackboneParams::named() const {
  NamedTensors out{{"backbone.patch.weight", patch_weight},
                   {"backbone.patch.bias", patch_bias},
                   {"backbone.cls", cls},
                   {"backbone.pos", pos}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (auto& [name, t] : layers[i].named()) out.emplace_back(layer_prefix(i) + name, t);
  }
  return out;
}

Dim BackboneParams::parameter_count() const {
  Dim n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

BackboneParams BackboneParams::clone() const {
  BackboneParams p;
  p.cfg = cfg;
  p.patch_weight = patch_weight.clone();
  p.patch_bias = patch_bias.clone();
  p.cls = cls.clone();
  p.pos = pos.clone();
  for (const auto& block : layers) p.layers.push_back(block.clone());
  if (frozen) {
    p.freeze();
  } else {
    auto src = named();
    auto dst = p.named();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.set_requires_grad(src[i].second.requires_grad());
  }
  return p;
}

void BackboneParams::freeze() {
  for (auto& [name, t] : named()) {
    Tensor handle = t;
    handle.set_requires_grad(false);
  }
  frozen = true;
}

void BackboneParams::unfreeze() {
  for (auto& [name, t] : named()) {
    Tensor handle = t;
    handle.set_requires_grad(true);
  }
  frozen = false;
}

std::uint64_t BackboneParams::checksum() const {
  Fnv1a64 h;
  for (const auto& [name, t] : named()) {
    h.update(name);
    h.update(shape_str(t.shape()));
    auto data = t.data();
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size_bytes()));
  }
  return h.value();
}

Tensor patch_embed(const Tensor& image, const BackboneParams& params) {
  const ViTConfig& cfg = params.cfg;
  const Shape expected{cfg.height, cfg.width, 3};
  if (image.shape() != expected) {
    throw std::invalid_argument("patch_embed: expected image " + shape_str(expected) + ", got " +
                                shape_str(image.shape()));
  }
  Tensor grid = ops::conv2d(image, params.patch_weight, params.patch_bias, cfg.patch, 0);
  Tensor patches = ops::reshape(grid, {cfg.grid_h() * cfg.grid_w(), cfg.dim});
  Tensor tokens = ops::concat({params.cls, patches}, 0);
  return ops::add(tokens, params.pos);
}

Tensor transformer_block(const Tensor& x, const BlockParams& block, int heads) {
  if (x.rank() != 2) throw std::invalid_argument("transformer_block: expected [tokens, D], got " + shape_str(x.shape()));
  const Dim tokens = x.dim(0), dim = x.dim(1);
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("transformer_block: D=" + std::to_string(dim) + " is not divisible by heads=" +
                                std::to_string(heads));
  }
  const Dim head_dim = dim / heads;

  Tensor h = ops::layer_norm(x, block.ln1_weight, block.ln1_bias);
  Tensor qkv = ops::linear(h, block.qkv_weight, block.qkv_bias);
  // [T, 3D] -> [3*heads, T, head_dim]
  Tensor split = ops::permute(ops::reshape(qkv, {tokens, 3 * heads, head_dim}), {1, 0, 2});
  Tensor q = ops::slice(split, 0, 0, heads);
  Tensor k = ops::slice(split, 0, heads, heads);
  Tensor v = ops::slice(split, 0, 2 * heads, heads);
  Tensor scores = ops::scale(ops::bmm(q, ops::permute(k, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(head_dim)));
  Tensor context = ops::bmm(ops::softmax(scores), v);
  Tensor merged = ops::reshape(ops::permute(context, {1, 0, 2}), {tokens, dim});
  Tensor y = ops::add(x, ops::linear(merged, block.out_weight, block.out_bias));

  Tensor m = ops::layer_norm(y, block.ln2_weight, block.ln2_bias);
  m = ops::gelu(ops::linear(m, block.fc1_weight, block.fc1_bias));
  m = ops::linear(m, block.fc2_weight, block.fc2_bias);
  return ops::add(y, m);
}

FeatureStack forward_collect(const Tensor& image, const BackboneParams& params) {
  std::optional<NoGradGuard> no_grad;
  if (params.frozen) no_grad.emplace();
  FeatureStack stack;
  stack.reserve(params.layers.size());
  Tensor x = patch_embed(image, params);
  for (const auto& block : params.layers) {
    x = transformer_block(x, block, params.cfg.heads);
    stack.push_back(x);
  }
  return stack;
}

TensorFile backbone_to_file(const BackboneParams& params) {
  TensorFile file;
  const ViTConfig& c = params.cfg;
  // Head count cannot be recovered from weight shapes, so the geometry is
  // stored alongside the weights.
  file.add(kConfigName, Tensor::from({7}, {static_cast<float>(c.layers), static_cast<float>(c.dim),
                                           static_cast<float>(c.heads), static_cast<float>(c.patch),
                                           static_cast<float>(c.height), static_cast<float>(c.width),
                                           static_cast<float>(c.mlp_ratio)}));
  for (const auto& [name, t] : params.named()) file.add(name, t);
  return file;
}

BackboneParams backbone_from_file(const TensorFile& file) {
  const Tensor& meta = file.at(kConfigName);
  if (meta.shape() != Shape{7}) throw VsptError("malformed " + std::string(kConfigName));
  ViTConfig cfg;
  cfg.layers = static_cast<int>(meta[0]);
  cfg.dim = static_cast<Dim>(meta[1]);
  cfg.heads = static_cast<int>(meta[2]);
  cfg.patch = static_cast<Dim>(meta[3]);
  cfg.height = static_cast<Dim>(meta[4]);
  cfg.width = static_cast<Dim>(meta[5]);
  cfg.mlp_ratio = static_cast<Dim>(meta[6]);
  cfg.validate();

  // Build a template to learn every expected name and shape.
  Rng rng(0);
  BackboneParams p = BackboneParams::init(cfg, rng);
  NamedTensors expected = p.named();
  std::vector<std::string> names;
  for (const auto& [name, t] : expected) names.push_back(name);
  file.require(names);
  for (auto& [name, t] : expected) {
    const Tensor& src = file.at(name);
    if (src.shape() != t.shape()) {
      throw VsptError("shape mismatch for " + name + ": expected " + shape_str(t.shape()) + ", got " +
                      shape_str(src.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  return p;
}

void save_checkpoint(const BackboneParams& params, const std::filesystem::path& path) {
  backbone_to_file(params).save(path);
}

BackboneParams load_checkpoint(const std::filesystem::path& path) {
  return backbone_from_file(TensorFile::load(path));
}

}  // namespace splitkit
