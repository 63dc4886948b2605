#include "splitkit/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "splitkit/ops.hpp"

namespace splitkit {

namespace {

constexpr const char* kConfigName = "adapter.config";

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor trainable(Tensor t) { return t.set_requires_grad(true); }

Tensor xavier(Shape shape, Dim fan_in, Dim fan_out, Rng& rng) {
  const float sd = std::sqrt(2.0f / static_cast<float>(fan_in + fan_out));
  return trainable(Tensor::randn(std::move(shape), rng, sd));
}

Tensor zeros(Shape shape) { return trainable(Tensor::zeros(std::move(shape))); }
Tensor ones(Shape shape) { return trainable(Tensor::full(std::move(shape), 1.0f)); }

void append(NamedTensors& out, const std::string& prefix, const NamedTensors& part) {
  for (const auto& [name, t] : part) out.emplace_back(prefix + name, t);
}

}  // namespace

long round_half_away(double v) { return std::lround(v); }

SelectionPlan uniform_select(int layers, int start, int count) {
  require(count >= 1, "uniform_select: K_p must be at least 1");
  require(layers >= 1, "uniform_select: L must be at least 1");
  require(start >= 0 && start <= layers - 1,
          "uniform_select: start index " + std::to_string(start) + " outside [0, " + std::to_string(layers - 1) + "]");
  require(count <= layers - start, "more samples than available layers: K_p=" + std::to_string(count) + " but only " +
                                       std::to_string(layers - start) + " layers from b=" + std::to_string(start));
  SelectionPlan plan;
  plan.kind = SelectionKind::uniform;
  plan.layers = layers;
  plan.start = start;
  plan.count = count;
  if (count == 1) {
    plan.delta = 0.0;
    plan.indices = {start};
    return plan;
  }
  plan.delta = static_cast<double>(layers - start - 1) / static_cast<double>(count - 1);
  for (int i = 0; i < count; ++i) {
    plan.indices.push_back(start + static_cast<int>(round_half_away(i * plan.delta)));
  }
  return plan;
}

Tensor tokens_to_map(const Tensor& tokens, Dim h, Dim w) {
  require(tokens.rank() == 2 && tokens.dim(0) == h * w + 1,
          "expected " + std::to_string(h * w + 1) + " tokens for a " + std::to_string(h) + "x" + std::to_string(w) +
              " grid, got " + shape_str(tokens.shape()));
  return ops::reshape(ops::slice(tokens, 0, 1, h * w), {h, w, tokens.dim(1)});
}

Tensor gather_prior(const FeatureStack& stack, const SelectionPlan& plan, Dim h, Dim w) {
  require(plan.kind == SelectionKind::uniform, "gather_prior: plan must be a uniform selection");
  require(!plan.indices.empty(), "gather_prior: empty selection");
  std::vector<Tensor> maps;
  for (int i : plan.indices) {
    require(i >= 0 && static_cast<std::size_t>(i) < stack.size(),
            "gather_prior: layer index " + std::to_string(i) + " outside a stack of " + std::to_string(stack.size()));
    maps.push_back(tokens_to_map(stack[i], h, w));
  }
  return ops::concat(maps, 2);
}

GateParams GateParams::init(int layers, int keep, Rng& rng) {
  require(keep >= 1 && keep <= layers, "gate: K_p=" + std::to_string(keep) + " must be in [1, L=" +
                                           std::to_string(layers) + "]");
  GateParams g;
  g.keep = keep;
  g.G = Tensor::randn({layers, keep}, rng, 0.02f);
  for (float& v : g.G.mutable_data()) v += rng.uniform(-1e-4f, 1e-4f);
  g.G.set_requires_grad(true);
  return g;
}

Tensor sparsify_gate(const Tensor& G, int keep) {
  require(G.rank() == 2, "sparsify_gate: G must be [L, K], got " + shape_str(G.shape()));
  const Dim layers = G.dim(0), cols = G.dim(1);
  require(keep >= 1 && keep <= layers,
          "sparsify_gate: cannot keep " + std::to_string(keep) + " of " + std::to_string(layers) + " layers");
  auto g = G.data();
  std::vector<float> out(g.size(), 0.0f);
  std::vector<Dim> order(static_cast<std::size_t>(layers));
  for (Dim j = 0; j < cols; ++j) {
    std::iota(order.begin(), order.end(), Dim{0});
    std::stable_sort(order.begin(), order.end(), [&](Dim a, Dim b) { return g[a * cols + j] > g[b * cols + j]; });
    double mx = g[order[0] * cols + j], z = 0.0;
    for (int r = 0; r < keep; ++r) z += std::exp(g[order[r] * cols + j] - mx);
    for (int r = 0; r < keep; ++r) {
      const Dim i = order[r];
      out[i * cols + j] = static_cast<float>(std::exp(g[i * cols + j] - mx) / z);
    }
  }
  return Tensor::from(G.shape(), std::move(out));
}

Tensor straight_through_gate(const Tensor& G, int keep) {
  // The residual G - stop_gradient(G) is exactly zero, so the value is G_sp
  // while the gradient flows to G unchanged.
  return ops::add(sparsify_gate(G, keep), ops::sub(G, stop_gradient(G)));
}

Tensor mix_layers(const FeatureStack& stack, const Tensor& weights, Dim h, Dim w) {
  const Dim layers = static_cast<Dim>(stack.size());
  require(weights.rank() == 2 && weights.dim(0) == layers,
          "mix_layers: weights must be [" + std::to_string(layers) + ", K], got " + shape_str(weights.shape()));
  require(layers > 0, "mix_layers: empty stack");
  const Dim dim = stack[0].dim(1), slots = weights.dim(1);
  std::vector<Tensor> rows;
  for (const auto& f : stack) rows.push_back(ops::reshape(tokens_to_map(f, h, w), {1, h * w * dim}));
  Tensor all = ops::concat(rows, 0);                                    // [L, hw*D]
  Tensor mixed = ops::matmul(ops::permute(weights, {1, 0}), all);       // [K, hw*D]
  Tensor per_pixel = ops::permute(ops::reshape(mixed, {slots, h * w, dim}), {1, 0, 2});
  return ops::reshape(per_pixel, {h, w, slots * dim});
}

Tensor sparse_gate_forward(const FeatureStack& stack, const GateParams& gate, Dim h, Dim w) {
  const Dim layers = static_cast<Dim>(stack.size());
  require(gate.G.shape() == Shape{layers, gate.keep},
          "sparse_gate_forward: G must be [" + std::to_string(layers) + ", " + std::to_string(gate.keep) + "], got " +
              shape_str(gate.G.shape()));
  require(gate.keep <= layers, "sparse_gate_forward: K_p exceeds L");
  return mix_layers(stack, straight_through_gate(gate.G, gate.keep), h, w);
}

TaskHead task_head_init(const BackboneParams& backbone, int copies) {
  const int layers = backbone.cfg.layers;
  require(copies >= 1 && copies <= layers - 1,
          "task head: K_t=" + std::to_string(copies) + " must be in [1, " + std::to_string(layers - 1) + "]");
  TaskHead head;
  head.heads = backbone.cfg.heads;
  for (int i = layers - copies; i < layers; ++i) {
    BlockParams b = backbone.layers[i].clone();
    for (auto& [name, t] : b.named()) {
      Tensor handle = t;
      handle.set_requires_grad(true);
    }
    head.blocks.push_back(std::move(b));
  }
  return head;
}

Tensor task_head_forward(const Tensor& tokens, const TaskHead& head, Dim h, Dim w) {
  require(tokens.rank() == 2 && tokens.dim(0) == h * w + 1,
          "task head: expected [" + std::to_string(h * w + 1) + ", D] tokens, got " + shape_str(tokens.shape()));
  Tensor x = tokens;
  for (const auto& block : head.blocks) x = transformer_block(x, block, head.heads);
  return tokens_to_map(x, h, w);
}

Tensor deformable_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& offset_weight,
                         const Tensor& offset_bias) {
  require(weight.rank() == 4 && weight.dim(0) == 3 && weight.dim(1) == 3,
          "deformable_conv2d: only 3x3 kernels are supported, got weight " + shape_str(weight.shape()));
  require(offset_weight.rank() == 4 && offset_weight.dim(0) == 3 && offset_weight.dim(1) == 3 &&
              offset_weight.dim(3) == 18,
          "deformable_conv2d: offset weight must be [3,3,Cin,18], got " + shape_str(offset_weight.shape()));
  Tensor offsets = ops::conv2d(x, offset_weight, offset_bias, 1, 1);
  return ops::deform_conv2d(x, offsets, weight, bias);
}

DeformBlock DeformBlock::init(Dim in_channels, Dim dim, Rng& rng) {
  DeformBlock b;
  b.pw_weight = xavier({1, 1, in_channels, dim}, in_channels, dim, rng);
  b.pw_bias = zeros({dim});
  b.norm_weight = ones({dim});
  b.norm_bias = zeros({dim});
  b.offset_weight = zeros({3, 3, dim, 18});
  b.offset_bias = zeros({18});
  b.dcn_weight = xavier({3, 3, dim, dim}, 9 * dim, dim, rng);
  b.dcn_bias = zeros({dim});
  return b;
}

NamedTensors DeformBlock::named() const {
  return {{"pw.weight", pw_weight},         {"pw.bias", pw_bias},         {"norm.weight", norm_weight},
          {"norm.bias", norm_bias},         {"offset.weight", offset_weight}, {"offset.bias", offset_bias},
          {"dcn.weight", dcn_weight},       {"dcn.bias", dcn_bias}};
}

Tensor deform_block_forward(const Tensor& x, const DeformBlock& block) {
  Tensor y = ops::conv2d(x, block.pw_weight, block.pw_bias, 1, 0);
  if (block.norm_act) y = ops::gelu(ops::layer_norm(y, block.norm_weight, block.norm_bias));
  return deformable_conv2d(y, block.dcn_weight, block.dcn_bias, block.offset_weight, block.offset_bias);
}

Tensor prior_head_forward(const Tensor& prior_map, const DeformBlock& block) {
  require(prior_map.rank() == 3 && prior_map.dim(2) == block.in_channels(),
          "prior head: expected " + std::to_string(block.in_channels()) + " input channels, got " +
              shape_str(prior_map.shape()));
  return deform_block_forward(prior_map, block);
}

Tensor fusion_forward(const Tensor& prior, const Tensor& task, const DeformBlock& block) {
  require(prior.rank() == 3 && prior.shape() == task.shape(),
          "fusion: prior " + shape_str(prior.shape()) + " and task " + shape_str(task.shape()) + " must match");
  require(2 * prior.dim(2) == block.in_channels(), "fusion: expected " + std::to_string(block.in_channels() / 2) +
                                                       " channels per branch, got " + std::to_string(prior.dim(2)));
  return deform_block_forward(ops::concat({prior, task}, 2), block);
}

SegHead SegHead::init(Dim dim, Dim classes, Rng& rng) {
  SegHead s;
  s.up1_weight = xavier({dim, 2, 2, dim}, dim, 4 * dim, rng);
  s.up1_bias = zeros({dim});
  s.up2_weight = xavier({dim, 2, 2, dim}, dim, 4 * dim, rng);
  s.up2_bias = zeros({dim});
  s.cls_weight = xavier({1, 1, dim, classes}, dim, classes, rng);
  s.cls_bias = zeros({classes});
  return s;
}

NamedTensors SegHead::named() const {
  return {{"up1.weight", up1_weight}, {"up1.bias", up1_bias}, {"up2.weight", up2_weight},
          {"up2.bias", up2_bias},     {"cls.weight", cls_weight}, {"cls.bias", cls_bias}};
}

Tensor seg_transform(const Tensor& fused, const SegHead& head) {
  require(fused.rank() == 3, "seg head: expected [h, w, D], got " + shape_str(fused.shape()));
  Tensor y = ops::gelu(ops::conv_transpose2d(fused, head.up1_weight, head.up1_bias, 2, 0));
  y = ops::gelu(ops::conv_transpose2d(y, head.up2_weight, head.up2_bias, 2, 0));
  return ops::conv2d(y, head.cls_weight, head.cls_bias, 1, 0);
}

DetHead DetHead::init(Dim dim, Rng& rng) {
  DetHead d;
  d.x4_up1_weight = xavier({dim, 2, 2, dim}, dim, 4 * dim, rng);
  d.x4_up1_bias = zeros({dim});
  d.x4_up2_weight = xavier({dim, 2, 2, dim}, dim, 4 * dim, rng);
  d.x4_up2_bias = zeros({dim});
  d.x2_up_weight = xavier({dim, 2, 2, dim}, dim, 4 * dim, rng);
  d.x2_up_bias = zeros({dim});
  d.x1_weight = xavier({1, 1, dim, dim}, dim, dim, rng);
  d.x1_bias = zeros({dim});
  d.x05_weight = xavier({1, 1, dim, dim}, dim, dim, rng);
  d.x05_bias = zeros({dim});
  return d;
}

NamedTensors DetHead::named() const {
  return {{"x4.up1.weight", x4_up1_weight}, {"x4.up1.bias", x4_up1_bias}, {"x4.up2.weight", x4_up2_weight},
          {"x4.up2.bias", x4_up2_bias},     {"x2.up.weight", x2_up_weight}, {"x2.up.bias", x2_up_bias},
          {"x1.weight", x1_weight},         {"x1.bias", x1_bias},           {"x05.weight", x05_weight},
          {"x05.bias", x05_bias}};
}

std::array<Tensor, 4> det_transform(const Tensor& fused, const DetHead& head) {
  require(fused.rank() == 3, "det head: expected [h, w, D], got " + shape_str(fused.shape()));
  require(fused.dim(0) % 2 == 0 && fused.dim(1) % 2 == 0,
          "det head: the 0.5x scale needs even h and w, got " + shape_str(fused.shape()));
  Tensor x4 = ops::conv_transpose2d(fused, head.x4_up1_weight, head.x4_up1_bias, 2, 0);
  x4 = ops::conv_transpose2d(x4, head.x4_up2_weight, head.x4_up2_bias, 2, 0);
  Tensor x2 = ops::conv_transpose2d(fused, head.x2_up_weight, head.x2_up_bias, 2, 0);
  Tensor x1 = ops::conv2d(fused, head.x1_weight, head.x1_bias, 1, 0);
  Tensor x05 = ops::conv2d(ops::max_pool2x2(fused), head.x05_weight, head.x05_bias, 1, 0);
  return {x4, x2, x1, x05};
}

Tensor seq_transform(const Tensor& fused) {
  require(fused.rank() == 3, "seq transform: expected [h, w, D], got " + shape_str(fused.shape()));
  return ops::reshape(fused, {fused.dim(0) * fused.dim(1), fused.dim(2)});
}

void AdapterConfig::validate(const ViTConfig& vit) const {
  require(task_layers >= 1 && task_layers <= vit.layers - 1,
          "K_t=" + std::to_string(task_layers) + " must be in [1, " + std::to_string(vit.layers - 1) + "]");
  require(classes >= 2, "need at least 2 classes");
  if (mode == FusionMode::task_only) return;
  if (selection == SelectionKind::uniform) {
    uniform_select(vit.layers, start, prior_layers);
  } else {
    require(prior_layers >= 1 && prior_layers <= vit.layers,
            "K_p=" + std::to_string(prior_layers) + " must be in [1, L=" + std::to_string(vit.layers) + "]");
  }
}

AdapterParams AdapterParams::init(const BackboneParams& backbone, const AdapterConfig& cfg, Rng& rng) {
  const ViTConfig& vit = backbone.cfg;
  cfg.validate(vit);
  AdapterParams p;
  p.cfg = cfg;
  p.grid_h = vit.grid_h();
  p.grid_w = vit.grid_w();
  p.task = task_head_init(backbone, cfg.task_layers);
  if (cfg.mode != FusionMode::task_only) {
    p.prior = DeformBlock::init(cfg.prior_layers * vit.dim, vit.dim, rng);
    if (cfg.selection == SelectionKind::sparse_gate) p.gate = GateParams::init(vit.layers, cfg.prior_layers, rng);
  }
  if (cfg.mode == FusionMode::fusion) p.fusion = DeformBlock::init(2 * vit.dim, vit.dim, rng);
  p.seg = SegHead::init(vit.dim, cfg.classes, rng);
  return p;
}

NamedTensors AdapterParams::named() const {
  NamedTensors out;
  for (std::size_t i = 0; i < task.blocks.size(); ++i) {
    append(out, "task.layer" + std::to_string(i) + ".", task.blocks[i].named());
  }
  if (prior) append(out, "prior.", prior->named());
  if (fusion) append(out, "fusion.", fusion->named());
  if (gate) out.emplace_back("gate.G", gate->G);
  append(out, "head.seg.", seg.named());
  return out;
}

std::vector<Tensor> AdapterParams::task_parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : task.blocks)
    for (const auto& [name, t] : b.named()) out.push_back(t);
  return out;
}

std::vector<Tensor> AdapterParams::other_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named()) {
    if (name.rfind("task.", 0) != 0) out.push_back(t);
  }
  return out;
}

Dim AdapterParams::parameter_count() const {
  Dim n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

Dim expected_parameter_count(const ViTConfig& vit, const AdapterConfig& cfg) {
  const Dim d = vit.dim, r = vit.mlp_ratio, c = cfg.classes;
  const Dim block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d);
  const Dim offset = 9 * d * 18 + 18;
  const Dim dcn = 9 * d * d + d;
  Dim total = cfg.task_layers * block;
  total += 2 * (4 * d * d + d) + (d * c + c);
  if (cfg.mode != FusionMode::task_only) {
    total += (cfg.prior_layers * d * d + d) + 2 * d + offset + dcn;
    if (cfg.selection == SelectionKind::sparse_gate) total += static_cast<Dim>(vit.layers) * cfg.prior_layers;
  }
  if (cfg.mode == FusionMode::fusion) total += (2 * d * d + d) + 2 * d + offset + dcn;
  return total;
}

Tensor adapter_fused(const FeatureStack& stack, const AdapterParams& params) {
  const int layers = static_cast<int>(stack.size());
  const AdapterConfig& cfg = params.cfg;
  const Dim h = params.grid_h, w = params.grid_w;
  require(layers > cfg.task_layers, "adapter: stack of " + std::to_string(layers) + " layers is too short for K_t=" +
                                        std::to_string(cfg.task_layers));
  Tensor task = task_head_forward(stack[layers - cfg.task_layers - 1], params.task, h, w);
  if (cfg.mode == FusionMode::task_only) return task;

  Tensor prior_map = cfg.selection == SelectionKind::uniform
                         ? gather_prior(stack, uniform_select(layers, cfg.start, cfg.prior_layers), h, w)
                         : sparse_gate_forward(stack, *params.gate, h, w);
  Tensor prior = prior_head_forward(prior_map, *params.prior);
  if (cfg.mode == FusionMode::add) return ops::add(task, prior);
  return fusion_forward(prior, task, *params.fusion);
}

Tensor adapter_forward(const FeatureStack& stack, const AdapterParams& params) {
  return seg_transform(adapter_fused(stack, params), params.seg);
}

TensorFile adapter_to_file(const AdapterParams& params) {
  const AdapterConfig& c = params.cfg;
  TensorFile file;
  file.add(kConfigName,
           Tensor::from({6}, {static_cast<float>(c.task_layers), static_cast<float>(c.prior_layers),
                              static_cast<float>(c.start), static_cast<float>(static_cast<int>(c.selection)),
                              static_cast<float>(static_cast<int>(c.mode)), static_cast<float>(c.classes)}));
  for (const auto& [name, t] : params.named()) file.add(name, t);
  return file;
}

AdapterParams adapter_from_file(const TensorFile& file, const ViTConfig& vit) {
  const Tensor& meta = file.at(kConfigName);
  if (meta.shape() != Shape{6}) throw VsptError("malformed " + std::string(kConfigName));
  AdapterConfig cfg;
  cfg.task_layers = static_cast<int>(meta[0]);
  cfg.prior_layers = static_cast<int>(meta[1]);
  cfg.start = static_cast<int>(meta[2]);
  const int selection = static_cast<int>(meta[3]), mode = static_cast<int>(meta[4]);
  if (selection < 0 || selection > 1 || mode < 0 || mode > 2) throw VsptError("malformed " + std::string(kConfigName));
  cfg.selection = static_cast<SelectionKind>(selection);
  cfg.mode = static_cast<FusionMode>(mode);
  cfg.classes = static_cast<Dim>(meta[5]);

  // A throwaway backbone of the right geometry provides every expected name
  // and shape.
  Rng rng(0);
  BackboneParams shape_donor = BackboneParams::init(vit, rng);
  AdapterParams p = AdapterParams::init(shape_donor, cfg, rng);
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

}  // namespace splitkit
