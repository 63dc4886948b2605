#pragma once

// Split adapter on top of a frozen backbone: a task head copied from the last
// K_t blocks, a prior head over K_p selected layers, a fusion net, and the
// downstream transforms.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "splitkit/tensor.hpp"
#include "splitkit/vit.hpp"
#include "splitkit/vspt.hpp"

namespace splitkit {

/// Rounds to the nearest integer, halves away from zero.
long round_half_away(double v);

enum class SelectionKind { uniform, sparse_gate };

struct SelectionPlan {
  SelectionKind kind = SelectionKind::uniform;
  int layers = 0;
  int start = 0;  // b
  int count = 0;  // K_p
  double delta = 0.0;
  std::vector<int> indices;  // uniform only
};

/// S = {b + round(i * delta)}, delta = (L-b-1)/(K_p-1); K_p = 1 gives {b}.
SelectionPlan uniform_select(int layers, int start, int count);

/// Drops the class token of a [h*w+1, D] token matrix and reshapes to [h, w, D].
Tensor tokens_to_map(const Tensor& tokens, Dim h, Dim w);

/// Class-token-free maps of the selected layers, concatenated along channels
/// in index order: [h, w, K_p*D].
Tensor gather_prior(const FeatureStack& stack, const SelectionPlan& plan, Dim h, Dim w);

struct GateParams {
  Tensor G;  // [L, K_p]
  int keep = 0;

  /// Normal(0, 0.02) plus a small i.i.d. tie-breaking jitter.
  static GateParams init(int layers, int keep, Rng& rng);
};

/// Per column of G keep the `keep` largest entries (ties to the lower index)
/// and softmax over them; all other entries are zero. Not differentiable.
Tensor sparsify_gate(const Tensor& G, int keep);

/// Straight-through gate: value of sparsify_gate(G), gradient passed to G
/// unchanged.
Tensor straight_through_gate(const Tensor& G, int keep);

/// Mixes all L layer maps with the gate weights: slot j is
/// sum_i W[i, j] * map_i, slots concatenated along channels -> [h, w, K*D].
Tensor mix_layers(const FeatureStack& stack, const Tensor& weights, Dim h, Dim w);

Tensor sparse_gate_forward(const FeatureStack& stack, const GateParams& gate, Dim h, Dim w);

struct TaskHead {
  std::vector<BlockParams> blocks;
  int heads = 1;
};

/// Deep copies of blocks L-K_t .. L-1 with requires_grad set.
TaskHead task_head_init(const BackboneParams& backbone, int copies);

/// Runs the copied blocks on the output of block L-K_t-1 (stack[L-K_t-1]),
/// then drops the class token -> [h, w, D].
Tensor task_head_forward(const Tensor& tokens, const TaskHead& head, Dim h, Dim w);

/// 3x3 deformable convolution whose offsets come from a standard 3x3 conv of
/// the same input.
Tensor deformable_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& offset_weight,
                         const Tensor& offset_bias);

/// 1x1 conv -> (LayerNorm over channels -> GELU) -> 3x3 deformable conv.
struct DeformBlock {
  Tensor pw_weight, pw_bias;          // [1, 1, Cin, D], [D]
  Tensor norm_weight, norm_bias;      // [D]
  Tensor offset_weight, offset_bias;  // [3, 3, D, 18], [18], zero at init
  Tensor dcn_weight, dcn_bias;        // [3, 3, D, D], [D]
  bool norm_act = true;

  static DeformBlock init(Dim in_channels, Dim dim, Rng& rng);
  Dim in_channels() const { return pw_weight.dim(2); }
  /// Names relative to the block, e.g. "pw.weight".
  NamedTensors named() const;
};

Tensor deform_block_forward(const Tensor& x, const DeformBlock& block);
Tensor prior_head_forward(const Tensor& prior_map, const DeformBlock& block);
Tensor fusion_forward(const Tensor& prior, const Tensor& task, const DeformBlock& block);

/// Two stride-2 transposed convs (each followed by GELU) and a 1x1 classifier.
struct SegHead {
  Tensor up1_weight, up1_bias;  // [D, 2, 2, D]
  Tensor up2_weight, up2_bias;
  Tensor cls_weight, cls_bias;  // [1, 1, D, C]

  static SegHead init(Dim dim, Dim classes, Rng& rng);
  Dim classes() const { return cls_weight.dim(3); }
  NamedTensors named() const;
};

/// [h, w, D] -> [4h, 4w, C]
Tensor seg_transform(const Tensor& fused, const SegHead& head);

struct DetHead {
  Tensor x4_up1_weight, x4_up1_bias, x4_up2_weight, x4_up2_bias;
  Tensor x2_up_weight, x2_up_bias;
  Tensor x1_weight, x1_bias;
  Tensor x05_weight, x05_bias;

  static DetHead init(Dim dim, Rng& rng);
  NamedTensors named() const;
};

/// Scales 4x, 2x, 1x and 0.5x of the fused map, all with D channels.
std::array<Tensor, 4> det_transform(const Tensor& fused, const DetHead& head);

/// [h, w, D] -> [h*w, D], row-major over the grid.
Tensor seq_transform(const Tensor& fused);

/// How the task and prior branches are combined ahead of the head.
enum class FusionMode {
  task_only,  // f'_t only
  add,        // f'_t + f'_p
  fusion,     // fusion net over [f'_p ; f'_t]
};

struct AdapterConfig {
  int task_layers = 3;   // K_t
  int prior_layers = 4;  // K_p
  int start = 2;         // b
  SelectionKind selection = SelectionKind::uniform;
  FusionMode mode = FusionMode::fusion;
  Dim classes = 4;

  void validate(const ViTConfig& vit) const;
};

struct AdapterParams {
  AdapterConfig cfg;
  Dim grid_h = 0, grid_w = 0;
  TaskHead task;
  std::optional<DeformBlock> prior;
  std::optional<DeformBlock> fusion;
  std::optional<GateParams> gate;
  SegHead seg;

  static AdapterParams init(const BackboneParams& backbone, const AdapterConfig& cfg, Rng& rng);
  /// Checkpoint names, e.g. task.layer0.attn_qkv.weight, prior.dcn.weight,
  /// gate.G, head.seg.up1.weight.
  NamedTensors named() const;
  /// Tensors of the copied blocks; they train at a reduced learning rate.
  std::vector<Tensor> task_parameters() const;
  std::vector<Tensor> other_parameters() const;
  Dim parameter_count() const;
};

/// Trainable-parameter count from the architecture alone.
Dim expected_parameter_count(const ViTConfig& vit, const AdapterConfig& cfg);

/// Full pipeline from a backbone feature stack to the fused map [h, w, D].
Tensor adapter_fused(const FeatureStack& stack, const AdapterParams& params);
/// Fused map followed by the segmentation head: [4h, 4w, C].
Tensor adapter_forward(const FeatureStack& stack, const AdapterParams& params);

TensorFile adapter_to_file(const AdapterParams& params);
AdapterParams adapter_from_file(const TensorFile& file, const ViTConfig& vit);

}  // namespace splitkit
