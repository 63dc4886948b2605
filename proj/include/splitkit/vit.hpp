#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "splitkit/tensor.hpp"
#include "splitkit/vspt.hpp"

namespace splitkit {

struct ViTConfig {
  int layers = 12;
  Dim dim = 64;
  int heads = 4;
  Dim patch = 8;
  Dim height = 64;
  Dim width = 64;
  Dim mlp_ratio = 4;

  /// L=12, D=64, 4 heads, 8px patches, 64x64 input, MLP ratio 4.
  static ViTConfig tiny() { return {}; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  Dim grid_h() const { return height / patch; }
  Dim grid_w() const { return width / patch; }
  /// Patch tokens plus the class token.
  Dim tokens() const { return grid_h() * grid_w() + 1; }
  Dim hidden() const { return dim * mlp_ratio; }

  bool operator==(const ViTConfig&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Weights of one pre-norm transformer block. Linear weights are stored
/// [in, out].
struct BlockParams {
  Tensor ln1_weight, ln1_bias;
  Tensor qkv_weight, qkv_bias;  // [D, 3D]; columns are q | k | v, heads contiguous inside each
  Tensor out_weight, out_bias;  // [D, D]
  Tensor ln2_weight, ln2_bias;
  Tensor fc1_weight, fc1_bias;  // [D, rD]
  Tensor fc2_weight, fc2_bias;  // [rD, D]

  static BlockParams init(Dim dim, Dim hidden, Rng& rng);
  /// Names relative to the block, e.g. "attn_qkv.weight".
  NamedTensors named() const;
  BlockParams clone() const;
};

struct BackboneParams {
  ViTConfig cfg;
  Tensor patch_weight;  // [patch, patch, 3, D]
  Tensor patch_bias;    // [D]
  Tensor cls;           // [1, D]
  Tensor pos;           // [tokens, D]
  std::vector<BlockParams> layers;
  bool frozen = false;

  static BackboneParams init(const ViTConfig& cfg, Rng& rng);
  /// Canonical checkpoint names in a fixed order.
  NamedTensors named() const;
  Dim parameter_count() const;

  /// Deep copy with independent storage; frozen flag and requires_grad kept.
  BackboneParams clone() const;
  void freeze();
  void unfreeze();
  /// FNV-1a over every parameter's name, shape and bytes.
  std::uint64_t checksum() const;
};

/// Per-layer outputs, entry i being block i's output of shape [tokens, D]
/// with the class token at row 0.
using FeatureStack = std::vector<Tensor>;

Tensor patch_embed(const Tensor& image, const BackboneParams& params);
Tensor transformer_block(const Tensor& x, const BlockParams& block, int heads);
/// Runs every block. A frozen backbone is evaluated without recording, so no
/// gradient can reach its parameters.
FeatureStack forward_collect(const Tensor& image, const BackboneParams& params);

TensorFile backbone_to_file(const BackboneParams& params);
BackboneParams backbone_from_file(const TensorFile& file);
void save_checkpoint(const BackboneParams& params, const std::filesystem::path& path);
BackboneParams load_checkpoint(const std::filesystem::path& path);

}  // namespace splitkit
