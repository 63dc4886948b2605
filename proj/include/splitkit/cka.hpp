#pragma once

// Linear centered kernel alignment between layer features and a two-block
// partition detector over the resulting similarity matrix.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "splitkit/tensor.hpp"
#include "splitkit/vit.hpp"
#include "splitkit/vspt.hpp"

namespace splitkit {

struct CkaValue {
  double value = 0.0;
  bool degenerate = false;  // a centered input was all zero
};

/// ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centered
/// X [n, dx] and Y [n, dy], accumulated in f64.
CkaValue linear_cka(const Tensor& X, const Tensor& Y);

struct CkaMatrix {
  int layers = 0;
  std::vector<double> values;  // row-major L x L
  Dim samples = 0;             // feature rows per layer
  int degenerate_pairs = 0;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * layers + j]; }
};

/// Pools the token rows of every image (class token dropped when drop_cls)
/// into one [n, D] matrix per layer and compares every pair of layers.
CkaMatrix cka_matrix(std::span<const FeatureStack> batch, bool drop_cls = true);

/// Mean within-block minus mean cross-block similarity for blocks [0,s), [s,L).
double partition_score(const CkaMatrix& m, int split);

/// Split in [1, L-1] with the highest partition_score, ties to the smaller s.
int partition_layers(const CkaMatrix& m);

std::string cka_to_csv(const CkaMatrix& m);
/// Binary greyscale PGM, one `cell` x `cell` square per entry, 0 -> black.
std::vector<std::uint8_t> cka_to_pgm(const CkaMatrix& m, int cell = 16);

/// Feature dump: tensors "image{k}.layer{i}" plus a "dump.shape" record.
TensorFile features_to_file(std::span<const FeatureStack> batch);
std::vector<FeatureStack> features_from_file(const TensorFile& file);

}  // namespace splitkit
