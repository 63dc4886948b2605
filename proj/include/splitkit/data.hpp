#pragma once

// Synthetic segmentation scenes: coloured rectangles, discs and triangles on a
// textured noise background.

#include <cstdint>
#include <vector>

#include "splitkit/tensor.hpp"

namespace splitkit {

struct ToySegSample {
  Tensor image;  // [H, W, 3], values in [0, 1]
  Tensor mask;   // [H, W], class ids stored as floats
};

enum class ShapeKind { rectangle, disc, triangle };

/// Class c >= 1 is drawn as kind (c - 1) mod 3; class 0 is background.
ShapeKind kind_of_class(int cls);

struct ShapeSpec {
  int cls = 1;
  float cx = 0, cy = 0;  // centre in pixels
  float size = 0;        // half extent for rectangles and triangles, radius for discs
  float aspect = 1;      // rectangle height / width
  float color[3] = {1, 1, 1};
};

/// Pixel (x, y) is covered when its centre (x + 0.5, y + 0.5) lies inside.
bool shape_covers(const ShapeSpec& s, int x, int y);

/// Paints the shape into image and mask; later shapes overwrite earlier ones.
void render_shape(ToySegSample& sample, const ShapeSpec& s);

std::vector<ToySegSample> make_toy_dataset(int n, int height, int width, int classes, std::uint64_t seed);

/// First 80% for training, last 20% held out.
struct DatasetSplit {
  std::vector<const ToySegSample*> train, held_out;
};
DatasetSplit split_dataset(const std::vector<ToySegSample>& data);

/// Nearest-neighbour resize of an id mask to [h, w]; source index is
/// floor((i + 0.5) * in / out).
std::vector<int> downsample_mask(const Tensor& mask, Dim h, Dim w);

}  // namespace splitkit
