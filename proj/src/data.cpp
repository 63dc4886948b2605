#include "splitkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace splitkit {

ShapeKind kind_of_class(int cls) {
  if (cls < 1) throw std::invalid_argument("class 0 is background and has no shape");
  return static_cast<ShapeKind>((cls - 1) % 3);
}

bool shape_covers(const ShapeSpec& s, int x, int y) {
  const float px = static_cast<float>(x) + 0.5f - s.cx;
  const float py = static_cast<float>(y) + 0.5f - s.cy;
  switch (kind_of_class(s.cls)) {
    case ShapeKind::rectangle:
      return std::abs(px) <= s.size && std::abs(py) <= s.size * s.aspect;
    case ShapeKind::disc:
      return px * px + py * py <= s.size * s.size;
    case ShapeKind::triangle: {
      // Upward isosceles triangle: apex at (0, -size), base at y = +size.
      if (py < -s.size || py > s.size) return false;
      const float half_width = 0.5f * (py + s.size);
      return std::abs(px) <= half_width;
    }
  }
  return false;
}

void render_shape(ToySegSample& sample, const ShapeSpec& s) {
  const int h = static_cast<int>(sample.mask.dim(0)), w = static_cast<int>(sample.mask.dim(1));
  auto img = sample.image.mutable_data();
  auto mask = sample.mask.mutable_data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!shape_covers(s, x, y)) continue;
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      mask[p] = static_cast<float>(s.cls);
      for (int c = 0; c < 3; ++c) img[p * 3 + c] = s.color[c];
    }
  }
}

namespace {

ToySegSample make_scene(int height, int width, int classes, Rng& rng) {
  ToySegSample s{Tensor::zeros({height, width, 3}), Tensor::zeros({height, width})};
  // Background: a random base colour, a diagonal stripe texture and pixel noise.
  float base[3];
  for (float& b : base) b = rng.uniform(0.2f, 0.8f);
  const float freq = rng.uniform(0.2f, 0.6f), phase = rng.uniform(0.0f, 2.0f * std::numbers::pi_v<float>);
  auto img = s.image.mutable_data();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const float stripe = 0.1f * std::sin(freq * static_cast<float>(x + y) + phase);
      for (int c = 0; c < 3; ++c) {
        const float v = base[c] + stripe + rng.uniform(-0.08f, 0.08f);
        img[(static_cast<std::size_t>(y) * width + x) * 3 + c] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  const int shapes = 1 + static_cast<int>(rng.next_u64() % 3);
  const float extent = static_cast<float>(std::min(height, width));
  for (int k = 0; k < shapes; ++k) {
    ShapeSpec spec;
    spec.cls = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(classes - 1));
    spec.size = rng.uniform(0.1f, 0.22f) * extent;
    spec.aspect = rng.uniform(0.6f, 1.4f);
    spec.cx = rng.uniform(0.15f, 0.85f) * static_cast<float>(width);
    spec.cy = rng.uniform(0.15f, 0.85f) * static_cast<float>(height);
    for (float& c : spec.color) c = rng.uniform();
    render_shape(s, spec);
  }
  return s;
}

}  // namespace

std::vector<ToySegSample> make_toy_dataset(int n, int height, int width, int classes, std::uint64_t seed) {
  if (n <= 0 || height <= 0 || width <= 0) {
    throw std::invalid_argument("toy dataset: sizes must be positive, got n=" + std::to_string(n) + " " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  if (classes < 2) throw std::invalid_argument("toy dataset: need at least 2 classes");
  Rng rng(seed);
  std::vector<ToySegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_scene(height, width, classes, rng));
  return out;
}

DatasetSplit split_dataset(const std::vector<ToySegSample>& data) {
  if (data.size() < 2) throw std::invalid_argument("dataset split needs at least 2 samples");
  const std::size_t held = std::max<std::size_t>(1, data.size() / 5);
  DatasetSplit s;
  for (std::size_t i = 0; i < data.size(); ++i) (i < data.size() - held ? s.train : s.held_out).push_back(&data[i]);
  return s;
}

std::vector<int> downsample_mask(const Tensor& mask, Dim h, Dim w) {
  if (mask.rank() != 2 || h <= 0 || w <= 0) throw std::invalid_argument("downsample_mask: bad shapes");
  const Dim H = mask.dim(0), W = mask.dim(1);
  std::vector<int> out(static_cast<std::size_t>(h * w));
  for (Dim y = 0; y < h; ++y) {
    const Dim sy = std::min(H - 1, static_cast<Dim>((static_cast<double>(y) + 0.5) * H / h));
    for (Dim x = 0; x < w; ++x) {
      const Dim sx = std::min(W - 1, static_cast<Dim>((static_cast<double>(x) + 0.5) * W / w));
      out[y * w + x] = static_cast<int>(mask[sy * W + sx]);
    }
  }
  return out;
}

}  // namespace splitkit
