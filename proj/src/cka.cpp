#include "splitkit/cka.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace splitkit {

namespace {

struct Centered {
  Dim rows = 0, cols = 0;
  std::vector<double> data;  // row-major
  double self_norm = 0.0;    // ||Xc^T Xc||_F
  bool zero = true;
};

// X^T Y for row-major [n, a] and [n, b] matrices.
std::vector<double> cross(const Centered& x, const Centered& y) {
  std::vector<double> out(static_cast<std::size_t>(x.cols * y.cols), 0.0);
  for (Dim r = 0; r < x.rows; ++r) {
    const double* xr = &x.data[r * x.cols];
    const double* yr = &y.data[r * y.cols];
    for (Dim i = 0; i < x.cols; ++i) {
      const double xi = xr[i];
      double* o = &out[i * y.cols];
      for (Dim j = 0; j < y.cols; ++j) o[j] += xi * yr[j];
    }
  }
  return out;
}

double frobenius_sq(const std::vector<double>& m) {
  double s = 0.0;
  for (double v : m) s += v * v;
  return s;
}

Centered center(std::span<const float> values, Dim rows, Dim cols) {
  Centered c;
  c.rows = rows;
  c.cols = cols;
  c.data.assign(values.begin(), values.end());
  for (Dim j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (Dim r = 0; r < rows; ++r) mean += c.data[r * cols + j];
    mean /= static_cast<double>(rows);
    for (Dim r = 0; r < rows; ++r) c.data[r * cols + j] -= mean;
  }
  c.zero = std::all_of(c.data.begin(), c.data.end(), [](double v) { return v == 0.0; });
  c.self_norm = std::sqrt(frobenius_sq(cross(c, c)));
  return c;
}

Centered center(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("CKA expects [n, d] feature matrices, got " + shape_str(t.shape()));
  if (t.dim(0) < 2) throw std::invalid_argument("CKA needs at least 2 feature rows, got " + std::to_string(t.dim(0)));
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("CKA input contains a non-finite value");
  }
  return center(t.data(), t.dim(0), t.dim(1));
}

CkaValue cka(const Centered& x, const Centered& y) {
  if (x.zero || y.zero || x.self_norm == 0.0 || y.self_norm == 0.0) return {0.0, true};
  return {frobenius_sq(cross(x, y)) / (x.self_norm * y.self_norm), false};
}

}  // namespace

CkaValue linear_cka(const Tensor& X, const Tensor& Y) {
  if (X.rank() == 2 && Y.rank() == 2 && X.dim(0) != Y.dim(0)) {
    throw std::invalid_argument("CKA row mismatch: " + std::to_string(X.dim(0)) + " vs " + std::to_string(Y.dim(0)));
  }
  return cka(center(X), center(Y));
}

CkaMatrix cka_matrix(std::span<const FeatureStack> batch, bool drop_cls) {
  if (batch.empty()) throw std::invalid_argument("cka_matrix: empty batch");
  const std::size_t layers = batch[0].size();
  if (layers == 0) throw std::invalid_argument("cka_matrix: empty feature stack");
  const Dim skip = drop_cls ? 1 : 0;

  std::vector<Centered> pooled(layers);
  Dim rows = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<float> values;
    Dim cols = -1;
    rows = 0;
    for (const auto& stack : batch) {
      if (stack.size() != layers) throw std::invalid_argument("cka_matrix: stacks differ in layer count");
      const Tensor& t = stack[l];
      if (t.rank() != 2 || t.dim(0) <= skip) {
        throw std::invalid_argument("cka_matrix: bad token matrix " + shape_str(t.shape()));
      }
      if (cols >= 0 && t.dim(1) != cols) throw std::invalid_argument("cka_matrix: channel count differs across images");
      cols = t.dim(1);
      auto d = t.data().subspan(static_cast<std::size_t>(skip * cols));
      values.insert(values.end(), d.begin(), d.end());
      rows += t.dim(0) - skip;
    }
    if (rows < 2) throw std::invalid_argument("cka_matrix: need at least 2 feature rows after pooling");
    for (float v : values) {
      if (!std::isfinite(v)) throw std::invalid_argument("cka_matrix: non-finite feature value");
    }
    pooled[l] = center(values, rows, cols);
  }

  CkaMatrix m;
  m.layers = static_cast<int>(layers);
  m.samples = rows;
  m.values.assign(layers * layers, 0.0);
  const int n = m.layers;
  int degenerate = 0;
#pragma omp parallel for schedule(dynamic) reduction(+ : degenerate)
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      CkaValue v = cka(pooled[i], pooled[j]);
      m.values[static_cast<std::size_t>(i) * n + j] = v.value;
      m.values[static_cast<std::size_t>(j) * n + i] = v.value;
      degenerate += v.degenerate ? 1 : 0;
    }
  }
  m.degenerate_pairs = degenerate;
  return m;
}

double partition_score(const CkaMatrix& m, int split) {
  const int L = m.layers;
  if (split < 1 || split > L - 1) throw std::invalid_argument("split must be in [1, L-1]");
  double within = 0.0, across = 0.0;
  long n_within = 0, n_across = 0;
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      if ((i < split) == (j < split)) {
        within += m.at(i, j);
        ++n_within;
      } else {
        across += m.at(i, j);
        ++n_across;
      }
    }
  }
  return within / static_cast<double>(n_within) - across / static_cast<double>(n_across);
}

// Scores closer than this count as ties, so rounding noise in a flat matrix
// does not move the split away from the smallest index.
constexpr double kTieTolerance = 1e-9;

int partition_layers(const CkaMatrix& m) {
  if (m.layers < 2) throw std::invalid_argument("partition_layers needs at least 2 layers");
  int best = 1;
  double best_score = partition_score(m, 1);
  for (int s = 2; s < m.layers; ++s) {
    const double score = partition_score(m, s);
    if (score > best_score + kTieTolerance) {
      best = s;
      best_score = score;
    }
  }
  return best;
}

std::string cka_to_csv(const CkaMatrix& m) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "layer";
  for (int j = 0; j < m.layers; ++j) out << "," << j;
  out << "\n";
  for (int i = 0; i < m.layers; ++i) {
    out << i;
    for (int j = 0; j < m.layers; ++j) out << "," << m.at(i, j);
    out << "\n";
  }
  return out.str();
}

std::vector<std::uint8_t> cka_to_pgm(const CkaMatrix& m, int cell) {
  if (cell < 1) throw std::invalid_argument("heatmap cell size must be positive");
  const int side = m.layers * cell;
  const std::string header = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double v = std::clamp(m.at(y / cell, x / cell), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

TensorFile features_to_file(std::span<const FeatureStack> batch) {
  if (batch.empty()) throw std::invalid_argument("feature dump: empty batch");
  TensorFile file;
  file.add("dump.shape", Tensor::from({2}, {static_cast<float>(batch.size()), static_cast<float>(batch[0].size())}));
  for (std::size_t k = 0; k < batch.size(); ++k) {
    if (batch[k].size() != batch[0].size()) throw std::invalid_argument("feature dump: stacks differ in layer count");
    for (std::size_t i = 0; i < batch[k].size(); ++i) {
      file.add("image" + std::to_string(k) + ".layer" + std::to_string(i), batch[k][i]);
    }
  }
  return file;
}

std::vector<FeatureStack> features_from_file(const TensorFile& file) {
  const Tensor& meta = file.at("dump.shape");
  if (meta.shape() != Shape{2} || meta[0] < 1 || meta[1] < 1) throw VsptError("malformed dump.shape");
  const auto images = static_cast<std::size_t>(meta[0]), layers = static_cast<std::size_t>(meta[1]);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < images; ++k)
    for (std::size_t i = 0; i < layers; ++i) names.push_back("image" + std::to_string(k) + ".layer" + std::to_string(i));
  file.require(names);
  std::vector<FeatureStack> out(images);
  for (std::size_t k = 0; k < images; ++k)
    for (std::size_t i = 0; i < layers; ++i) out[k].push_back(file.at(names[k * layers + i]));
  return out;
}

}  // namespace splitkit
