#include "splitkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <type_traits>

#include "kernels_generic.hpp"

namespace splitkit::ops {

namespace k = kernels::parallel;

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor make(Shape shape, std::vector<float> values) { return Tensor::from(std::move(shape), std::move(values)); }

void record(std::vector<ImplPtr> inputs, Tensor& out, GradGraph::BackwardFn fn) {
  out.impl()->requires_grad = true;
  GradGraph::current().record(std::move(inputs), out, std::move(fn));
}

bool wants(const ImplPtr& node) { return node && node->requires_grad; }

std::vector<float>& grad_buffer(TensorImpl& node) {
  if (!node.grad) node.grad.emplace(node.storage->size(), 0.0f);
  return *node.grad;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool is_scalar(const Tensor& t) { return t.shape().empty(); }

// Forward passes are written once over the element type T. Normal calls use
// T = float and the parallel kernels; under WideEvalGuard they run with
// T = double on the serial kernels and the result becomes the output's shadow.
template <class T>
using Buf = std::shared_ptr<const std::vector<T>>;

using F32 = std::type_identity<float>;
using F64 = std::type_identity<double>;

template <class T>
Buf<T> values(const Tensor& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t.impl()->storage;
  } else {
    if (t.impl()->wide) return t.impl()->wide;
    return std::make_shared<const std::vector<double>>(t.data().begin(), t.data().end());
  }
}

Tensor emit(Shape shape, std::vector<float> v) { return make(std::move(shape), std::move(v)); }

Tensor emit(Shape shape, std::vector<double> v) {
  Tensor y = make(std::move(shape), std::vector<float>(v.begin(), v.end()));
  y.impl()->wide = std::make_shared<const std::vector<double>>(std::move(v));
  return y;
}

template <class T>
void gemm(bool ta, bool tb, Dim m, Dim n, Dim kk, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  if constexpr (std::is_same_v<T, float>) k::gemm(ta, tb, m, n, kk, a, b, c, accumulate);
  else kernels::generic::gemm<T>(ta, tb, m, n, kk, a, b, c, accumulate);
}

template <class T>
void im2col(const kernels::ConvGeometry& g, std::span<const T> image, std::span<T> cols) {
  if constexpr (std::is_same_v<T, float>) k::im2col(g, image, cols);
  else kernels::generic::im2col<T>(g, image, cols);
}

template <class T>
void col2im(const kernels::ConvGeometry& g, std::span<const T> cols, std::span<T> image) {
  if constexpr (std::is_same_v<T, float>) k::col2im(g, cols, image);
  else kernels::generic::col2im<T>(g, cols, image);
}

template <class T>
void deform_im2col(const kernels::DeformGeometry& g, std::span<const T> image, std::span<const T> offsets,
                   std::span<T> cols) {
  if constexpr (std::is_same_v<T, float>) k::deform_im2col(g, image, offsets, cols);
  else kernels::generic::deform_im2col<T>(g, image, offsets, cols);
}

// Fills every row of a rows x cols buffer with the bias (or zeros).
template <class T>
std::vector<T> bias_rows(const Tensor& bias, Dim rows, Dim cols) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols), T(0));
  if (bias.defined()) {
    auto bv = values<T>(bias);
    for (Dim r = 0; r < rows; ++r) std::copy(bv->begin(), bv->end(), out.begin() + r * cols);
  }
  return out;
}

// Shared driver for the elementwise binary ops with scalar broadcasting.
template <class Fwd, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const bool a_bcast = is_scalar(a) && !is_scalar(b);
  const bool b_bcast = is_scalar(b) && !is_scalar(a);
  require(a_bcast || b_bcast || a.shape() == b.shape(),
          std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape shape = a_bcast ? b.shape() : a.shape();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  auto run = [&]<class T>(std::type_identity<T>) {
    auto av = values<T>(a), bv = values<T>(b);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd((*av)[a_bcast ? 0 : i], (*bv)[b_bcast ? 0 : i]);
    return out;
  };
  if (wide_eval_enabled()) return emit(shape, run(F64{}));
  Tensor y = emit(shape, run(F32{}));
  if (needs_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    record({pa, pb}, y, [pa, pb, a_bcast, b_bcast, n, da, db](std::span<const float> g) {
      const auto& A = *pa->storage;
      const auto& B = *pb->storage;
      if (wants(pa)) {
        auto& ga = grad_buffer(*pa);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const float d = g[i] * da(A[a_bcast ? 0 : i], B[b_bcast ? 0 : i]);
          if (a_bcast) acc += d; else ga[i] += d;
        }
        if (a_bcast) ga[0] += static_cast<float>(acc);
      }
      if (wants(pb)) {
        auto& gb = grad_buffer(*pb);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const float d = g[i] * db(A[a_bcast ? 0 : i], B[b_bcast ? 0 : i]);
          if (b_bcast) acc += d; else gb[i] += d;
        }
        if (b_bcast) gb[0] += static_cast<float>(acc);
      }
    });
  }
  return y;
}

// Rows x cols view of a tensor reduced over its last axis.
std::pair<Dim, Dim> rows_cols(const Tensor& x) {
  require(x.rank() >= 1, "expected rank >= 1, got a scalar");
  const Dim cols = x.shape().back();
  return {cols == 0 ? 0 : x.numel() / cols, cols};
}

std::vector<float> column_sums(std::span<const float> g, Dim rows, Dim cols) {
  std::vector<double> acc(static_cast<std::size_t>(cols), 0.0);
  for (Dim r = 0; r < rows; ++r)
    for (Dim c = 0; c < cols; ++c) acc[c] += g[r * cols + c];
  return {acc.begin(), acc.end()};
}

void add_to(std::vector<float>& dst, std::span<const float> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

Dim prod(const Shape& s, std::size_t from, std::size_t to) {
  Dim p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](auto x, auto y) { return x + y; }, [](float, float) { return 1.0f; },
                [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](auto x, auto y) { return x - y; }, [](float, float) { return 1.0f; },
                [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](auto x, auto y) { return x * y; }, [](float, float y) { return y; },
                [](float x, float) { return x; });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "mul_scalar: expected a single-element factor, got " + shape_str(s.shape()));
  return mul(x, s.rank() == 0 ? s : reshape(s, {}));
}

Tensor scale(const Tensor& x, float s) {
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x);
    std::vector<T> out(xv->begin(), xv->end());
    for (T& v : out) v *= static_cast<T>(s);
    return out;
  };
  if (wide_eval_enabled()) return emit(x.shape(), run(F64{}));
  Tensor y = emit(x.shape(), run(F32{}));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px, s](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * g[i];
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x);
    std::vector<T> out(xv->begin(), xv->end());
    const T r = std::is_same_v<T, float> ? T(kInvSqrt2) : T(0.70710678118654752440);
    for (T& v : out) v = T(0.5) * v * (T(1) + std::erf(v * r));
    return out;
  };
  if (wide_eval_enabled()) return emit(x.shape(), run(F64{}));
  Tensor y = emit(x.shape(), run(F32{}));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px](std::span<const float> g) {
      constexpr float kInvSqrt2Pi = 0.39894228040143268f;
      const auto& X = *px->storage;
      auto& gx = grad_buffer(*px);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const float v = X[i];
        const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  if (wide_eval_enabled()) {
    auto xv = values<double>(x);
    double acc = 0.0;
    for (double v : *xv) acc += v;
    return emit({}, std::vector<double>{acc});
  }
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor y = Tensor::scalar(static_cast<float>(acc));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      for (float& v : gx) v += g[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of an empty tensor");
  const double n = static_cast<double>(x.numel());
  if (wide_eval_enabled()) {
    auto xv = values<double>(x);
    double acc = 0.0;
    for (double v : *xv) acc += v;
    return emit({}, std::vector<double>{acc / n});
  }
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor y = Tensor::scalar(static_cast<float>(acc / n));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px, n](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      const float d = static_cast<float>(g[0] / n);
      for (float& v : gx) v += d;
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor y = x.view_as(std::move(shape));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px](std::span<const float> g) { add_to(grad_buffer(*px), g); });
  }
  return y;
}

Tensor permute(const Tensor& x, std::vector<int> axes) {
  const std::size_t rank = x.rank();
  require(axes.size() == rank, "permute: expected " + std::to_string(rank) + " axes");
  std::vector<bool> seen(rank, false);
  for (int a : axes) {
    require(a >= 0 && static_cast<std::size_t>(a) < rank && !seen[a], "permute: axes must be a permutation");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(rank);
  std::vector<Dim> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in[axes[i]];

  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<Dim> source(n);
  std::vector<Dim> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    Dim off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_stride[axes[i]];
    source[flat] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = (*xv)[source[i]];
    return out;
  };
  if (wide_eval_enabled()) return emit(out_shape, run(F64{}));
  Tensor y = emit(out_shape, run(F32{}));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px, source = std::move(source)](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      for (std::size_t i = 0; i < source.size(); ++i) gx[source[i]] += g[i];
    });
  }
  return y;
}

Tensor slice(const Tensor& x, int axis, Dim start, Dim length) {
  axis = normalize_axis(axis, x.rank());
  const Shape& in = x.shape();
  require(start >= 0 && length >= 0 && start + length <= in[axis],
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of bounds for " +
              shape_str(in) + " axis " + std::to_string(axis));
  const Dim outer = prod(in, 0, axis), inner = prod(in, axis + 1, in.size());
  Shape out_shape = in;
  out_shape[axis] = length;
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x);
    std::vector<T> out(static_cast<std::size_t>(outer * length * inner));
    for (Dim o = 0; o < outer; ++o) {
      std::copy_n(xv->begin() + (o * in[axis] + start) * inner, length * inner, out.begin() + o * length * inner);
    }
    return out;
  };
  if (wide_eval_enabled()) return emit(out_shape, run(F64{}));
  Tensor y = emit(out_shape, run(F32{}));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    const Dim extent = in[axis];
    record({px}, y, [px, outer, inner, extent, start, length](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      for (Dim o = 0; o < outer; ++o)
        for (Dim i = 0; i < length * inner; ++i) gx[(o * extent + start) * inner + i] += g[o * length * inner + i];
    });
  }
  return y;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  axis = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    require(s.size() == out_shape.size(), "concat: rank mismatch");
    out_shape[axis] += s[axis];
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(static_cast<int>(i) == axis || s[i] == parts[0].shape()[i],
              "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
  }
  const Dim outer = prod(out_shape, 0, axis), inner = prod(out_shape, axis + 1, out_shape.size());
  const Dim total = out_shape[axis];
  std::vector<Dim> begins;
  Dim at = 0;
  for (const Tensor& p : parts) {
    begins.push_back(at);
    at += p.shape()[axis];
  }
  auto run = [&]<class T>(std::type_identity<T>) {
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Dim ext = parts[k].shape()[axis];
      auto pv = values<T>(parts[k]);
      for (Dim o = 0; o < outer; ++o)
        std::copy_n(pv->begin() + o * ext * inner, ext * inner, out.begin() + (o * total + begins[k]) * inner);
    }
    return out;
  };
  if (wide_eval_enabled()) return emit(out_shape, run(F64{}));
  Tensor y = emit(out_shape, run(F32{}));
  bool any = false;
  for (const Tensor& p : parts) any = any || needs_grad({&p});
  if (any) {
    std::vector<ImplPtr> nodes;
    std::vector<Dim> extents;
    for (const Tensor& p : parts) {
      nodes.push_back(p.impl());
      extents.push_back(p.shape()[axis]);
    }
    record(nodes, y, [nodes, extents, begins, outer, inner, total](std::span<const float> g) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!wants(nodes[k])) continue;
        auto& gp = grad_buffer(*nodes[k]);
        const Dim ext = extents[k];
        for (Dim o = 0; o < outer; ++o)
          for (Dim i = 0; i < ext * inner; ++i) gp[o * ext * inner + i] += g[(o * total + begins[k]) * inner + i];
      }
    });
  }
  return y;
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Dim m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  auto run = [&]<class T>(std::type_identity<T>) {
    auto av = values<T>(a), bv = values<T>(b);
    std::vector<T> out(static_cast<std::size_t>(m * n));
    gemm<T>(false, false, m, n, kk, *av, *bv, out, false);
    return out;
  };
  if (wide_eval_enabled()) return emit({m, n}, run(F64{}));
  Tensor y = emit({m, n}, run(F32{}));
  if (needs_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    record({pa, pb}, y, [pa, pb, m, n, kk](std::span<const float> g) {
      if (wants(pa)) k::gemm(false, true, m, kk, n, g, *pb->storage, grad_buffer(*pa), true);
      if (wants(pb)) k::gemm(true, false, kk, n, m, *pa->storage, g, grad_buffer(*pb), true);
    });
  }
  return y;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Dim batch = a.dim(0), m = a.dim(1), kk = a.dim(2), n = b.dim(2);
  auto run = [&]<class T>(std::type_identity<T>) {
    auto ab = values<T>(a), bb = values<T>(b);
    std::span<const T> av(*ab), bv(*bb);
    std::vector<T> out(static_cast<std::size_t>(batch * m * n));
    std::span<T> ov(out);
    for (Dim i = 0; i < batch; ++i) {
      gemm<T>(false, false, m, n, kk, av.subspan(i * m * kk, m * kk), bv.subspan(i * kk * n, kk * n),
              ov.subspan(i * m * n, m * n), false);
    }
    return out;
  };
  if (wide_eval_enabled()) return emit({batch, m, n}, run(F64{}));
  Tensor y = emit({batch, m, n}, run(F32{}));
  if (needs_grad({&a, &b})) {
    ImplPtr pa = a.impl(), pb = b.impl();
    record({pa, pb}, y, [pa, pb, batch, m, n, kk](std::span<const float> g) {
      std::span<const float> A(*pa->storage), B(*pb->storage);
      if (wants(pa)) {
        std::span<float> ga(grad_buffer(*pa));
        for (Dim i = 0; i < batch; ++i)
          k::gemm(false, true, m, kk, n, g.subspan(i * m * n, m * n), B.subspan(i * kk * n, kk * n),
                  ga.subspan(i * m * kk, m * kk), true);
      }
      if (wants(pb)) {
        std::span<float> gb(grad_buffer(*pb));
        for (Dim i = 0; i < batch; ++i)
          k::gemm(true, false, kk, n, m, A.subspan(i * m * kk, m * kk), g.subspan(i * m * n, m * n),
                  gb.subspan(i * kk * n, kk * n), true);
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(0),
          "linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const Dim rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  require(!bias.defined() || bias.shape() == Shape{out_dim}, "linear: bias must have shape [" + std::to_string(out_dim) + "]");
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x), wv = values<T>(weight);
    std::vector<T> out = bias_rows<T>(bias, rows, out_dim);
    gemm<T>(false, false, rows, out_dim, in, *xv, *wv, out, true);
    return out;
  };
  if (wide_eval_enabled()) return emit({rows, out_dim}, run(F64{}));
  Tensor y = emit({rows, out_dim}, run(F32{}));
  if (needs_grad({&x, &weight, &bias})) {
    ImplPtr px = x.impl(), pw = weight.impl(), pb = bias.defined() ? bias.impl() : nullptr;
    record({px, pw, pb}, y, [px, pw, pb, rows, in, out_dim](std::span<const float> g) {
      if (wants(px)) k::gemm(false, true, rows, in, out_dim, g, *pw->storage, grad_buffer(*px), true);
      if (wants(pw)) k::gemm(true, false, in, out_dim, rows, *px->storage, g, grad_buffer(*pw), true);
      if (wants(pb)) add_to(grad_buffer(*pb), column_sums(g, rows, out_dim));
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const auto [rows, cols] = rows_cols(x);
  require(gamma.shape() == Shape{cols} && beta.shape() == Shape{cols},
          "layer_norm: affine parameters must have shape [" + std::to_string(cols) + "]");
  if (wide_eval_enabled()) {
    auto xv = values<double>(x), gv = values<double>(gamma), bv = values<double>(beta);
    std::vector<double> out(xv->size());
    for (Dim r = 0; r < rows; ++r) {
      const double* row = xv->data() + r * cols;
      double mu = 0.0, var = 0.0;
      for (Dim c = 0; c < cols; ++c) mu += row[c];
      mu /= static_cast<double>(cols);
      for (Dim c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
      var /= static_cast<double>(cols);
      const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
      for (Dim c = 0; c < cols; ++c) out[r * cols + c] = (row[c] - mu) * rs * (*gv)[c] + (*bv)[c];
    }
    return emit(x.shape(), std::move(out));
  }
  auto xv = x.data();
  auto gv = gamma.data(), bv = beta.data();
  std::vector<float> out(xv.size()), xhat(xv.size()), rstd(static_cast<std::size_t>(rows));
  for (Dim r = 0; r < rows; ++r) {
    double mu = 0.0, var = 0.0;
    for (Dim c = 0; c < cols; ++c) mu += xv[r * cols + c];
    mu /= static_cast<double>(cols);
    for (Dim c = 0; c < cols; ++c) {
      const double d = xv[r * cols + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<float>(rs);
    for (Dim c = 0; c < cols; ++c) {
      const float h = static_cast<float>((xv[r * cols + c] - mu) * rs);
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  Tensor y = make(x.shape(), std::move(out));
  if (needs_grad({&x, &gamma, &beta})) {
    ImplPtr px = x.impl(), pg = gamma.impl(), pb = beta.impl();
    record({px, pg, pb}, y,
           [px, pg, pb, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const float> g) {
             const auto& G = *pg->storage;
             if (wants(pg) || wants(pb)) {
               std::vector<double> dg(cols, 0.0), db(cols, 0.0);
               for (Dim r = 0; r < rows; ++r)
                 for (Dim c = 0; c < cols; ++c) {
                   dg[c] += static_cast<double>(g[r * cols + c]) * xhat[r * cols + c];
                   db[c] += g[r * cols + c];
                 }
               if (wants(pg)) {
                 auto& gg = grad_buffer(*pg);
                 for (Dim c = 0; c < cols; ++c) gg[c] += static_cast<float>(dg[c]);
               }
               if (wants(pb)) {
                 auto& gb = grad_buffer(*pb);
                 for (Dim c = 0; c < cols; ++c) gb[c] += static_cast<float>(db[c]);
               }
             }
             if (wants(px)) {
               auto& gx = grad_buffer(*px);
               for (Dim r = 0; r < rows; ++r) {
                 double m1 = 0.0, m2 = 0.0;
                 for (Dim c = 0; c < cols; ++c) {
                   const double gy = static_cast<double>(g[r * cols + c]) * G[c];
                   m1 += gy;
                   m2 += gy * xhat[r * cols + c];
                 }
                 m1 /= static_cast<double>(cols);
                 m2 /= static_cast<double>(cols);
                 for (Dim c = 0; c < cols; ++c) {
                   const double gy = static_cast<double>(g[r * cols + c]) * G[c];
                   gx[r * cols + c] += static_cast<float>(rstd[r] * (gy - m1 - xhat[r * cols + c] * m2));
                 }
               }
             }
           });
  }
  return y;
}

Tensor softmax(const Tensor& x) {
  const auto [rows, cols] = rows_cols(x);
  if (wide_eval_enabled()) {
    auto xv = values<double>(x);
    std::vector<double> out(xv->size());
    for (Dim r = 0; r < rows; ++r) {
      const double* row = xv->data() + r * cols;
      const double mx = *std::max_element(row, row + cols);
      double z = 0.0;
      for (Dim c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
      for (Dim c = 0; c < cols; ++c) out[r * cols + c] = std::exp(row[c] - mx) / z;
    }
    return emit(x.shape(), std::move(out));
  }
  auto xv = x.data();
  std::vector<float> out(xv.size());
  for (Dim r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * cols;
    const float mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (Dim c = 0; c < cols; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    for (Dim c = 0; c < cols; ++c) out[r * cols + c] = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z);
  }
  Tensor y = make(x.shape(), std::move(out));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl(), py = y.impl();
    // Keep only the output values; holding the output node would make it own itself.
    auto yvals = py->storage;
    record({px}, y, [px, yvals, rows, cols](std::span<const float> g) {
      const auto& Y = *yvals;
      auto& gx = grad_buffer(*px);
      for (Dim r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (Dim c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * Y[r * cols + c];
        for (Dim c = 0; c < cols; ++c)
          gx[r * cols + c] += static_cast<float>(Y[r * cols + c] * (g[r * cols + c] - dot));
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Dim stride, Dim pad) {
  require(x.rank() == 3, "conv2d: input must be HWC, got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == x.dim(2),
          "conv2d: weight " + shape_str(weight.shape()) + " does not match input channels " + std::to_string(x.dim(2)));
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(1), stride, pad};
  require(geo.out_h() > 0 && geo.out_w() > 0, "conv2d: kernel larger than padded input");
  const Dim cout = weight.dim(3);
  require(!bias.defined() || bias.shape() == Shape{cout}, "conv2d: bias must have shape [" + std::to_string(cout) + "]");
  const Dim pixels = geo.out_h() * geo.out_w();
  const Shape out_shape{geo.out_h(), geo.out_w(), cout};
  auto run = [&]<class T>(std::type_identity<T>, std::vector<T>& cols) {
    auto xv = values<T>(x), wv = values<T>(weight);
    cols.assign(static_cast<std::size_t>(pixels * geo.col_width()), T(0));
    im2col<T>(geo, *xv, cols);
    std::vector<T> out = bias_rows<T>(bias, pixels, cout);
    gemm<T>(false, false, pixels, cout, geo.col_width(), cols, *wv, out, true);
    return out;
  };
  if (wide_eval_enabled()) {
    std::vector<double> scratch;
    return emit(out_shape, run(F64{}, scratch));
  }
  std::vector<float> cols;
  Tensor y = emit(out_shape, run(F32{}, cols));
  if (needs_grad({&x, &weight, &bias})) {
    ImplPtr px = x.impl(), pw = weight.impl(), pb = bias.defined() ? bias.impl() : nullptr;
    record({px, pw, pb}, y, [px, pw, pb, geo, pixels, cout, cols = std::move(cols)](std::span<const float> g) {
      const Dim cw = geo.col_width();
      if (wants(pw)) k::gemm(true, false, cw, cout, pixels, cols, g, grad_buffer(*pw), true);
      if (wants(pb)) add_to(grad_buffer(*pb), column_sums(g, pixels, cout));
      if (wants(px)) {
        std::vector<float> dcols(static_cast<std::size_t>(pixels * cw));
        k::gemm(false, true, pixels, cw, cout, g, *pw->storage, dcols, false);
        k::col2im(geo, dcols, grad_buffer(*px));
      }
    });
  }
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Dim stride, Dim pad) {
  require(x.rank() == 3, "conv_transpose2d: input must be HWC, got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(0) == x.dim(2),
          "conv_transpose2d: weight " + shape_str(weight.shape()) + " does not match input channels " +
              std::to_string(x.dim(2)));
  require(stride >= 1 && pad >= 0, "conv_transpose2d: stride must be >= 1 and pad >= 0");
  const Dim h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const Dim kh = weight.dim(1), kw = weight.dim(2), cout = weight.dim(3);
  const Dim oh = (h - 1) * stride - 2 * pad + kh, ow = (w - 1) * stride - 2 * pad + kw;
  require(oh > 0 && ow > 0, "conv_transpose2d: empty output");
  require(!bias.defined() || bias.shape() == Shape{cout},
          "conv_transpose2d: bias must have shape [" + std::to_string(cout) + "]");
  // The output grid seen as the input of the matching forward convolution.
  kernels::ConvGeometry geo{oh, ow, cout, kh, kw, stride, pad};
  const Dim cw = geo.col_width();
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x), wv = values<T>(weight);
    std::vector<T> cols(static_cast<std::size_t>(h * w * cw));
    gemm<T>(false, false, h * w, cw, cin, *xv, *wv, cols, false);
    std::vector<T> out(static_cast<std::size_t>(oh * ow * cout), T(0));
    col2im<T>(geo, cols, out);
    if (bias.defined()) {
      auto bv = values<T>(bias);
      for (Dim p = 0; p < oh * ow; ++p)
        for (Dim c = 0; c < cout; ++c) out[p * cout + c] += (*bv)[c];
    }
    return out;
  };
  if (wide_eval_enabled()) return emit({oh, ow, cout}, run(F64{}));
  Tensor y = emit({oh, ow, cout}, run(F32{}));
  if (needs_grad({&x, &weight, &bias})) {
    ImplPtr px = x.impl(), pw = weight.impl(), pb = bias.defined() ? bias.impl() : nullptr;
    record({px, pw, pb}, y, [px, pw, pb, geo, h, w, cin, cout, cw](std::span<const float> g) {
      std::vector<float> dcols(static_cast<std::size_t>(h * w * cw));
      k::im2col(geo, g, dcols);
      if (wants(px)) k::gemm(false, true, h * w, cin, cw, dcols, *pw->storage, grad_buffer(*px), true);
      if (wants(pw)) k::gemm(true, false, cin, cw, h * w, *px->storage, dcols, grad_buffer(*pw), true);
      if (wants(pb)) add_to(grad_buffer(*pb), column_sums(g, geo.height * geo.width, cout));
    });
  }
  return y;
}

Tensor max_pool2x2(const Tensor& x) {
  require(x.rank() == 3, "max_pool2x2: input must be HWC, got " + shape_str(x.shape()));
  const Dim h = x.dim(0), w = x.dim(1), c = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "max_pool2x2: spatial size must be even, got " + shape_str(x.shape()));
  const Dim oh = h / 2, ow = w / 2;
  std::vector<Dim> argmax(static_cast<std::size_t>(oh * ow * c));
  auto run = [&]<class T>(std::type_identity<T>) {
    auto xv = values<T>(x);
    std::vector<T> out(argmax.size());
    for (Dim oy = 0; oy < oh; ++oy)
      for (Dim ox = 0; ox < ow; ++ox)
        for (Dim ch = 0; ch < c; ++ch) {
          Dim best = ((2 * oy) * w + 2 * ox) * c + ch;
          for (Dim dy = 0; dy < 2; ++dy)
            for (Dim dx = 0; dx < 2; ++dx) {
              const Dim at = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if ((*xv)[at] > (*xv)[best]) best = at;
            }
          const Dim o = (oy * ow + ox) * c + ch;
          out[o] = (*xv)[best];
          argmax[o] = best;
        }
    return out;
  };
  if (wide_eval_enabled()) return emit({oh, ow, c}, run(F64{}));
  Tensor y = emit({oh, ow, c}, run(F32{}));
  if (needs_grad({&x})) {
    ImplPtr px = x.impl();
    record({px}, y, [px, argmax = std::move(argmax)](std::span<const float> g) {
      auto& gx = grad_buffer(*px);
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
    });
  }
  return y;
}

Tensor bilinear_sample(const Tensor& map, const Tensor& coord) {
  require(map.rank() == 3, "bilinear_sample: map must be HWC, got " + shape_str(map.shape()));
  require(coord.numel() == 2, "bilinear_sample: coord must hold (y, x)");
  const Dim h = map.dim(0), w = map.dim(1), c = map.dim(2);
  if (wide_eval_enabled()) {
    auto mv = values<double>(map), cv = values<double>(coord);
    std::vector<double> out(static_cast<std::size_t>(c));
    kernels::generic::bilinear_sample<double>(*mv, h, w, c, (*cv)[0], (*cv)[1], out);
    return emit({c}, std::move(out));
  }
  const float cy = coord[0], cx = coord[1];
  std::vector<float> out(static_cast<std::size_t>(c));
  kernels::bilinear_sample(map.data(), h, w, c, cy, cx, out);
  Tensor y = make({c}, std::move(out));
  if (needs_grad({&map, &coord})) {
    ImplPtr pm = map.impl(), pc = coord.impl();
    record({pm, pc}, y, [pm, pc, h, w, c, cy, cx](std::span<const float> g) {
      std::span<float> gm;
      if (wants(pm)) gm = grad_buffer(*pm);
      float gy = 0.0f, gx = 0.0f;
      kernels::bilinear_sample_backward(*pm->storage, h, w, c, cy, cx, g, gm, gy, gx);
      if (wants(pc)) {
        auto& gc = grad_buffer(*pc);
        gc[0] += gy;
        gc[1] += gx;
      }
    });
  }
  return y;
}

Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 3, "deform_conv2d: input must be HWC, got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(0) == 3 && weight.dim(1) == 3,
          "deform_conv2d: only 3x3 kernels are supported, got weight " + shape_str(weight.shape()));
  require(weight.dim(2) == x.dim(2), "deform_conv2d: weight " + shape_str(weight.shape()) +
                                         " does not match input channels " + std::to_string(x.dim(2)));
  require(offsets.shape() == Shape{x.dim(0), x.dim(1), 18},
          "deform_conv2d: offsets must have shape [H,W,18], got " + shape_str(offsets.shape()));
  const Dim cout = weight.dim(3);
  require(!bias.defined() || bias.shape() == Shape{cout},
          "deform_conv2d: bias must have shape [" + std::to_string(cout) + "]");
  kernels::DeformGeometry geo{x.dim(0), x.dim(1), x.dim(2)};
  const Dim pixels = geo.height * geo.width, cw = geo.col_width();
  const Shape out_shape{geo.height, geo.width, cout};
  auto run = [&]<class T>(std::type_identity<T>, std::vector<T>& cols) {
    auto xv = values<T>(x), ov = values<T>(offsets), wv = values<T>(weight);
    cols.assign(static_cast<std::size_t>(pixels * cw), T(0));
    deform_im2col<T>(geo, *xv, *ov, cols);
    std::vector<T> out = bias_rows<T>(bias, pixels, cout);
    gemm<T>(false, false, pixels, cout, cw, cols, *wv, out, true);
    return out;
  };
  if (wide_eval_enabled()) {
    std::vector<double> scratch;
    return emit(out_shape, run(F64{}, scratch));
  }
  std::vector<float> cols;
  Tensor y = emit(out_shape, run(F32{}, cols));
  if (needs_grad({&x, &offsets, &weight, &bias})) {
    ImplPtr px = x.impl(), po = offsets.impl(), pw = weight.impl(), pb = bias.defined() ? bias.impl() : nullptr;
    record({px, po, pw, pb}, y, [px, po, pw, pb, geo, pixels, cw, cout, cols = std::move(cols)](std::span<const float> g) {
      if (wants(pw)) k::gemm(true, false, cw, cout, pixels, cols, g, grad_buffer(*pw), true);
      if (wants(pb)) add_to(grad_buffer(*pb), column_sums(g, pixels, cout));
      if (wants(px) || wants(po)) {
        std::vector<float> dcols(static_cast<std::size_t>(pixels * cw));
        k::gemm(false, true, pixels, cw, cout, g, *pw->storage, dcols, false);
        std::span<float> gx, go;
        if (wants(px)) gx = grad_buffer(*px);
        if (wants(po)) go = grad_buffer(*po);
        k::deform_col2im(geo, *px->storage, *po->storage, dcols, gx, go);
      }
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be [P,C], got " + shape_str(logits.shape()));
  const Dim rows = logits.dim(0), cols = logits.dim(1);
  require(static_cast<Dim>(labels.size()) == rows,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  require(rows > 0, "cross_entropy: no rows");
  for (int label : labels) {
    require(label >= 0 && label < cols, "cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                            std::to_string(cols) + ")");
  }
  if (wide_eval_enabled()) {
    auto lv = values<double>(logits);
    double total = 0.0;
    for (Dim r = 0; r < rows; ++r) {
      const double* row = lv->data() + r * cols;
      const double mx = *std::max_element(row, row + cols);
      double z = 0.0;
      for (Dim c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
      total += std::log(z) + mx - row[labels[r]];
    }
    return emit({}, std::vector<double>{total / static_cast<double>(rows)});
  }
  auto lv = logits.data();
  std::vector<float> probs(lv.size());
  double total = 0.0;
  for (Dim r = 0; r < rows; ++r) {
    const int label = labels[r];
    const float* row = lv.data() + r * cols;
    const float mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (Dim c = 0; c < cols; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    for (Dim c = 0; c < cols; ++c) probs[r * cols + c] = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z);
    total += std::log(z) + mx - row[label];
  }
  Tensor y = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  if (needs_grad({&logits})) {
    ImplPtr pl = logits.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    record({pl}, y, [pl, rows, cols, probs = std::move(probs), lab = std::move(lab)](std::span<const float> g) {
      auto& gl = grad_buffer(*pl);
      const float s = g[0] / static_cast<float>(rows);
      for (Dim r = 0; r < rows; ++r)
        for (Dim c = 0; c < cols; ++c)
          gl[r * cols + c] += s * (probs[r * cols + c] - (c == lab[r] ? 1.0f : 0.0f));
    });
  }
  return y;
}

}  // namespace splitkit::ops
