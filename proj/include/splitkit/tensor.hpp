#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitkit/rng.hpp"

namespace splitkit {

using Dim = std::int64_t;
using Shape = std::vector<Dim>;

Dim shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  // Shared so that contiguous reshapes are zero-copy.
  std::shared_ptr<std::vector<float>> storage;
  bool requires_grad = false;
  std::optional<std::vector<float>> grad;
  // True for tensors produced by a recorded op; their grads are reset per backward.
  bool is_intermediate = false;
  // f64 shadow of the values, filled only by ops running under WideEvalGuard.
  std::shared_ptr<const std::vector<double>> wide;
};

/// Dense row-major f32 tensor with handle semantics: copies share the same
/// node, so gradients land on the object the caller holds.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f);
  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Dim dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  Dim numel() const { return static_cast<Dim>(impl_->storage->size()); }

  std::span<const float> data() const { return *impl_->storage; }
  /// Mutable access for initializers and optimizers. Not recorded in any graph.
  std::span<float> mutable_data() {
    impl_->wide.reset();
    return *impl_->storage;
  }
  float item() const;
  /// item() in f64, taken from the wide shadow when one exists.
  double item_wide() const;
  float operator[](Dim flat) const { return (*impl_->storage)[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return impl_->grad.has_value(); }
  /// Empty span when no gradient has been accumulated.
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad() { impl_->grad.reset(); }

  /// Deep copy with fresh storage; the copy does not require grad.
  Tensor clone() const;
  /// Zero-copy view with a new shape; not differentiable (use ops::reshape for that).
  Tensor view_as(Shape shape) const;

  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Accumulates `delta` into the gradient buffer of `node`, creating it on
/// first use. A node that does not require grad is left untouched.
void accumulate_grad(TensorImpl& node, std::span<const float> delta);

/// Ordered tape of differentiable operations. Every op is appended after the
/// ops that produced its inputs, so reverse order is a valid backward order.
class GradGraph {
 public:
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  struct Entry {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, const Tensor& output, BackwardFn fn);
  /// Populate d(loss)/d(t) for every requires_grad tensor reachable from loss.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Graph that ops on this thread record into.
  static GradGraph& current();

 private:
  std::vector<Entry> entries_;
};

void backward(GradGraph& graph, const Tensor& loss);

/// Makes `graph` the current graph of this thread for the guard's lifetime.
class GraphScope {
 public:
  explicit GraphScope(GradGraph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  GradGraph* previous_;
};

/// Disables recording on this thread; op outputs never require grad.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// While active on this thread, ops evaluate their forward pass in f64 and
/// attach the result as a shadow of the f32 output. Nothing is recorded.
/// Used by the finite-difference oracle only.
class WideEvalGuard {
 public:
  WideEvalGuard();
  ~WideEvalGuard();
  WideEvalGuard(const WideEvalGuard&) = delete;
  WideEvalGuard& operator=(const WideEvalGuard&) = delete;

 private:
  bool previous_;
};

bool wide_eval_enabled();

/// Value-identical alias of x that contributes no gradient to x.
Tensor stop_gradient(const Tensor& x);

/// Central-difference gradient check. Returns the max over elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// The analytic side is the f32 backward pass; the numeric side evaluates f
/// under WideEvalGuard so rounding of intermediates does not swamp the
/// differences.
/// `x` is perturbed in place and restored before returning.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float eps);

}  // namespace splitkit
