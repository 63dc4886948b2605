#include "splitkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace splitkit {

Dim shape_numel(const Shape& shape) {
  Dim n = 1;
  for (Dim d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->storage = std::make_shared<std::vector<float>>(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return full({}, value); }

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<Dim>(values.size())) {
    throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<std::vector<float>>(std::move(values));
  return Tensor(std::move(impl));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.mutable_data()) v = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

double Tensor::item_wide() const {
  if (numel() != 1) throw std::invalid_argument("item_wide() on tensor of shape " + shape_str(shape()));
  if (impl_->wide) return (*impl_->wide)[0];
  return static_cast<double>(item());
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.reset();
  return *this;
}

std::span<const float> Tensor::grad() const {
  if (!impl_->grad) return {};
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0f);
}

Tensor Tensor::clone() const {
  return from(shape(), std::vector<float>(impl_->storage->begin(), impl_->storage->end()));
}

Tensor Tensor::view_as(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("view_as: cannot view " + shape_str(this->shape()) + " as " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = impl_->storage;
  impl->wide = impl_->wide;
  return Tensor(std::move(impl));
}

void accumulate_grad(TensorImpl& node, std::span<const float> delta) {
  if (!node.requires_grad) return;
  if (!node.grad) node.grad.emplace(node.storage->size(), 0.0f);
  auto& g = *node.grad;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

namespace {

thread_local GradGraph* tls_graph = nullptr;
thread_local bool tls_grad_enabled = true;
thread_local bool tls_wide_eval = false;

}  // namespace

GradGraph& GradGraph::current() {
  thread_local GradGraph fallback;
  return tls_graph ? *tls_graph : fallback;
}

void GradGraph::record(std::vector<std::shared_ptr<TensorImpl>> inputs, const Tensor& output, BackwardFn fn) {
  output.impl()->is_intermediate = true;
  entries_.push_back(Entry{std::move(inputs), output.impl(), std::move(fn)});
}

void GradGraph::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.shape().empty()) throw std::invalid_argument("loss must be scalar");
  const auto& target = loss.impl();
  auto it = std::find_if(entries_.rbegin(), entries_.rend(), [&](const Entry& e) { return e.output == target; });
  if (it == entries_.rend()) throw std::invalid_argument("loss not in graph");

  for (auto& e : entries_) e.output->grad.reset();
  target->grad.emplace(1, 1.0f);
  for (; it != entries_.rend(); ++it) {
    if (!it->output->grad) continue;
    it->backward(*it->output->grad);
  }
}

void backward(GradGraph& graph, const Tensor& loss) { graph.backward(loss); }

GraphScope::GraphScope(GradGraph& graph) : previous_(tls_graph) { tls_graph = &graph; }
GraphScope::~GraphScope() { tls_graph = previous_; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

bool grad_enabled() { return tls_grad_enabled && !tls_wide_eval; }

WideEvalGuard::WideEvalGuard() : previous_(tls_wide_eval) { tls_wide_eval = true; }
WideEvalGuard::~WideEvalGuard() { tls_wide_eval = previous_; }

bool wide_eval_enabled() { return tls_wide_eval; }

Tensor stop_gradient(const Tensor& x) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = x.shape();
  impl->storage = x.impl()->storage;
  impl->wide = x.impl()->wide;
  return Tensor(std::move(impl));
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float eps) {
  if (!(eps > 0.0f)) throw std::invalid_argument("grad_check: eps must be positive");
  const bool had_grad_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();

  std::vector<float> analytic(static_cast<std::size_t>(x.numel()), 0.0f);
  {
    GradGraph graph;
    GraphScope scope(graph);
    Tensor y = f(x);
    if (!y.defined() || !y.shape().empty()) throw std::invalid_argument("grad_check: f must return a scalar");
    if (y.requires_grad()) {
      graph.backward(y);
      if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    }
  }

  auto eval = [&]() -> double {
    WideEvalGuard wide;
    return f(x).item_wide();
  };

  double worst = 0.0;
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float orig = values[i];
    const float hi = orig + eps;
    const float lo = orig - eps;
    values[i] = hi;
    const double f_hi = eval();
    values[i] = lo;
    const double f_lo = eval();
    values[i] = orig;
    const double numeric = (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }

  x.clear_grad();
  x.set_requires_grad(had_grad_flag);
  return worst;
}

}  // namespace splitkit
