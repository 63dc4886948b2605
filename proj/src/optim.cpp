#include "splitkit/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace splitkit {

void adamw_step(Tensor& param, std::span<const float> grad, AdamState& state, float lr, const AdamWOptions& opt) {
  const auto n = static_cast<std::size_t>(param.numel());
  if (grad.size() != n) {
    throw std::invalid_argument("adamw: gradient has " + std::to_string(grad.size()) + " elements, parameter " +
                                std::to_string(n));
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0f);
    state.v.assign(n, 0.0f);
  }
  if (state.m.size() != n || state.v.size() != n) throw std::invalid_argument("adamw: state does not match parameter");

  ++state.step;
  const double c1 = 1.0 - std::pow(static_cast<double>(opt.beta1), static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(static_cast<double>(opt.beta2), static_cast<double>(state.step));
  const float decay = 1.0f - lr * opt.weight_decay;
  auto p = param.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const float g = grad[i];
    state.m[i] = opt.beta1 * state.m[i] + (1.0f - opt.beta1) * g;
    state.v[i] = opt.beta2 * state.v[i] + (1.0f - opt.beta2) * g * g;
    const double m_hat = state.m[i] / c1, v_hat = state.v[i] / c2;
    p[i] *= decay;
    p[i] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + opt.eps));
  }
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWOptions options) : groups_(std::move(groups)), options_(options) {
  if (!(options_.lr > 0.0f)) throw std::invalid_argument("adamw: learning rate must be positive");
  for (const auto& g : groups_) {
    if (!(g.lr_mult > 0.0f && g.lr_mult <= 1.0f)) {
      throw std::invalid_argument("adamw: lr multiplier of group " + g.name + " must be in (0, 1]");
    }
    state_.emplace_back(g.params.size());
  }
}

void AdamW::step() {
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const float lr = effective_lr(gi);
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      Tensor& p = groups_[gi].params[pi];
      if (!p.has_grad()) continue;
      adamw_step(p, p.grad(), state_[gi][pi], lr, options_);
    }
  }
}

void AdamW::clear_grads() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.clear_grad();
}

}  // namespace splitkit
