#pragma once

// AdamW with decoupled weight decay and per-group learning-rate multipliers.

#include <string>
#include <vector>

#include "splitkit/tensor.hpp"

namespace splitkit {

struct AdamWOptions {
  float lr = 2e-4f;
  float weight_decay = 1e-2f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<float> m, v;
  long step = 0;
};

/// One update of a single tensor: p <- p - lr*wd*p, then the bias-corrected
/// adaptive step. Throws if grad or state sizes differ from the parameter.
void adamw_step(Tensor& param, std::span<const float> grad, AdamState& state, float lr, const AdamWOptions& opt);

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  float lr_mult = 1.0f;
};

class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, AdamWOptions options);

  /// Updates every parameter that has a gradient; others keep their state.
  void step();
  /// Drops all gradients.
  void clear_grads();

  const std::vector<ParamGroup>& groups() const { return groups_; }
  float effective_lr(std::size_t group) const { return options_.lr * groups_.at(group).lr_mult; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<AdamState>> state_;
  AdamWOptions options_;
};

}  // namespace splitkit
