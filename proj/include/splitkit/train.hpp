#pragma once

// Toy pretraining, segmentation fine-tuning in three regimes, metrics and
// step-time benchmarking.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "splitkit/adapter.hpp"
#include "splitkit/data.hpp"
#include "splitkit/optim.hpp"
#include "splitkit/vit.hpp"

namespace splitkit {

enum class Regime { vitsplit, full_ft, linear_probe };

std::string regime_name(Regime r);
/// Accepts "vitsplit", "full_ft"/"full-ft", "linear_probe"/"linear-probe".
Regime parse_regime(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::vitsplit;
  float base_lr = 2e-4f;
  float weight_decay = 1e-2f;
  float task_head_lr_mult = 0.1f;
  int batch = 2;
  int steps = 100;
  int task_layers = 3;   // K_t
  int prior_layers = 4;  // K_p
  int start = 2;         // b
  SelectionKind selection = SelectionKind::uniform;
  FusionMode mode = FusionMode::fusion;
  int classes = 4;
  std::uint64_t seed = 0;

  /// Checks hyper-parameters against the backbone geometry.
  void validate(const ViTConfig& vit) const;
  AdapterConfig adapter_config() const;
};

/// Mean over classes present in gt of |pred & gt| / |pred | gt|.
class IouAccumulator {
 public:
  explicit IouAccumulator(int classes);
  void add(std::span<const int> pred, std::span<const int> gt);
  double miou() const;

 private:
  int classes_;
  std::vector<long> inter_, uni_, present_;
};

double miou(const Tensor& pred, const Tensor& gt, int classes);

struct RunReport {
  std::string regime;
  std::uint64_t seed = 0;
  int steps = 0;
  std::vector<double> loss_curve;
  double final_miou = 0.0;
  Dim trainable_params = 0;
  double mean_step_ms = 0.0;
  double std_step_ms = 0.0;
  std::string backbone_checksum_before, backbone_checksum_after;

  /// Wall-clock fields are left out unless include_timing is set, so reports
  /// of identical runs are byte-identical.
  std::string to_json(bool include_timing = false) const;
};

/// Holds the trainable state of one regime and performs optimisation steps.
class Trainer {
 public:
  /// Works on a private deep copy of the backbone.
  Trainer(const TrainConfig& cfg, const BackboneParams& backbone);

  /// One AdamW step on the mean loss over the batch; returns that loss.
  double step(std::span<const ToySegSample* const> batch);
  /// Logits [4h, 4w, C] for one image, without recording a graph.
  Tensor logits(const Tensor& image) const;
  /// Argmax class per logit pixel.
  std::vector<int> predict(const Tensor& image) const;
  double evaluate(std::span<const ToySegSample* const> samples) const;

  Dim trainable_parameter_count() const;
  /// Trained tensors under their checkpoint names.
  TensorFile trained_file() const;
  const TrainConfig& config() const { return cfg_; }
  const BackboneParams& backbone() const { return backbone_; }
  const std::optional<AdapterParams>& adapter() const { return adapter_; }

 private:
  Tensor forward(const Tensor& image) const;

  TrainConfig cfg_;
  BackboneParams backbone_;
  std::optional<AdapterParams> adapter_;
  std::optional<SegHead> probe_head_;
  std::unique_ptr<AdamW> optimizer_;
};

/// Closed-form trainable count for a regime.
Dim expected_trainable_count(const ViTConfig& vit, const TrainConfig& cfg);

struct TrainOutcome {
  RunReport report;
  TensorFile trained;
};

/// Runs cfg.steps steps over the training split (reshuffled each epoch from
/// the seed) and evaluates on the held-out split.
TrainOutcome train(const TrainConfig& cfg, const BackboneParams& backbone, const std::vector<ToySegSample>& dataset);

struct PretrainResult {
  BackboneParams backbone;
  std::vector<double> losses;
};

/// Masked-patch reconstruction: a quarter of the patches are blanked and a
/// throwaway linear decoder predicts their pixels from the last layer.
/// Returns frozen weights.
PretrainResult pretrain_backbone(const ViTConfig& cfg, int steps, std::uint64_t seed, float lr = 1e-3f);

struct StepTiming {
  std::string regime;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int measured = 0;
};

/// Times `steps` optimisation steps per regime after `warmup` unmeasured
/// ones, with the same data order for every regime. Throws if steps < warmup.
std::vector<StepTiming> benchmark_step_time(const BackboneParams& backbone, const std::vector<ToySegSample>& dataset,
                                            std::span<const Regime> regimes, const TrainConfig& base, int steps,
                                            int warmup = 50);

}  // namespace splitkit
