#include "splitkit/train.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "splitkit/io.hpp"
#include "splitkit/ops.hpp"

namespace splitkit {

namespace {

Dim seg_head_count(Dim d, Dim c) { return 2 * (4 * d * d + d) + d * c + c; }

Dim backbone_count(const ViTConfig& v) {
  const Dim d = v.dim, r = v.mlp_ratio;
  const Dim block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d);
  return v.patch * v.patch * 3 * d + d + d + v.tokens() * d + v.layers * block;
}

Dim numel_of(const std::vector<ParamGroup>& groups) {
  Dim n = 0;
  for (const auto& g : groups)
    for (const auto& p : g.params) n += p.numel();
  return n;
}

// Deterministic Fisher-Yates so the data order does not depend on the
// standard library's shuffle.
void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.next_u64() % i]);
}

// Yields batches from the training split, reshuffled at every epoch.
class BatchStream {
 public:
  BatchStream(std::vector<const ToySegSample*> samples, int batch, std::uint64_t seed)
      : samples_(std::move(samples)), batch_(batch), rng_(seed ^ 0x5eedda7aULL) {
    order_.resize(samples_.size());
    reshuffle();
  }

  std::vector<const ToySegSample*> next() {
    std::vector<const ToySegSample*> out;
    for (int i = 0; i < batch_; ++i) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(samples_[order_[pos_++]]);
    }
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    shuffle(order_, rng_);
    pos_ = 0;
  }

  std::vector<const ToySegSample*> samples_;
  int batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::vitsplit:
      return "vitsplit";
    case Regime::full_ft:
      return "full_ft";
    case Regime::linear_probe:
      return "linear_probe";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "vitsplit") return Regime::vitsplit;
  if (s == "full_ft" || s == "full-ft") return Regime::full_ft;
  if (s == "linear_probe" || s == "linear-probe") return Regime::linear_probe;
  throw std::invalid_argument("unknown regime '" + s + "' (expected vitsplit, full-ft or linear-probe)");
}

void TrainConfig::validate(const ViTConfig& vit) const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid training config: " + msg); };
  if (!(base_lr > 0.0f)) fail("base_lr must be positive");
  if (!(weight_decay >= 0.0f)) fail("weight_decay must be non-negative");
  if (!(task_head_lr_mult > 0.0f && task_head_lr_mult <= 1.0f)) fail("task_head_lr_mult must be in (0, 1]");
  if (steps < 1) fail("steps must be at least 1");
  if (batch < 1) fail("batch must be at least 1");
  if (classes < 2) fail("need at least 2 classes");
  if (regime == Regime::vitsplit) adapter_config().validate(vit);
}

AdapterConfig TrainConfig::adapter_config() const {
  AdapterConfig a;
  a.task_layers = task_layers;
  a.prior_layers = prior_layers;
  a.start = start;
  a.selection = selection;
  a.mode = mode;
  a.classes = classes;
  return a;
}

IouAccumulator::IouAccumulator(int classes)
    : classes_(classes), inter_(static_cast<std::size_t>(classes)), uni_(inter_.size()), present_(inter_.size()) {
  if (classes < 1) throw std::invalid_argument("IoU needs at least one class");
}

void IouAccumulator::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("mIoU: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                                std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= classes_ || g < 0 || g >= classes_) throw std::invalid_argument("mIoU: class id out of range");
    ++present_[g];
    if (p == g) {
      ++inter_[g];
      ++uni_[g];
    } else {
      ++uni_[g];
      ++uni_[p];
    }
  }
}

double IouAccumulator::miou() const {
  double total = 0.0;
  int counted = 0;
  for (int c = 0; c < classes_; ++c) {
    if (present_[c] == 0) continue;
    total += static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
    ++counted;
  }
  return counted == 0 ? 0.0 : total / counted;
}

double miou(const Tensor& pred, const Tensor& gt, int classes) {
  if (pred.shape() != gt.shape()) {
    throw std::invalid_argument("mIoU: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()) +
                                " differ");
  }
  std::vector<int> p(pred.data().begin(), pred.data().end()), g(gt.data().begin(), gt.data().end());
  IouAccumulator acc(classes);
  acc.add(p, g);
  return acc.miou();
}

std::string RunReport::to_json(bool include_timing) const {
  nlohmann::ordered_json j;
  j["regime"] = regime;
  j["seed"] = seed;
  j["steps"] = steps;
  j["trainable_params"] = trainable_params;
  j["final_miou"] = final_miou;
  j["backbone_checksum_before"] = backbone_checksum_before;
  j["backbone_checksum_after"] = backbone_checksum_after;
  if (include_timing) {
    j["mean_step_ms"] = mean_step_ms;
    j["std_step_ms"] = std_step_ms;
  }
  j["loss_curve"] = loss_curve;
  return j.dump(2) + "\n";
}

Trainer::Trainer(const TrainConfig& cfg, const BackboneParams& backbone) : cfg_(cfg), backbone_(backbone.clone()) {
  cfg_.validate(backbone_.cfg);
  Rng rng(cfg_.seed ^ 0xada97e5ULL);
  const Dim dim = backbone_.cfg.dim;
  std::vector<ParamGroup> groups;
  switch (cfg_.regime) {
    case Regime::vitsplit: {
      backbone_.freeze();
      adapter_ = AdapterParams::init(backbone_, cfg_.adapter_config(), rng);
      groups.push_back({"task_head", adapter_->task_parameters(), cfg_.task_head_lr_mult});
      groups.push_back({"adapter", adapter_->other_parameters(), 1.0f});
      break;
    }
    case Regime::full_ft: {
      backbone_.unfreeze();
      probe_head_ = SegHead::init(dim, cfg_.classes, rng);
      ParamGroup all{"backbone", {}, 1.0f};
      for (const auto& [name, t] : backbone_.named()) all.params.push_back(t);
      groups.push_back(std::move(all));
      break;
    }
    case Regime::linear_probe:
      backbone_.freeze();
      probe_head_ = SegHead::init(dim, cfg_.classes, rng);
      break;
  }
  if (probe_head_) {
    ParamGroup head{"seg_head", {}, 1.0f};
    for (const auto& [name, t] : probe_head_->named()) head.params.push_back(t);
    groups.push_back(std::move(head));
  }
  AdamWOptions opt;
  opt.lr = cfg_.base_lr;
  opt.weight_decay = cfg_.weight_decay;
  optimizer_ = std::make_unique<AdamW>(std::move(groups), opt);
}

Tensor Trainer::forward(const Tensor& image) const {
  FeatureStack stack = forward_collect(image, backbone_);
  if (adapter_) return adapter_forward(stack, *adapter_);
  const ViTConfig& v = backbone_.cfg;
  return seg_transform(tokens_to_map(stack.back(), v.grid_h(), v.grid_w()), *probe_head_);
}

double Trainer::step(std::span<const ToySegSample* const> batch) {
  if (batch.empty()) throw std::invalid_argument("training step needs a non-empty batch");
  optimizer_->clear_grads();
  double total = 0.0;
  const float weight = 1.0f / static_cast<float>(batch.size());
  for (const ToySegSample* sample : batch) {
    GradGraph graph;
    GraphScope scope(graph);
    Tensor logits = forward(sample->image);
    const Dim h = logits.dim(0), w = logits.dim(1), c = logits.dim(2);
    std::vector<int> labels = downsample_mask(sample->mask, h, w);
    Tensor loss = ops::cross_entropy(ops::reshape(logits, {h * w, c}), labels);
    total += loss.item();
    backward(graph, ops::scale(loss, weight));
  }
  optimizer_->step();
  return total / static_cast<double>(batch.size());
}

Tensor Trainer::logits(const Tensor& image) const {
  NoGradGuard no_grad;
  return forward(image);
}

std::vector<int> Trainer::predict(const Tensor& image) const {
  Tensor l = logits(image);
  const Dim pixels = l.dim(0) * l.dim(1), c = l.dim(2);
  auto d = l.data();
  std::vector<int> out(static_cast<std::size_t>(pixels));
  for (Dim p = 0; p < pixels; ++p) {
    Dim best = 0;
    for (Dim k = 1; k < c; ++k)
      if (d[p * c + k] > d[p * c + best]) best = k;
    out[p] = static_cast<int>(best);
  }
  return out;
}

double Trainer::evaluate(std::span<const ToySegSample* const> samples) const {
  IouAccumulator acc(cfg_.classes);
  const Dim side_h = 4 * backbone_.cfg.grid_h(), side_w = 4 * backbone_.cfg.grid_w();
  for (const ToySegSample* s : samples) acc.add(predict(s->image), downsample_mask(s->mask, side_h, side_w));
  return acc.miou();
}

Dim Trainer::trainable_parameter_count() const { return numel_of(optimizer_->groups()); }

TensorFile Trainer::trained_file() const {
  TensorFile file;
  if (adapter_) return adapter_to_file(*adapter_);
  if (cfg_.regime == Regime::full_ft) file = backbone_to_file(backbone_);
  for (const auto& [name, t] : probe_head_->named()) file.add("head.seg." + name, t);
  return file;
}

Dim expected_trainable_count(const ViTConfig& vit, const TrainConfig& cfg) {
  switch (cfg.regime) {
    case Regime::vitsplit:
      return expected_parameter_count(vit, cfg.adapter_config());
    case Regime::full_ft:
      return backbone_count(vit) + seg_head_count(vit.dim, cfg.classes);
    case Regime::linear_probe:
      return seg_head_count(vit.dim, cfg.classes);
  }
  return 0;
}

TrainOutcome train(const TrainConfig& cfg, const BackboneParams& backbone, const std::vector<ToySegSample>& dataset) {
  cfg.validate(backbone.cfg);
  DatasetSplit split = split_dataset(dataset);
  Trainer trainer(cfg, backbone);

  RunReport report;
  report.regime = regime_name(cfg.regime);
  report.seed = cfg.seed;
  report.steps = cfg.steps;
  report.trainable_params = trainer.trainable_parameter_count();
  report.backbone_checksum_before = hex64(trainer.backbone().checksum());

  BatchStream stream(split.train, cfg.batch, cfg.seed);
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(cfg.steps));
  for (int s = 0; s < cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batch = stream.next();
    report.loss_curve.push_back(trainer.step(batch));
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  report.mean_step_ms = mean_of(times);
  report.std_step_ms = std_of(times);
  report.backbone_checksum_after = hex64(trainer.backbone().checksum());
  report.final_miou = trainer.evaluate(split.held_out);
  return {std::move(report), trainer.trained_file()};
}

namespace {

// [H, W, 3] image -> [grid_h * grid_w, p * p * 3] patch rows in token order.
std::vector<float> patch_rows(const Tensor& image, Dim p) {
  const Dim H = image.dim(0), W = image.dim(1), gw = W / p;
  std::vector<float> out(static_cast<std::size_t>(H * W * 3));
  auto d = image.data();
  for (Dim y = 0; y < H; ++y)
    for (Dim x = 0; x < W; ++x)
      for (Dim c = 0; c < 3; ++c) {
        const Dim token = (y / p) * gw + x / p;
        const Dim inner = ((y % p) * p + x % p) * 3 + c;
        out[token * p * p * 3 + inner] = d[(y * W + x) * 3 + c];
      }
  return out;
}

}  // namespace

PretrainResult pretrain_backbone(const ViTConfig& cfg, int steps, std::uint64_t seed, float lr) {
  if (steps < 1) throw std::invalid_argument("pretrain: steps must be at least 1");
  cfg.validate();
  Rng rng(seed);
  PretrainResult result{BackboneParams::init(cfg, rng), {}};
  BackboneParams& bb = result.backbone;
  bb.unfreeze();

  const Dim p = cfg.patch, tokens = cfg.grid_h() * cfg.grid_w(), out_dim = p * p * 3;
  const float sd = std::sqrt(2.0f / static_cast<float>(cfg.dim + out_dim));
  Tensor dec_w = Tensor::randn({cfg.dim, out_dim}, rng, sd).set_requires_grad(true);
  Tensor dec_b = Tensor::zeros({out_dim}).set_requires_grad(true);

  ParamGroup group{"pretrain", {dec_w, dec_b}, 1.0f};
  for (const auto& [name, t] : bb.named()) group.params.push_back(t);
  AdamWOptions opt;
  opt.lr = lr;
  AdamW optimizer({group}, opt);

  const auto images = make_toy_dataset(64, static_cast<int>(cfg.height), static_cast<int>(cfg.width), 4, seed + 1);
  const Dim masked = std::max<Dim>(1, tokens / 4);
  std::vector<Dim> order(static_cast<std::size_t>(tokens));
  for (int s = 0; s < steps; ++s) {
    const Tensor& image = images[static_cast<std::size_t>(s) % images.size()].image;
    for (Dim t = 0; t < tokens; ++t) order[t] = t;
    for (Dim i = tokens; i > 1; --i) std::swap(order[i - 1], order[rng.next_u64() % static_cast<std::uint64_t>(i)]);

    std::vector<float> target = patch_rows(image, p);
    std::vector<float> weights(target.size(), 0.0f);
    Tensor input = image.clone();
    auto in = input.mutable_data();
    for (Dim k = 0; k < masked; ++k) {
      const Dim t = order[k], gy = t / cfg.grid_w(), gx = t % cfg.grid_w();
      std::fill(weights.begin() + t * out_dim, weights.begin() + (t + 1) * out_dim, 1.0f);
      for (Dim y = gy * p; y < (gy + 1) * p; ++y)
        for (Dim x = gx * p; x < (gx + 1) * p; ++x)
          for (Dim c = 0; c < 3; ++c) in[(y * cfg.width + x) * 3 + c] = 0.5f;
    }

    optimizer.clear_grads();
    GradGraph graph;
    GraphScope scope(graph);
    FeatureStack stack = forward_collect(input, bb);
    Tensor feats = ops::reshape(tokens_to_map(stack.back(), cfg.grid_h(), cfg.grid_w()), {tokens, cfg.dim});
    Tensor pred = ops::linear(feats, dec_w, dec_b);
    Tensor diff = ops::sub(pred, Tensor::from({tokens, out_dim}, std::move(target)));
    Tensor sq = ops::mul(ops::mul(diff, diff), Tensor::from({tokens, out_dim}, std::move(weights)));
    Tensor loss = ops::scale(ops::sum(sq), 1.0f / static_cast<float>(masked * out_dim));
    result.losses.push_back(loss.item());
    backward(graph, loss);
    optimizer.step();
  }
  optimizer.clear_grads();
  bb.freeze();
  return result;
}

std::vector<StepTiming> benchmark_step_time(const BackboneParams& backbone, const std::vector<ToySegSample>& dataset,
                                            std::span<const Regime> regimes, const TrainConfig& base, int steps,
                                            int warmup) {
  if (warmup < 0) throw std::invalid_argument("benchmark: warm-up must be non-negative");
  if (steps < warmup || steps < 1) {
    throw std::invalid_argument("benchmark: fewer steps (" + std::to_string(steps) + ") than warm-up steps (" +
                                std::to_string(warmup) + ")");
  }
  DatasetSplit split = split_dataset(dataset);
  // Regimes take turns step by step so background load is shared evenly.
  std::vector<Trainer> trainers;
  std::vector<BatchStream> streams;
  std::vector<std::vector<double>> times(regimes.size());
  for (Regime r : regimes) {
    TrainConfig cfg = base;
    cfg.regime = r;
    cfg.steps = steps + warmup;
    trainers.emplace_back(cfg, backbone);
    streams.emplace_back(split.train, cfg.batch, cfg.seed);
  }
  for (int s = 0; s < warmup + steps; ++s) {
    for (std::size_t k = 0; k < trainers.size(); ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      auto batch = streams[k].next();
      trainers[k].step(batch);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (s >= warmup) times[k].push_back(ms);
    }
  }
  std::vector<StepTiming> out;
  for (std::size_t k = 0; k < regimes.size(); ++k) {
    out.push_back({regime_name(regimes[k]), mean_of(times[k]), std_of(times[k]), static_cast<int>(times[k].size())});
  }
  return out;
}

}  // namespace splitkit
