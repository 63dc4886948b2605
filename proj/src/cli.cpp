#include "splitkit/cli.hpp"

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "splitkit/adapter.hpp"
#include "splitkit/cka.hpp"
#include "splitkit/io.hpp"
#include "splitkit/train.hpp"
#include "splitkit/vit.hpp"

namespace splitkit {

namespace {

// Bad flag values detected before any computation starts.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Splits a seed into independent streams for model init and data.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed ^ (stream * 0x9e3779b97f4a7c15ULL));
  return rng.next_u64();
}

struct Geometry {
  int layers = 12;
  Dim dim = 64;
  int heads = 4;
  Dim patch = 8;
  Dim size = 64;
  Dim mlp_ratio = 4;

  void add_to(CLI::App* app) {
    app->add_option("--layers", layers, "transformer blocks (L)")->check(CLI::PositiveNumber);
    app->add_option("--dim", dim, "embedding width (D)")->check(CLI::PositiveNumber);
    app->add_option("--heads", heads, "attention heads")->check(CLI::PositiveNumber);
    app->add_option("--patch", patch, "patch size in pixels")->check(CLI::PositiveNumber);
    app->add_option("--size", size, "square image side in pixels")->check(CLI::PositiveNumber);
    app->add_option("--mlp-ratio", mlp_ratio, "MLP hidden width / D")->check(CLI::PositiveNumber);
  }

  ViTConfig config() const {
    ViTConfig c;
    c.layers = layers;
    c.dim = dim;
    c.heads = heads;
    c.patch = patch;
    c.height = size;
    c.width = size;
    c.mlp_ratio = mlp_ratio;
    return c;
  }
};

// Either loads --backbone or initialises one from the seed with the geometry flags.
struct BackboneSource {
  std::string path;
  Geometry geometry;

  void add_to(CLI::App* app) {
    app->add_option("--backbone", path, "backbone checkpoint (VSPT); random init from --seed if omitted");
    geometry.add_to(app);
  }

  void validate() const {
    if (path.empty()) {
      try {
        geometry.config().validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
  }

  BackboneParams load(std::uint64_t seed) const {
    if (!path.empty()) {
      BackboneParams bb = load_checkpoint(path);
      bb.freeze();
      return bb;
    }
    Rng rng(derive_seed(seed, 1));
    BackboneParams bb = BackboneParams::init(geometry.config(), rng);
    bb.freeze();
    return bb;
  }
};

void write_text(const std::string& path, const std::string& text) {
  atomic_write_file(path, std::string_view(text));
}

// Applies `key = value` lines to the options of `sub`. Options given on the
// command line keep their values.
void apply_config_file(CLI::App* sub, const std::string& path) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::FileError& e) {
    throw UsageError(std::string("cannot read config file: ") + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    const std::string key = item.fullname();
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw UsageError("unknown key '" + key + "' in config file " + path);
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::function<void()> validate;
  std::function<void()> run;
};

SelectionKind parse_selection(const std::string& s) {
  if (s == "uniform") return SelectionKind::uniform;
  if (s == "gate") return SelectionKind::sparse_gate;
  throw UsageError("--selection must be uniform or gate");
}

FusionMode parse_mode(const std::string& s) {
  if (s == "fusion") return FusionMode::fusion;
  if (s == "add") return FusionMode::add;
  if (s == "task-only") return FusionMode::task_only;
  throw UsageError("--mode must be fusion, add or task-only");
}

Regime regime_flag(const std::string& s) {
  try {
    return parse_regime(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Split-adapter laboratory on a small vision transformer", "splitkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "seed for every stochastic step")->capture_default_str();

  std::vector<Command> commands;
  auto add_command = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = commands.emplace_back();
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_path, "file of `key = value` lines; flags take precedence");
    c.app->add_option("--seed", seed, "seed for every stochastic step");
    return c;
  };
  commands.reserve(6);

  // select
  int sel_layers = 12, sel_b = 2, sel_kp = 4;
  {
    Command& c = add_command("select", "print the uniformly sampled prior layer indices");
    c.app->add_option("--layers", sel_layers, "number of layers (L)")->capture_default_str();
    c.app->add_option("--b", sel_b, "first sampled layer")->capture_default_str();
    c.app->add_option("--kp", sel_kp, "number of sampled layers (K_p)")->capture_default_str();
    c.validate = [&] {
      try {
        uniform_select(sel_layers, sel_b, sel_kp);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    };
    c.run = [&] {
      auto plan = uniform_select(sel_layers, sel_b, sel_kp);
      for (std::size_t i = 0; i < plan.indices.size(); ++i) out << (i ? "," : "") << plan.indices[i];
      out << "\n";
    };
  }

  // pretrain
  Geometry pre_geometry;
  int pre_steps = 300;
  float pre_lr = 1e-3f;
  std::string pre_out, pre_report;
  {
    Command& c = add_command("pretrain", "masked-patch pretraining of a backbone");
    pre_geometry.add_to(c.app);
    c.app->add_option("--steps", pre_steps, "optimisation steps")->check(CLI::PositiveNumber)->capture_default_str();
    c.app->add_option("--lr", pre_lr, "learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    c.app->add_option("--out", pre_out, "backbone checkpoint to write (VSPT)")->required();
    c.app->add_option("--report", pre_report, "JSON file for the loss curve");
    c.validate = [&] {
      try {
        pre_geometry.config().validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    };
    c.run = [&] {
      auto result = pretrain_backbone(pre_geometry.config(), pre_steps, derive_seed(seed, 1), pre_lr);
      save_checkpoint(result.backbone, pre_out);
      if (!pre_report.empty()) {
        nlohmann::ordered_json j;
        j["steps"] = pre_steps;
        j["seed"] = seed;
        j["backbone_checksum"] = hex64(result.backbone.checksum());
        j["loss_curve"] = result.losses;
        write_text(pre_report, j.dump(2) + "\n");
      }
      out << "pretrain: loss " << result.losses.front() << " -> " << result.losses.back() << ", wrote " << pre_out
          << "\n";
    };
  }

  // train
  BackboneSource train_bb;
  TrainConfig tcfg;
  std::string regime = "vitsplit", selection = "uniform", mode = "fusion", train_out, train_ckpt;
  int samples = 200;
  bool timing = false;
  {
    Command& c = add_command("train", "train a segmentation head in one regime");
    train_bb.add_to(c.app);
    c.app->add_option("--regime", regime, "vitsplit | full-ft | linear-probe")->capture_default_str();
    c.app->add_option("--kt", tcfg.task_layers, "copied task-head layers (K_t)")->capture_default_str();
    c.app->add_option("--kp", tcfg.prior_layers, "prior layers (K_p)")->capture_default_str();
    c.app->add_option("--b", tcfg.start, "first prior layer")->capture_default_str();
    c.app->add_option("--selection", selection, "uniform | gate")->capture_default_str();
    c.app->add_option("--mode", mode, "fusion | add | task-only")->capture_default_str();
    c.app->add_option("--steps", tcfg.steps, "optimisation steps")->capture_default_str();
    c.app->add_option("--batch", tcfg.batch, "images per step")->capture_default_str();
    c.app->add_option("--lr", tcfg.base_lr, "base learning rate")->capture_default_str();
    c.app->add_option("--wd", tcfg.weight_decay, "decoupled weight decay")->capture_default_str();
    c.app->add_option("--task-lr-mult", tcfg.task_head_lr_mult, "task-head lr multiplier")->capture_default_str();
    c.app->add_option("--classes", tcfg.classes, "classes including background")->capture_default_str();
    c.app->add_option("--samples", samples, "toy dataset size")->check(CLI::Range(2, 1000000))->capture_default_str();
    c.app->add_option("--out", train_out, "JSON run report");
    c.app->add_option("--checkpoint", train_ckpt, "VSPT file for the trained tensors");
    c.app->add_flag("--timing", timing, "include wall-clock fields in the report");
    c.validate = [&] {
      train_bb.validate();
      tcfg.regime = regime_flag(regime);
      tcfg.selection = parse_selection(selection);
      tcfg.mode = parse_mode(mode);
      tcfg.seed = seed;
      ViTConfig geometry = train_bb.geometry.config();
      if (!train_bb.path.empty()) geometry = backbone_from_file(TensorFile::load(train_bb.path)).cfg;
      try {
        tcfg.validate(geometry);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    };
    c.run = [&] {
      BackboneParams bb = train_bb.load(seed);
      auto data = make_toy_dataset(samples, static_cast<int>(bb.cfg.height), static_cast<int>(bb.cfg.width),
                                   tcfg.classes, derive_seed(seed, 2));
      TrainOutcome result = train(tcfg, bb, data);
      const std::string json = result.report.to_json(timing);
      if (!train_out.empty()) write_text(train_out, json);
      if (!train_ckpt.empty()) result.trained.save(train_ckpt);
      out << "train " << result.report.regime << ": loss " << result.report.loss_curve.front() << " -> "
          << result.report.loss_curve.back() << ", mIoU " << result.report.final_miou << ", trainable "
          << result.report.trainable_params << "\n";
    };
  }

  // cka
  std::string cka_dump, cka_out, cka_heatmap;
  bool keep_cls = false;
  {
    Command& c = add_command("cka", "layer-by-layer CKA of a feature dump and the two-block split");
    c.app->add_option("--dump", cka_dump, "feature dump written by dump-features")->required();
    c.app->add_option("--out", cka_out, "CSV of the CKA matrix");
    c.app->add_option("--heatmap", cka_heatmap, "PGM heatmap of the CKA matrix");
    c.app->add_flag("--keep-cls", keep_cls, "include the class token in the pooled rows");
    c.validate = [] {};
    c.run = [&] {
      auto batch = features_from_file(TensorFile::load(cka_dump));
      CkaMatrix m = cka_matrix(batch, !keep_cls);
      if (!cka_out.empty()) write_text(cka_out, cka_to_csv(m));
      if (!cka_heatmap.empty()) atomic_write_file(cka_heatmap, cka_to_pgm(m));
      out << "split " << partition_layers(m) << "\n";
    };
  }

  // bench
  BackboneSource bench_bb;
  TrainConfig bcfg;
  std::string bench_regimes = "vitsplit,full-ft,linear-probe", bench_out;
  int bench_steps = 200, bench_warmup = 50;
  {
    Command& c = add_command("bench", "mean wall time per optimisation step for each regime");
    bench_bb.add_to(c.app);
    c.app->add_option("--regimes", bench_regimes, "comma-separated regimes")->capture_default_str();
    c.app->add_option("--steps", bench_steps, "measured steps per regime")->capture_default_str();
    c.app->add_option("--warmup", bench_warmup, "unmeasured steps before timing")->capture_default_str();
    c.app->add_option("--kt", bcfg.task_layers, "copied task-head layers (K_t)")->capture_default_str();
    c.app->add_option("--kp", bcfg.prior_layers, "prior layers (K_p)")->capture_default_str();
    c.app->add_option("--b", bcfg.start, "first prior layer")->capture_default_str();
    c.app->add_option("--batch", bcfg.batch, "images per step")->capture_default_str();
    c.app->add_option("--out", bench_out, "JSON table of timings");
    auto regimes = std::make_shared<std::vector<Regime>>();
    c.validate = [&, regimes] {
      bench_bb.validate();
      regimes->clear();
      std::stringstream ss(bench_regimes);
      for (std::string item; std::getline(ss, item, ',');) regimes->push_back(regime_flag(item));
      if (regimes->empty()) throw UsageError("--regimes is empty");
      if (bench_warmup < 0 || bench_steps < 1 || bench_steps < bench_warmup) {
        throw UsageError("fewer steps (" + std::to_string(bench_steps) + ") than warm-up steps (" +
                         std::to_string(bench_warmup) + ")");
      }
      bcfg.seed = seed;
      try {
        bcfg.validate(bench_bb.geometry.config());
      } catch (const std::invalid_argument& e) {
        if (bench_bb.path.empty()) throw UsageError(e.what());
      }
    };
    c.run = [&, regimes] {
      BackboneParams bb = bench_bb.load(seed);
      auto data = make_toy_dataset(50, static_cast<int>(bb.cfg.height), static_cast<int>(bb.cfg.width), bcfg.classes,
                                   derive_seed(seed, 2));
      auto table = benchmark_step_time(bb, data, *regimes, bcfg, bench_steps, bench_warmup);
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& row : table) {
        out << row.regime << ": " << row.mean_ms << " ms/step (sd " << row.std_ms << ", n=" << row.measured << ")\n";
        j.push_back({{"regime", row.regime}, {"mean_ms", row.mean_ms}, {"std_ms", row.std_ms}, {"n", row.measured}});
      }
      if (!bench_out.empty()) write_text(bench_out, j.dump(2) + "\n");
    };
  }

  // dump-features
  BackboneSource dump_bb;
  int dump_images = 8;
  std::string dump_out;
  {
    Command& c = add_command("dump-features", "run the backbone over toy images and write every layer's tokens");
    dump_bb.add_to(c.app);
    c.app->add_option("--images", dump_images, "number of images")->check(CLI::PositiveNumber)->capture_default_str();
    c.app->add_option("--out", dump_out, "feature dump to write (VSPT)")->required();
    c.validate = [&] { dump_bb.validate(); };
    c.run = [&] {
      BackboneParams bb = dump_bb.load(seed);
      auto data = make_toy_dataset(dump_images, static_cast<int>(bb.cfg.height), static_cast<int>(bb.cfg.width), 4,
                                   derive_seed(seed, 3));
      std::vector<FeatureStack> batch;
      for (const auto& s : data) batch.push_back(forward_collect(s.image, bb));
      features_to_file(batch).save(dump_out);
      out << "dumped " << dump_images << " images x " << bb.cfg.layers << " layers to " << dump_out << "\n";
    };
  }

  // CLI11 expects argv order with the program name first and parses in reverse.
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  Command* chosen = nullptr;
  try {
    app.parse(reversed);
    for (auto& c : commands) {
      if (c.app->parsed()) chosen = &c;
    }
    if (chosen == nullptr) throw UsageError("no subcommand given");
    if (!chosen->config_path.empty()) apply_config_file(chosen->app, chosen->config_path);
    chosen->validate();
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    if (chosen != nullptr) err << chosen->app->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }

  try {
    chosen->run();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace splitkit
