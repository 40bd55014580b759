// Command-line driver: corpus generation, training, quantization, evaluation,
// inference and the dataflow cycle/resource models.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tinyicenet/dataflow.hpp"
#include "tinyicenet/evaluation.hpp"
#include "tinyicenet/io.hpp"
#include "tinyicenet/model.hpp"
#include "tinyicenet/quantization.hpp"
#include "tinyicenet/training.hpp"

namespace fs = std::filesystem;
using namespace tinyicenet;

namespace {

struct Options {
  std::uint64_t seed = 0;
  std::string out;
  std::string scenes;
  std::string checkpoint;
  int bits = 8;
  std::string bits_list = "7,8,9,10,12,15,20,32";
  std::size_t num_classes = 7;
  bool desk_scale = false;
  std::size_t size = 512;
  std::size_t uf_budget = 0;
  double clock_mhz = 200.0;
  std::string metric = "weighted";

  // generate
  std::size_t count = 0;
  double val_fraction = 0.25;
  double speckle = 0.0;
  std::size_t border = 0;
  double nan_probability = 0.0;
  std::size_t floes_min = 0, floes_max = 0;

  // train / qat
  std::size_t epochs = 0, steps = 0, batch = 0;
  double lr = 0.0;
  bool no_augment = false;

  // quantize / simulate / infer
  bool qat = false;
  std::string scale_mode = "pow2";
  std::string variant = "standard";
  std::size_t uf_in = 1, uf_out = 1;
  bool fixed_point = false;
  std::vector<std::string> inputs;
};

fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

std::vector<int> parse_bits_list(const std::string& text) {
  std::vector<int> bits;
  for (const auto& row : parse_csv(text))
    for (const auto& field : row) {
      std::size_t used = 0;
      int b = 0;
      try {
        b = std::stoi(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != field.size()) throw ConfigError("bad entry '" + field + "' in --bits-list");
      bits.push_back(b);
    }
  if (bits.empty()) throw ConfigError("--bits-list is empty");
  return bits;
}

Checkpoint load_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return checkpoint_read(o.checkpoint);
}

std::vector<Scene> load_scenes(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--scenes is required");
  auto scenes = read_corpus(dir);
  if (scenes.empty()) throw ConfigError("no .tisc scenes in " + dir);
  return scenes;
}

/// `dir/sub` when it exists, else `dir` itself.
std::string subdir_or_self(const std::string& dir, const char* sub) {
  const fs::path p = fs::path(dir) / sub;
  return fs::is_directory(p) ? p.string() : dir;
}

TrainConfig train_config(const Options& o) {
  TrainConfig c = o.desk_scale ? TrainConfig::desk(o.seed) : TrainConfig{};
  c.seed = o.seed;
  if (o.epochs) c.epochs = o.epochs;
  if (o.steps) c.steps_per_epoch = o.steps;
  if (o.batch) c.batch_size = o.batch;
  if (o.lr > 0.0) c.lr0 = o.lr;
  c.augment = !o.no_augment;
  c.metric = parse_f1_average(o.metric);
  c.validate();
  return c;
}

int cmd_generate(const Options& o) {
  SceneGenParams p = o.desk_scale ? SceneGenParams::desk(o.size == 512 ? 64 : o.size, o.num_classes) : SceneGenParams{};
  if (!o.desk_scale) {
    p.height = p.width = o.size;
    p.num_classes = o.num_classes;
  }
  if (o.floes_min) p.floe_count_min = o.floes_min;
  if (o.floes_max) p.floe_count_max = o.floes_max;
  p.speckle_strength = o.speckle;
  p.border_mask_width = o.border;
  p.nan_probability = o.nan_probability;
  const std::size_t count = o.count ? o.count : (o.desk_scale ? 64 : 20);
  if (!(o.val_fraction >= 0.0 && o.val_fraction < 1.0)) throw ConfigError("--val-fraction must be in [0, 1)");
  const auto scenes = generate_corpus(p, count, o.seed);
  const auto n_val = static_cast<std::size_t>(std::llround(o.val_fraction * static_cast<double>(count)));
  const fs::path dir = out_dir(o);
  const std::span<const Scene> all(scenes);
  write_corpus(dir / "train", all.first(count - n_val));
  if (n_val) write_corpus(dir / "val", all.last(n_val));
  std::printf("wrote %zu training and %zu validation scenes (%zux%zu, %zu classes) to %s\n", count - n_val, n_val,
              p.height, p.width, p.num_classes, dir.string().c_str());
  return 0;
}

int cmd_train(const Options& o) {
  const TrainConfig cfg = train_config(o);
  const auto train = load_scenes(subdir_or_self(o.scenes, "train"));
  const auto val = load_scenes(subdir_or_self(o.scenes, "val"));
  const fs::path dir = out_dir(o);
  Model32 init = o.checkpoint.empty() ? build_tinyicenet<float>(o.num_classes, o.seed, train[0].height)
                                      : load_checkpoint(o).model;
  TrainHooks hooks;
  hooks.on_improve = [&](const Model32& m, std::size_t epoch, double f1) {
    checkpoint_write(dir / "model.tin", Checkpoint::from_float(m, {epoch, f1, cfg.seed}));
  };
  hooks.on_step = [&](const StepRecord& r) {
    if (!r.val_f1) return;
    std::printf("epoch %zu: loss %.4f, val %s F1 %.4f\n", r.epoch, r.loss, o.metric.c_str(), *r.val_f1);
    std::fflush(stdout);
  };
  const TrainResult res = train_loop(cfg, init, train, val, hooks);
  write_text(dir / "history.csv", history_csv(res.history));
  std::printf("best val F1 %.4f at epoch %zu\n", res.best_f1, res.best_epoch);
  return 0;
}

int cmd_eval(const Options& o) {
  const Checkpoint ck = load_checkpoint(o);
  const auto scenes = load_scenes(o.scenes);
  const F1Average metric = parse_f1_average(o.metric);
  EvaluationReport rep;
  if (o.fixed_point) {
    if (!ck.quantized()) throw ConfigError("--fixed-point needs a quantized checkpoint");
    const QuantizedModel qm = ck.to_quantized();
    std::vector<LabelMap> preds;
    for (const Scene& s : scenes) preds.push_back(fixed_point_predict(qm, scene_input(s), {}, false));
    rep = evaluate_predictions(preds, scenes, qm.folded.num_classes(), metric);
  } else {
    rep = evaluate_model(ck.model, scenes, metric);
  }
  write_text(out_dir(o) / "eval.csv", evaluation_csv(rep));
  std::printf("%s F1 %.4f over %zu scenes\n", o.metric.c_str(), rep.aggregate_f1, scenes.size());
  return 0;
}

int cmd_quantize(const Options& o) {
  const Checkpoint ck = load_checkpoint(o);
  if (ck.quantized()) throw ConfigError("checkpoint is already quantized");
  const ScaleMode mode = parse_scale_mode(o.scale_mode);
  const fs::path dir = out_dir(o);
  if (!o.qat) {
    const QuantizedModel qm = ptq_calibrate(ck.model, o.bits, mode);
    const fs::path path = dir / ("model_q" + std::to_string(o.bits) + ".tin");
    checkpoint_write(path, Checkpoint::from_quantized(qm, ck.meta));
    std::printf("wrote %d-bit PTQ checkpoint %s\n", o.bits, path.string().c_str());
    return 0;
  }
  const TrainConfig cfg = train_config(o);
  const auto train = load_scenes(subdir_or_self(o.scenes, "train"));
  const auto val = load_scenes(subdir_or_self(o.scenes, "val"));
  const QatResult res = qat_train(cfg, o.bits, ck.model, train, val, mode);
  write_text(dir / "qat_history.csv", history_csv(res.training.history));
  const fs::path path = dir / ("model_qat" + std::to_string(o.bits) + ".tin");
  checkpoint_write(path, Checkpoint::from_quantized(res.model, {res.training.best_epoch, res.training.best_f1, cfg.seed}));
  std::printf("QAT best val F1 %.4f; wrote %s\n", res.training.best_f1, path.string().c_str());
  return 0;
}

int cmd_sweep(const Options& o) {
  const Checkpoint ck = load_checkpoint(o);
  if (ck.quantized()) throw ConfigError("sweep needs a float checkpoint");
  const auto scenes = load_scenes(o.scenes);
  const auto bits = parse_bits_list(o.bits_list);
  const F1Average metric = parse_f1_average(o.metric);
  const auto points = bitwidth_sweep(ck.model, scenes, bits, parse_scale_mode(o.scale_mode), metric);
  write_text(out_dir(o) / "sweep.csv", sweep_csv(points));
  std::printf("float F1 %.4f\n", evaluate_model(ck.model, scenes, metric).aggregate_f1);
  for (const auto& p : points) std::printf("%2d bits: F1 %.4f\n", p.bits, p.f1);
  return 0;
}

int cmd_infer(const Options& o) {
  const Checkpoint ck = load_checkpoint(o);
  const auto scenes = load_scenes(o.scenes);
  const fs::path dir = out_dir(o);
  std::optional<QuantizedModel> qm;
  if (o.fixed_point) {
    if (!ck.quantized()) throw ConfigError("--fixed-point needs a quantized checkpoint");
    qm = ck.to_quantized();
  }
  for (const Scene& s : scenes) {
    const LabelMap pred =
        qm ? fixed_point_predict(*qm, scene_input(s), {}, false) : predict(ck.model, scene_input(s));
    write_pgm(dir / (s.id + ".pgm"), pred);
  }
  std::printf("wrote %zu label maps to %s\n", scenes.size(), dir.string().c_str());
  return 0;
}

struct Network {
  std::vector<LayerSpec> layers;
  std::size_t size = 512;
  int weight_bits = 8;
};

Network network(const Options& o) {
  Network n;
  n.size = o.size;
  n.weight_bits = o.bits;
  if (o.checkpoint.empty()) {
    n.layers = tinyicenet_layers(o.num_classes);
  } else {
    const Checkpoint ck = load_checkpoint(o);
    n.layers = ck.model.layers();
    if (ck.quantized()) n.weight_bits = ck.to_quantized().bits();
  }
  return n;
}

int cmd_simulate(const Options& o) {
  const Network net = network(o);
  DataflowConfig base;
  base.weight_bits = net.weight_bits;
  std::vector<DataflowConfig> configs;
  if (o.uf_budget) {
    configs = schedule_pipeline(net.layers, net.size, net.size, o.uf_budget, base).configs;
  } else {
    const ConvVariant v = parse_conv_variant(o.variant);
    for (const auto& l : net.layers) {
      if (!l.is_conv()) continue;
      DataflowConfig c = base;
      c.variant = l.kernel_size() == 1 && v != ConvVariant::SIPO ? ConvVariant::Pointwise : v;
      if (l.kernel_size() != 1 && v == ConvVariant::Pointwise) c.variant = ConvVariant::Standard;
      c.uf_in = o.uf_in;
      c.uf_out = c.variant == ConvVariant::SIPO ? o.uf_out : 1;
      configs.push_back(c);
    }
  }
  const CycleReport cycles = pipeline_cycles(net.layers, net.size, net.size, configs);
  const ResourceReport res = resource_estimate(net.layers, net.size, net.size, configs);
  const fs::path dir = out_dir(o);
  write_text(dir / "cycles.csv", cycle_csv(cycles));
  write_text(dir / "resources.csv", resource_csv(res));
  std::printf("bottleneck %llu cycles/frame: %.3f fps at %.1f MHz; %llu MAC units, %llu buffer bits\n",
              static_cast<unsigned long long>(cycles.bottleneck_cycles()), cycles.fps(o.clock_mhz), o.clock_mhz,
              static_cast<unsigned long long>(res.mac_units), static_cast<unsigned long long>(res.buffer_bits));
  return 0;
}

int cmd_schedule(const Options& o) {
  if (!o.uf_budget) throw ConfigError("--uf-budget is required");
  const Network net = network(o);
  DataflowConfig base;
  base.weight_bits = net.weight_bits;
  const Schedule s = schedule_pipeline(net.layers, net.size, net.size, o.uf_budget, base);
  write_text(out_dir(o) / "schedule.csv", cycle_csv(s.cycles));
  std::printf("used %zu of %zu unroll budget; bottleneck %llu cycles\n", s.budget_used, o.uf_budget,
              static_cast<unsigned long long>(s.cycles.bottleneck_cycles()));
  return 0;
}

int cmd_report(const Options& o) {
  const Network net = network(o);
  const MacReport macs = count_macs(net.layers, {1, 2, net.size, net.size});
  std::string text = "# model\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "parameters,%zu\nconv_macs,%llu\nelementwise_ops,%llu\ntotal_ops,%llu\n",
                count_params(net.layers), static_cast<unsigned long long>(macs.conv_macs),
                static_cast<unsigned long long>(macs.elementwise_ops), static_cast<unsigned long long>(macs.total()));
  text += buf;
  text += "\n# per-layer\nlayer,kind,macs,elementwise\n";
  for (const auto& l : macs.per_layer) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%llu,%llu\n", l.layer, to_string(l.kind).c_str(),
                  static_cast<unsigned long long>(l.macs), static_cast<unsigned long long>(l.elementwise));
    text += buf;
  }
  for (const auto& in : o.inputs) {
    const auto rows = parse_csv(read_text(in));
    text += "\n# " + fs::path(in).filename().string() + "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) text += (i ? "," : "") + r[i];
      text += "\n";
    }
  }
  write_text(out_dir(o) / "summary.txt", text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAR sea-ice segmentation: training, quantization and dataflow simulation"};
  app.require_subcommand(1);
  Options o;

  auto seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed"); };
  auto out = [&](CLI::App* c) { c->add_option("--out", o.out, "Output directory")->required(); };
  auto scenes = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--scenes", o.scenes, "Scene directory");
    if (required) opt->required();
  };
  auto ckpt = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
    if (required) opt->check(CLI::ExistingFile)->required();
    else opt->check(CLI::ExistingFile);
  };
  auto classes = [&](CLI::App* c) {
    c->add_option("--num-classes", o.num_classes, "Number of SOD classes")->check(CLI::Range(2, 255));
  };
  auto size = [&](CLI::App* c) { c->add_option("--size", o.size, "Scene size in pixels")->check(CLI::Range(8, 1 << 16)); };
  auto metric = [&](CLI::App* c) {
    c->add_option("--metric", o.metric, "F1 averaging")->check(CLI::IsMember({"weighted", "macro", "micro"}));
  };
  auto bits = [&](CLI::App* c) { c->add_option("--bits", o.bits, "Weight bitwidth")->check(CLI::Range(2, 32)); };
  auto training = [&](CLI::App* c) {
    c->add_flag("--desk-scale", o.desk_scale, "8 epochs x 50 steps, batch 4");
    c->add_option("--epochs", o.epochs, "Override epoch count");
    c->add_option("--steps", o.steps, "Override steps per epoch");
    c->add_option("--batch", o.batch, "Override batch size");
    c->add_option("--lr", o.lr, "Override the initial learning rate");
    c->add_flag("--no-augment", o.no_augment, "Disable flips, rotations and rescaling");
    metric(c);
  };
  auto scale_mode = [&](CLI::App* c) {
    c->add_option("--scale-mode", o.scale_mode, "Weight scale")->check(CLI::IsMember({"pow2", "float"}));
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic scene corpus (train/ and val/)");
  seed(gen), out(gen), size(gen), classes(gen);
  gen->add_flag("--desk-scale", o.desk_scale, "64 noiseless 64x64 scenes with 1-3 floes");
  gen->add_option("--count", o.count, "Number of scenes");
  gen->add_option("--val-fraction", o.val_fraction, "Share of scenes written to val/");
  gen->add_option("--speckle", o.speckle, "Multiplicative speckle strength");
  gen->add_option("--border", o.border, "Width of the ignored border ring");
  gen->add_option("--nan-prob", o.nan_probability, "Per-pixel NaN probability before cleanup");
  gen->add_option("--floes-min", o.floes_min, "Minimum floes per scene");
  gen->add_option("--floes-max", o.floes_max, "Maximum floes per scene");

  auto* train = app.add_subcommand("train", "Train from scratch (or from --checkpoint)");
  seed(train), out(train), scenes(train, true), ckpt(train, false), classes(train), training(train);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a scene directory");
  out(eval), scenes(eval, true), ckpt(eval, true), metric(eval);
  eval->add_flag("--fixed-point", o.fixed_point, "Run the integer dataflow path (quantized checkpoints)");

  auto* quant = app.add_subcommand("quantize", "Post-training or quantization-aware quantization");
  seed(quant), out(quant), ckpt(quant, true), bits(quant), scale_mode(quant), scenes(quant, false), training(quant);
  quant->add_flag("--qat", o.qat, "Fine-tune with fake-quantized weights (needs --scenes)");

  auto* sweep = app.add_subcommand("sweep", "F1 versus weight bitwidth");
  out(sweep), ckpt(sweep, true), scenes(sweep, true), metric(sweep), scale_mode(sweep);
  sweep->add_option("--bits-list", o.bits_list, "Comma-separated bitwidths");

  auto* infer = app.add_subcommand("infer", "Write per-scene label maps (PGM)");
  out(infer), ckpt(infer, true), scenes(infer, true);
  infer->add_flag("--fixed-point", o.fixed_point, "Run the integer dataflow path (quantized checkpoints)");

  auto* sim = app.add_subcommand("simulate", "Cycle and resource model of the streaming accelerator");
  out(sim), ckpt(sim, false), classes(sim), size(sim), bits(sim);
  sim->add_option("--clock-mhz", o.clock_mhz, "Clock frequency")->check(CLI::PositiveNumber);
  sim->add_option("--uf-budget", o.uf_budget, "Schedule unrolling under this budget");
  sim->add_option("--variant", o.variant, "Variant for all layers")
      ->check(CLI::IsMember({"standard", "sipo", "pointwise"}));
  sim->add_option("--uf-in", o.uf_in, "Input unrolling factor")->check(CLI::PositiveNumber);
  sim->add_option("--uf-out", o.uf_out, "Output unrolling factor (SIPO)")->check(CLI::PositiveNumber);

  auto* sched = app.add_subcommand("schedule", "Greedy unroll schedule under a budget");
  out(sched), ckpt(sched, false), classes(sched), size(sched), bits(sched);
  sched->add_option("--uf-budget", o.uf_budget, "Total sum of uf_in * uf_out")->required();

  auto* report = app.add_subcommand("report", "Model statistics plus merged CSVs");
  out(report), ckpt(report, false), classes(report), size(report);
  report->add_option("inputs", o.inputs, "CSV files to merge")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*quant) return cmd_quantize(o);
    if (*sweep) return cmd_sweep(o);
    if (*infer) return cmd_infer(o);
    if (*sim) return cmd_simulate(o);
    if (*sched) return cmd_schedule(o);
    if (*report) return cmd_report(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
