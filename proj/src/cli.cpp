#include "ivan/cli.hpp"

#include <CLI11.hpp>

#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>

#include "ivan/config.hpp"
#include "ivan/dataio.hpp"
#include "ivan/pipeline.hpp"

namespace ivan {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kInitStream = 0x9e3779b97f4a7c15ULL;

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand. Unset optionals leave the config alone.
struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> lambda;
  std::optional<std::string> loss_norm;
  std::optional<Index> blocks;
  std::optional<Index> hidden;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Config file of key = value lines");
  cmd->add_option("--set", f.sets, "Override one config key (KEY=VALUE), repeatable");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--lambda", f.lambda, "Weight of the forward loss term");
  cmd->add_option("--loss-norm", f.loss_norm, "Loss norm")->check(CLI::IsMember({"l1", "l2"}));
  cmd->add_option("--blocks", f.blocks, "Number of invertible blocks");
  cmd->add_option("--hidden", f.hidden, "Hidden channels of the coupling subnets");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file (.ivan)");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config_path.empty()) apply_config_text(cfg, read_file(f.config_path));
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.lambda) cfg.train.lambda = *f.lambda;
  if (f.loss_norm) cfg.train.loss_norm = parse_loss_norm(*f.loss_norm);
  if (f.blocks) cfg.model.blocks = *f.blocks;
  if (f.hidden) cfg.model.hidden = *f.hidden;
  if (f.out) cfg.out = *f.out;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  cfg.validate();
  return cfg;
}

void echo_config(const RunConfig& cfg, const std::string& command, std::ostream& out) {
  out << "# ivan " << command << " resolved config\n" << resolved_config_text(cfg) << "# end config\n";
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out);
  return (fs::path(cfg.out) / name).string();
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<Modality> task_modalities(const std::string& list, const std::optional<DatasetManifest>& manifest) {
  std::vector<Modality> mods = parse_modalities(list);
  if (manifest) {
    for (auto& m : mods) m.channels = manifest->find(m.name).modality.channels;
  }
  return mods;
}

std::optional<DatasetManifest> maybe_manifest(const RunConfig& cfg) {
  if (cfg.manifest.empty()) return std::nullopt;
  return read_manifest(cfg.manifest);
}

// Split of the configured dataset: a manifest split, or the phantom records
// before/after phantom.train.
Dataset task_data(const RunConfig& cfg, const std::optional<DatasetManifest>& manifest, bool train_split) {
  if (manifest) return load_dataset(*manifest, train_split ? cfg.train_split : cfg.test_split);
  Dataset all = generate_phantoms(cfg.phantom);
  const auto cut = all.begin() + cfg.phantom_train;
  return train_split ? Dataset(all.begin(), cut) : Dataset(cut, all.end());
}

AugmentationPlan task_plan(const RunConfig& cfg, const std::optional<DatasetManifest>& manifest) {
  return plan_for(task_modalities(cfg.sources, manifest), task_modalities(cfg.targets, manifest),
                  cfg.min_channels, cfg.dedup);
}

Checkpoint require_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(cfg.checkpoint);
}

// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const auto manifest = maybe_manifest(cfg);
  const AugmentationPlan plan = task_plan(cfg, manifest);
  const Dataset data = cfg.train.epochs > 0 ? task_data(cfg, manifest, true) : Dataset{};
  ModelTopology topo = cfg.model;
  topo.channels = plan.channels;
  Rng init_rng(cfg.train.seed ^ kInitStream);
  Checkpoint ckpt{init_model<float>(topo, init_rng), plan, cfg.train, 0};

  const std::string loss_path = out_path(cfg, "loss.csv");
  std::string csv = loss_csv_header() + "\n";
  write_file_atomic(loss_path, csv);
  if (cfg.verbosity > 0) {
    out << "training " << plan.channels << "-channel model on " << data.size() << " records\n";
  }
  try {
    train(ckpt.model, data, plan, cfg.train, [&](const EpochLog& log, const FlowModel<float>& model) {
      csv += loss_csv_row(log) + "\n";
      const int done = log.epoch + 1;
      if (done % cfg.train.halve_every == 0 && done < cfg.train.epochs) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_epoch_%04d.ivan", done);
        save_checkpoint(out_path(cfg, name), Checkpoint{model, plan, cfg.train, done});
        write_file_atomic(loss_path, csv);
      }
      if (cfg.verbosity > 0) {
        out << "epoch " << log.epoch << " lr " << fmt(log.lr) << " loss " << fmt(log.loss.total) << '\n';
      }
      return true;
    });
  } catch (const NumericError&) {
    write_file_atomic(loss_path, csv);
    throw;
  }
  write_file_atomic(loss_path, csv);
  ckpt.epoch = cfg.train.epochs;
  const std::string final_path = out_path(cfg, "checkpoint_final.ivan");
  save_checkpoint(final_path, ckpt);
  out << "wrote " << loss_path << " and " << final_path << '\n';
  return kExitOk;
}

std::string image_name(const std::string& stem, const Tensorf& img) {
  return stem + (img.channels() == 3 ? ".ppm" : ".pgm");
}

void save_output(const RunConfig& cfg, const std::string& stem, const Tensorf& img, std::ostream& out) {
  const std::string path = out_path(cfg, image_name(stem, img));
  save_normalized(path, img, img.channels() == 3 ? std::min(cfg.image_maxval, 255) : cfg.image_maxval);
  if (cfg.verbosity > 0) out << "wrote " << path << '\n';
}

int cmd_infer(const RunConfig& cfg, Direction dir, const std::vector<std::string>& inputs, std::ostream& out) {
  const Checkpoint ckpt = require_checkpoint(cfg);
  if (!inputs.empty()) {
    ImageSet<float> images;
    for (const auto& kv : inputs) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--input expects MODALITY=PATH, got '" + kv + "'");
      images.emplace(kv.substr(0, eq), load_normalized(kv.substr(eq + 1)));
    }
    for (const auto& [name, img] : infer(ckpt.model, ckpt.plan, images, dir)) save_output(cfg, name, img, out);
    return kExitOk;
  }
  const auto manifest = maybe_manifest(cfg);
  for (const auto& rec : task_data(cfg, manifest, false)) {
    for (const auto& [name, img] : infer(ckpt.model, ckpt.plan, rec.images, dir)) {
      save_output(cfg, rec.id + "_" + name, img, out);
    }
  }
  return kExitOk;
}

// One metrics.csv row.
struct MetricRow {
  std::string record, modality;
  std::array<double, 8> v;  // psnr, ssim, nmse, ag, sf, en, qmi, qp
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

MetricRow score(const std::string& record, const std::string& modality, const Tensord& pred, const Tensord* ref,
                const Tensord* s1, const Tensord* s2, const MetricConfig& mc) {
  MetricRow row{record, modality, {}};
  row.v.fill(kNaN);
  if (ref) {
    row.v[0] = psnr(*ref, pred, mc);
    row.v[1] = ssim(*ref, pred, mc);
    row.v[2] = nmse(*ref, pred);
  }
  const Plane f = to_plane(pred);
  row.v[3] = avg_gradient(f);
  row.v[4] = spatial_frequency(f);
  row.v[5] = entropy(f, mc);
  if (s1 && s2) {
    const Plane a = to_plane(*s1), b = to_plane(*s2);
    row.v[6] = q_mi(a, b, f, mc);
    row.v[7] = q_piella(a, b, f, mc);
  }
  return row;
}

std::string metrics_csv(const std::vector<MetricRow>& rows, std::ostream& out) {
  static const char* names[8] = {"psnr", "ssim", "nmse", "ag", "sf", "en", "qmi", "qp"};
  std::string csv = "record,modality";
  for (const char* n : names) csv += std::string(",") + n;
  csv += "\n";
  for (const auto& r : rows) {
    csv += r.record + "," + r.modality;
    for (double v : r.v) csv += "," + fmt(v);
    csv += "\n";
  }
  csv += "aggregate,";
  for (std::size_t k = 0; k < 8; ++k) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(r.v[k]);
    const Aggregate a = summarize(col);
    const std::string cell = fmt(a.mean) + " ± " + fmt(a.std);
    csv += "," + cell;
    out << names[k] << " = " << cell;
    if (a.excluded > 0) out << " (" << a.excluded << " non-finite value(s) excluded)";
    out << '\n';
  }
  csv += "\n";
  return csv;
}

struct EvalFiles {
  std::vector<std::string> pred, ref, source1, source2;
};

int cmd_evaluate(const RunConfig& cfg, Direction dir, const EvalFiles& files, std::ostream& out) {
  std::vector<MetricRow> rows;
  const MetricConfig& mc = cfg.metrics;
  if (!files.pred.empty()) {
    const std::size_t n = files.pred.size();
    if ((!files.ref.empty() && files.ref.size() != n) || files.source1.size() != files.source2.size() ||
        (!files.source1.empty() && files.source1.size() != n)) {
      throw ConfigError("evaluate: --pred, --ref and --source1/--source2 lists must pair up");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Tensord p = to_unit_range(load_normalized(files.pred[i]));
      std::optional<Tensord> r, a, b;
      if (!files.ref.empty()) r = to_unit_range(load_normalized(files.ref[i]));
      if (!files.source1.empty()) {
        a = to_unit_range(load_normalized(files.source1[i]));
        b = to_unit_range(load_normalized(files.source2[i]));
      }
      rows.push_back(score(fs::path(files.pred[i]).stem().string(), "", p, r ? &*r : nullptr, a ? &*a : nullptr,
                           b ? &*b : nullptr, mc));
    }
  } else {
    const Checkpoint ckpt = require_checkpoint(cfg);
    const auto manifest = maybe_manifest(cfg);
    const auto& inputs = ckpt.plan.modalities(input_side(dir));
    for (const auto& rec : task_data(cfg, manifest, false)) {
      const ImageSet<float> pred = infer(ckpt.model, ckpt.plan, rec.images, dir);
      std::optional<Tensord> a, b;
      if (inputs.size() >= 2) {
        a = to_unit_range(rec.images.at(inputs[0].name));
        b = to_unit_range(rec.images.at(inputs[1].name));
      }
      for (const auto& m : ckpt.plan.modalities(output_side(dir))) {
        const auto truth = rec.images.find(m.name);
        if (truth == rec.images.end()) throw ShapeError("evaluate: record " + rec.id + " lacks " + m.name);
        const Tensord y = to_unit_range(truth->second);
        rows.push_back(score(rec.id, m.name, to_unit_range(pred.at(m.name)), &y, a ? &*a : nullptr, b ? &*b : nullptr, mc));
      }
    }
  }
  if (rows.empty()) throw ConfigError("evaluate: nothing to score");
  const std::string path = out_path(cfg, "metrics.csv");
  write_file_atomic(path, metrics_csv(rows, out));
  out << "wrote " << path << '\n';
  return kExitOk;
}

int cmd_roundtrip(const RunConfig& cfg, std::ostream& out) {
  const Checkpoint ckpt = require_checkpoint(cfg);
  const RoundTripReport r = roundtrip_check(ckpt.model, cfg.check_height, cfg.check_width, cfg.check_batch, cfg.train.seed);
  out << "max |inverse(forward(x)) - x|: float32 " << fmt(r.max_abs_float) << ", float64 " << fmt(r.max_abs_double)
      << '\n';
  if (!r.passed()) throw CheckFailed("round trip exceeds tolerance (1e-3 float32, 1e-8 float64) at " + r.worst);
  out << "round trip OK\n";
  return kExitOk;
}

struct GradFlags {
  bool sabotage = false;
  bool identity = false;
  Index channels = 2;
  Index size = 8;
};

int cmd_gradcheck(const RunConfig& cfg, const GradFlags& g, std::ostream& out) {
  Rng rng(cfg.train.seed);
  FlowModel<double> model = init_model<double>(ModelTopology{g.channels, cfg.model.blocks, cfg.model.hidden,
                                                             cfg.model.slope, cfg.model.s_clamp},
                                               rng);
  Tensord x(2, g.channels, g.size, g.size), y(x.shape());
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  if (g.identity) {
    for (auto& b : model.blocks) b.mixing.setIdentity();
    y = x;
  } else {
    randomize_final_layers(model, rng, 0.5);
    for (Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform(-1.0, 1.0);
  }
  GradCheckOptions opts;
  if (g.sabotage) {
    opts.tamper = [](GradientSet<double>& grads) { grads.blocks[0].coupling.s.layers[0].weight(0, 0) += 1e-2; };
  }
  const GradCheckReport r = grad_check(model, x, y, cfg.train, opts);
  for (const auto& a : r.arrays) out << a.name << " max_rel_error " << fmt(a.max_rel_error) << '\n';
  out << "kink crossings avoided by frozen activations: " << r.kink_crossings << '\n';
  if (!r.passed(1e-4)) {
    throw CheckFailed("gradient check failed: " + r.worst_array + " relative error " + fmt(r.max_rel_error));
  }
  out << "gradient check OK (max relative error " << fmt(r.max_rel_error) << ")\n";
  return kExitOk;
}

int cmd_make_phantoms(const RunConfig& cfg, std::ostream& out) {
  const DatasetManifest m = write_phantom_dataset(cfg.out, generate_phantoms(cfg.phantom), cfg.phantom_train);
  out << "wrote " << m.records.size() << " records to " << (fs::path(cfg.out) / "manifest.txt").string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Invertible variable-augmented network for multi-modal synthesis and fusion"};
  app.require_subcommand(1);
  CommonFlags common;
  std::string direction = "forward";
  std::vector<std::string> inputs;
  EvalFiles files;
  GradFlags grad;

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write loss.csv and checkpoints");
  CLI::App* infer_cmd = app.add_subcommand("infer", "Forward synthesis or inverse recovery with a checkpoint");
  CLI::App* fuse_cmd = app.add_subcommand("fuse", "Fuse source images with a fusion checkpoint");
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Score predictions and write metrics.csv");
  CLI::App* rt_cmd = app.add_subcommand("roundtrip-check", "Check inverse(forward(x)) == x for a checkpoint");
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  CLI::App* ph_cmd = app.add_subcommand("make-phantoms", "Write a phantom dataset with a manifest");
  for (CLI::App* cmd : {train_cmd, infer_cmd, fuse_cmd, eval_cmd, rt_cmd, gc_cmd, ph_cmd}) add_common(cmd, common);
  for (CLI::App* cmd : {infer_cmd, eval_cmd}) {
    cmd->add_option("--direction", direction, "forward or inverse")->check(CLI::IsMember({"forward", "inverse"}));
  }
  for (CLI::App* cmd : {infer_cmd, fuse_cmd}) cmd->add_option("--input", inputs, "Input image MODALITY=PATH, repeatable");
  eval_cmd->add_option("--pred", files.pred, "Predicted images");
  eval_cmd->add_option("--ref", files.ref, "Reference images, paired with --pred");
  eval_cmd->add_option("--source1", files.source1, "First fusion sources, paired with --pred");
  eval_cmd->add_option("--source2", files.source2, "Second fusion sources, paired with --pred");
  gc_cmd->add_flag("--sabotage", grad.sabotage, "Perturb one analytic gradient (negative control)");
  gc_cmd->add_flag("--identity", grad.identity, "Identity model at zero residual");
  gc_cmd->add_option("--channels", grad.channels, "Channel count")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--size", grad.size, "Input height and width")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    if (name == "gradcheck") {
      // Small defaults for the check model; --blocks/--hidden still win.
      CommonFlags g = common;
      if (!g.blocks) g.blocks = 2;
      if (!g.hidden) g.hidden = 8;
      const RunConfig cfg = resolve(g);
      echo_config(cfg, name, out);
      return cmd_gradcheck(cfg, grad, out);
    }
    const RunConfig cfg = resolve(common);
    echo_config(cfg, name, out);
    if (name == "train") return cmd_train(cfg, out);
    if (name == "infer") return cmd_infer(cfg, parse_direction(direction), inputs, out);
    if (name == "fuse") {
      const Checkpoint ckpt = require_checkpoint(cfg);
      if (ckpt.plan.targets.size() != 1) throw ConfigError("fuse: checkpoint plan must have exactly one target modality");
      return cmd_infer(cfg, Direction::Forward, inputs, out);
    }
    if (name == "evaluate") return cmd_evaluate(cfg, parse_direction(direction), files, out);
    if (name == "roundtrip-check") return cmd_roundtrip(cfg, out);
    if (name == "make-phantoms") return cmd_make_phantoms(cfg, out);
  } catch (const CheckFailed& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  err << "error: unknown command " << name << '\n';
  return kExitUsage;
}

}  // namespace ivan
