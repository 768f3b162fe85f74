#include "seqmask/cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>

#include "seqmask/config.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/eval.hpp"
#include "seqmask/training.hpp"

#ifndef SEQMASK_BUILD_ID
#define SEQMASK_BUILD_ID "unknown"
#endif

namespace seqmask::cli {

namespace fs = std::filesystem;

const char* build_id() { return SEQMASK_BUILD_ID; }

namespace {

struct Options {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> masking;
  std::optional<std::string> dataset;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw IoError(std::string("missing ") + what + " path");
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " not found: " + path);
}

void apply_overrides(TrainConfig& cfg, const Options& o) {
  if (o.seed) set_config_value(cfg, "seed", std::to_string(*o.seed));
  if (o.masking) set_config_value(cfg, "masking", *o.masking);
  if (o.dataset) {
    if (*o.dataset == "synthetic") {
      set_config_value(cfg, "dataset.kind", "synthetic");
    } else {
      require_file(*o.dataset, "dataset manifest");
      set_config_value(cfg, "dataset.kind", "manifest");
      set_config_value(cfg, "dataset.manifest", *o.dataset);
    }
  }
  cfg.sync();
  cfg.validate();
}

// Writes the effective config and build id into `dir` and echoes the config.
void record_run(const TrainConfig& cfg, const fs::path& dir, std::ostream& out) {
  fs::create_directories(dir);
  std::ofstream c(dir / "effective_config.cfg");
  std::ofstream b(dir / "build_id.txt");
  if (!c || !b) throw IoError("cannot write run info into: " + dir.string());
  c << cfg.to_text();
  b << build_id() << "\n";
  out << "# effective config (build " << build_id() << ")\n" << cfg.to_text() << std::flush;
}

fs::path out_dir_for_file(const fs::path& file) {
  auto parent = file.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  require_file(o.config_path, "config");
  if (o.out_path.empty()) throw IoError("pretrain needs --out <directory>");
  auto cfg = TrainConfig::load(o.config_path);
  apply_overrides(cfg, o);
  const fs::path dir = o.out_path;
  record_run(cfg, dir, out);

  auto train = training::make_train_dataset(cfg);
  std::ofstream telemetry(dir / "telemetry.jsonl", std::ios::trunc);
  if (!telemetry) throw IoError("cannot write telemetry into: " + dir.string());
  training::PretrainHooks hooks;
  hooks.on_step = [&](const training::StepRecord& r) {
    telemetry << training::telemetry_line(r) << "\n" << std::flush;
  };
  auto result = training::pretrain(cfg, train, hooks);
  const auto ck = dir / "checkpoint.bin";
  training::save_checkpoint(ck, result.encoder, result.masker, cfg,
                            static_cast<int64_t>(result.records.size()));
  out << "wrote " << ck.string() << " after " << result.records.size() << " steps\n";
  return 0;
}

struct Loaded {
  training::Checkpoint ck;
  TrainConfig cfg;
};

Loaded load_for_eval(const Options& o) {
  require_file(o.checkpoint_path, "checkpoint");
  if (!o.config_path.empty()) require_file(o.config_path, "config");
  auto ck = training::load_checkpoint(o.checkpoint_path);
  auto cfg = o.config_path.empty() ? ck.config : TrainConfig::load(o.config_path);
  apply_overrides(cfg, o);
  return {std::move(ck), cfg};
}

std::string dataset_id(const TrainConfig& cfg) {
  if (cfg.dataset.kind == "synthetic") {
    return "synthetic:seed=" + std::to_string(cfg.dataset.seed) +
           ",count=" + std::to_string(cfg.dataset.count) +
           ",size=" + std::to_string(cfg.dataset.size) +
           ",classes=" + std::to_string(cfg.dataset.classes);
  }
  return "manifest:" + cfg.dataset.manifest;
}

int cmd_probe(const Options& o, std::ostream& out, bool finetune) {
  if (o.out_path.empty()) throw IoError("probe/finetune needs --out <directory>");
  auto [ck, cfg] = load_for_eval(o);
  const fs::path dir = o.out_path;
  record_run(cfg, dir, out);
  auto train = training::make_train_dataset(cfg);
  auto test = training::make_test_dataset(cfg);

  auto pc = finetune ? eval::ProbeConfig::finetune_default() : eval::ProbeConfig::linear_default();
  pc.lr = finetune ? cfg.probe.finetune_lr : cfg.probe.lr;
  pc.batch_size = cfg.probe.batch_size;
  pc.epochs = cfg.probe.epochs;
  pc.weight_decay = cfg.probe.weight_decay;
  pc.momentum = cfg.probe.momentum;
  pc.seed = cfg.seed;
  const double acc = finetune ? eval::fine_tune(ck.encoder, train, test, pc)
                              : eval::linear_probe(ck.encoder, train, test, pc);
  const auto name = finetune ? "finetune_accuracy" : "linear_probe_accuracy";
  const auto line = eval::metric_line(o.checkpoint_path, dataset_id(cfg), name, acc, cfg.seed);
  std::ofstream m(dir / "metrics.jsonl", std::ios::app);
  if (!m) throw IoError("cannot write metrics into: " + dir.string());
  m << line << "\n";
  out << line << "\n";
  return 0;
}

int cmd_masks(const Options& o, std::ostream& out) {
  if (o.out_path.empty()) throw IoError("masks needs --out <image path>");
  auto [ck, cfg] = load_for_eval(o);
  record_run(cfg, out_dir_for_file(o.out_path), out);
  auto test = training::make_test_dataset(cfg);
  if (test.empty()) test = training::make_train_dataset(cfg);
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < std::min<int64_t>(8, static_cast<int64_t>(test.size())); ++i) idx.push_back(i);
  if (idx.empty()) throw IoError("masks: dataset is empty");
  eval::visualize_masks(ck.masker, data::stack_pixels(test, idx), o.out_path);
  out << "wrote " << o.out_path << " (" << idx.size() << " rows x " << (cfg.n_masks + 1)
      << " panels)\n";
  return 0;
}

int cmd_metrics(const Options& o, std::ostream& out) {
  if (o.out_path.empty()) throw IoError("metrics needs --out <directory>");
  auto [ck, cfg] = load_for_eval(o);
  const fs::path dir = o.out_path;
  record_run(cfg, dir, out);
  auto test = training::make_test_dataset(cfg);
  const double b = cfg.weights.budget_b;
  auto report = eval::mask_metrics(ck.masker, test, b);
  const double baseline = eval::random_mask_baseline_iou(test, b, cfg.n_masks, cfg.seed);

  std::ofstream m(dir / "metrics.jsonl", std::ios::app);
  if (!m) throw IoError("cannot write metrics into: " + dir.string());
  const auto id = dataset_id(cfg);
  auto emit = [&](const std::string& name, double v) {
    const auto line = eval::metric_line(o.checkpoint_path, id, name, v, cfg.seed);
    m << line << "\n";
    out << line << "\n";
  };
  for (std::size_t k = 0; k < report.slot_mean.size(); ++k) {
    const auto s = std::to_string(k);
    emit("slot" + s + ".mean", report.slot_mean[k]);
    emit("slot" + s + ".budget_error", report.mean_budget_error[k]);
    emit("slot" + s + ".match_iou", report.slot_match_iou[k]);
    emit("slot" + s + ".soft_iou", report.slot_soft_iou[k]);
  }
  emit("mean_best_match_iou", report.mean_best_match_iou());
  emit("mean_pairwise_overlap", report.mean_pairwise_overlap());
  emit("empty_slots", static_cast<double>(report.empty_slots));
  emit("random_baseline_iou", baseline);
  return 0;
}

int cmd_export(const Options& o, std::ostream& out) {
  if (o.out_path.empty()) throw IoError("export-data needs --out <directory>");
  TrainConfig cfg;
  if (!o.config_path.empty()) {
    require_file(o.config_path, "config");
    cfg = TrainConfig::load(o.config_path);
  }
  apply_overrides(cfg, o);
  const fs::path dir = o.out_path;
  record_run(cfg, dir, out);
  auto ds = training::make_train_dataset(cfg);
  data::export_dataset(ds, dir);
  out << "exported " << ds.size() << " images to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequential adversarial masking for contrastive pretraining", "seqmask"};
  app.require_subcommand(1);
  Options o;
  uint64_t seed = 0;
  std::string masking;
  std::string dataset;

  auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("--config", o.config_path, "Run configuration file (key = value)");
    if (needs_checkpoint) {
      sub->add_option("--checkpoint", o.checkpoint_path, "Checkpoint file")->required();
    } else {
      sub->add_option("--checkpoint", o.checkpoint_path, "Checkpoint file");
    }
    sub->add_option("--out", o.out_path, "Output directory (image path for `masks`)")->required();
    sub->add_option("--seed", seed, "Override the run seed");
    sub->add_option("--masking", masking, "sequential | random | none")
        ->check(CLI::IsMember({"sequential", "random", "none"}));
    sub->add_option("--dataset", dataset, "`synthetic` or a manifest path");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Adversarial pretraining");
  add_common(pretrain, false);
  pretrain->get_option("--config")->required();
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen features");
  add_common(probe, true);
  auto* finetune = app.add_subcommand("finetune", "Fine-tune encoder and classifier");
  add_common(finetune, true);
  auto* masks = app.add_subcommand("masks", "Write a mask visualisation grid");
  add_common(masks, true);
  auto* metrics = app.add_subcommand("metrics", "Mask quality against ground truth");
  add_common(metrics, true);
  auto* export_data = app.add_subcommand("export-data", "Export the dataset as PNG + manifest");
  add_common(export_data, false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "seqmask: usage error: " << e.what() << "\n";
    return 2;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) o.seed = seed;
    if (sub->count("--masking") > 0) o.masking = masking;
    if (sub->count("--dataset") > 0) o.dataset = dataset;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(o, out);
    if (probe->parsed()) return cmd_probe(o, out, false);
    if (finetune->parsed()) return cmd_probe(o, out, true);
    if (masks->parsed()) return cmd_masks(o, out);
    if (metrics->parsed()) return cmd_metrics(o, out);
    if (export_data->parsed()) return cmd_export(o, out);
  } catch (const std::exception& e) {
    err << "seqmask: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace seqmask::cli
