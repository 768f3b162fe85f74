#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "seqmask/cli.hpp"
#include "seqmask/config.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/eval.hpp"
#include "seqmask/training.hpp"

using namespace seqmask;
namespace fs = std::filesystem;

namespace {

const char* kMicro = R"(# tiny run for tests
seed = 5
n_masks = 2
epochs = 1
batch_size = 8
warmup_epochs = 0
dataset.count = 16
dataset.test_count = 8
dataset.size = 32
encoder.width = 4
encoder.projection_dim = 8
masker.base_channels = 4
masker.depth = 2
probe.epochs = 2
)";

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("seqmask_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_micro(const fs::path& dir) {
  std::ofstream(dir / "micro.cfg") << kMicro;
  return dir / "micro.cfg";
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("text form round trips and hashes") {
  auto cfg = TrainConfig::parse(kMicro);
  CHECK(cfg.seed == 5);
  CHECK(cfg.masker.n_masks == 2);
  CHECK(cfg.encoder.input_size == 32);
  auto again = TrainConfig::parse(cfg.to_text());
  CHECK(again.to_text() == cfg.to_text());
  CHECK(again.hash() == cfg.hash());
  CHECK(cfg.hash().size() == 64);
  auto other = cfg;
  set_config_value(other, "overlap_weight", "0.5");
  CHECK(other.hash() != cfg.hash());
}

TEST_CASE("parse errors") {
  CHECK_THROWS_AS(TrainConfig::parse("bogus = 1\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::parse("epochs = many\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::parse("epochs\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 1\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::parse("masking = sometimes\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::parse("encoder_lr = 0\n"), ContractViolation);
  CHECK_THROWS_AS(TrainConfig::load("/nonexistent/x.cfg"), IoError);
}

TEST_CASE("defaults and full-scale preset") {
  TrainConfig d;
  CHECK(d.n_masks == 3);
  CHECK(d.batch_size == 128);
  CHECK(d.epochs == 30);
  CHECK(d.encoder_lr == 0.11);
  CHECK(d.momentum == 0.9);
  CHECK(d.weights.budget_b == 0.25);
  CHECK(d.weights.overlap_weight == 1e-4);
  CHECK(d.weights.consistency_weight == 1e-4);
  CHECK(d.weights.temperature_tau == 0.2);
  auto f = TrainConfig::full_scale();
  CHECK(f.n_masks == 5);
  CHECK(f.batch_size == 256);
  CHECK(f.epochs == 500);
  CHECK(f.encoder.backbone == models::Backbone::resnet18_style);
  CHECK_NOTHROW(f.validate());
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"train"}).code == 2);
  CHECK(run({"pretrain", "--bogus"}).code == 2);
  CHECK(run({"probe", "--out", "x"}).code == 2);
  auto r = run({"pretrain", "--config", "a.cfg", "--out", "o", "--masking", "sometimes"});
  CHECK(r.code == 2);
  CHECK(r.err.find("usage") != std::string::npos);
}

TEST_CASE("missing checkpoint exits 1 naming the path") {
  auto dir = scratch_dir("missing");
  auto r = run({"probe", "--checkpoint", (dir / "missing.bin").string(), "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("missing.bin") != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("missing config exits 1 before compute") {
  auto dir = scratch_dir("nocfg");
  auto r = run({"pretrain", "--config", (dir / "nope.cfg").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("nope.cfg") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "o"));
}

TEST_CASE("pretrain is deterministic and records its run info") {
  auto dir = scratch_dir("pretrain");
  auto cfg = write_micro(dir);
  auto a = run({"pretrain", "--config", cfg.string(), "--seed", "7", "--out", (dir / "a").string()});
  auto b = run({"pretrain", "--config", cfg.string(), "--seed", "7", "--out", (dir / "b").string()});
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(a.out.find("seed = 7") != std::string::npos);
  const auto ta = slurp(dir / "a" / "telemetry.jsonl");
  CHECK_FALSE(ta.empty());
  CHECK(ta == slurp(dir / "b" / "telemetry.jsonl"));
  CHECK(slurp(dir / "a" / "effective_config.cfg").find("seed = 7") != std::string::npos);
  CHECK(slurp(dir / "a" / "build_id.txt") == std::string(cli::build_id()) + "\n");
  auto ck = training::load_checkpoint(dir / "a" / "checkpoint.bin");
  CHECK(ck.config.seed == 7);
}

TEST_CASE("masking none writes zero penalties") {
  auto dir = scratch_dir("none");
  auto cfg = write_micro(dir);
  REQUIRE(run({"pretrain", "--config", cfg.string(), "--masking", "none", "--out", dir.string()}).code == 0);
  std::ifstream in(dir / "telemetry.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto rec = training::parse_telemetry_line(line);
    CHECK(rec.breakdown.budget == 0.0);
    CHECK(rec.breakdown.overlap == 0.0);
    CHECK(rec.breakdown.consistency == 0.0);
    ++lines;
  }
  CHECK(lines == 2);
}

TEST_CASE("evaluation verbs on a fresh checkpoint") {
  auto dir = scratch_dir("eval");
  auto cfg = write_micro(dir);
  REQUIRE(run({"pretrain", "--config", cfg.string(), "--out", (dir / "run").string()}).code == 0);
  const auto ck = (dir / "run" / "checkpoint.bin").string();

  auto masks = run({"masks", "--checkpoint", ck, "--out", (dir / "grid.img").string()});
  REQUIRE(masks.code == 0);
  auto grid = eval::read_png(dir / "grid.img");
  CHECK(grid.sizes() == torch::IntArrayRef{8 * 32, 3 * 32, 3});
  CHECK(fs::exists(dir / "effective_config.cfg"));

  auto probe = run({"probe", "--checkpoint", ck, "--out", (dir / "probe").string()});
  REQUIRE(probe.code == 0);
  CHECK(slurp(dir / "probe" / "metrics.jsonl").find("linear_probe_accuracy") != std::string::npos);

  auto ft = run({"finetune", "--checkpoint", ck, "--out", (dir / "probe").string()});
  REQUIRE(ft.code == 0);
  CHECK(slurp(dir / "probe" / "metrics.jsonl").find("finetune_accuracy") != std::string::npos);

  auto metrics = run({"metrics", "--checkpoint", ck, "--out", (dir / "metrics").string()});
  REQUIRE(metrics.code == 0);
  const auto m = slurp(dir / "metrics" / "metrics.jsonl");
  CHECK(m.find("mean_best_match_iou") != std::string::npos);
  CHECK(m.find("random_baseline_iou") != std::string::npos);
}

TEST_CASE("export-data writes a loadable manifest") {
  auto dir = scratch_dir("export");
  auto cfg = write_micro(dir);
  REQUIRE(run({"export-data", "--config", cfg.string(), "--out", (dir / "data").string()}).code == 0);
  auto ds = data::load_image_dataset(dir / "data", dir / "data" / "manifest.tsv", 32, 4);
  CHECK(ds.size() == 16);

  // A manifest dataset can drive pretraining; the root falls back to the manifest's directory.
  auto r = run({"pretrain", "--config", cfg.string(), "--dataset", (dir / "data" / "manifest.tsv").string(),
                "--out", (dir / "run").string()});
  CHECK(r.code == 0);
  auto bad = run({"pretrain", "--config", cfg.string(), "--dataset", (dir / "absent.tsv").string(),
                  "--out", (dir / "run2").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("absent.tsv") != std::string::npos);
}

}  // TEST_SUITE
