#include "seqmask/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "seqmask/errors.hpp"
#include "seqmask/hash.hpp"

namespace seqmask {

using detail::require;

std::string to_string(MaskingMode m) {
  switch (m) {
    case MaskingMode::sequential: return "sequential";
    case MaskingMode::random: return "random";
    case MaskingMode::none: return "none";
  }
  return "sequential";
}

MaskingMode masking_from_string(const std::string& s) {
  if (s == "sequential") return MaskingMode::sequential;
  if (s == "random") return MaskingMode::random;
  if (s == "none") return MaskingMode::none;
  throw ContractViolation("unknown masking mode '" + s + "' (expected sequential, random or none)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ContractViolation("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;
struct Field {
  const char* key;
  Setter set;
  Getter get;
};

#define SEQMASK_NUM(KEY, EXPR)                                                              \
  Field {                                                                                   \
    KEY,                                                                                    \
        [](TrainConfig& c, const std::string& k, const std::string& v) {                    \
          c.EXPR = parse_number<std::decay_t<decltype(c.EXPR)>>(k, v);                      \
        },                                                                                  \
        [](const TrainConfig& c) {                                                          \
          if constexpr (std::is_floating_point_v<std::decay_t<decltype(c.EXPR)>>) {         \
            return fmt(c.EXPR);                                                             \
          } else {                                                                          \
            return std::to_string(c.EXPR);                                                  \
          }                                                                                 \
        }                                                                                   \
  }

#define SEQMASK_STR(KEY, EXPR)                                                              \
  Field {                                                                                   \
    KEY, [](TrainConfig& c, const std::string&, const std::string& v) { c.EXPR = v; },      \
        [](const TrainConfig& c) { return c.EXPR; }                                         \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SEQMASK_NUM("seed", seed),
      Field{"masking",
            [](TrainConfig& c, const std::string&, const std::string& v) {
              c.masking = masking_from_string(v);
            },
            [](const TrainConfig& c) { return to_string(c.masking); }},
      SEQMASK_NUM("n_masks", n_masks),
      SEQMASK_NUM("epochs", epochs),
      SEQMASK_NUM("batch_size", batch_size),
      SEQMASK_NUM("encoder_lr", encoder_lr),
      SEQMASK_NUM("masker_lr", masker_lr),
      SEQMASK_NUM("momentum", momentum),
      SEQMASK_NUM("warmup_epochs", warmup_epochs),
      SEQMASK_NUM("budget_b", weights.budget_b),
      SEQMASK_NUM("budget_weight", weights.budget_weight),
      SEQMASK_NUM("overlap_weight", weights.overlap_weight),
      SEQMASK_NUM("consistency_weight", weights.consistency_weight),
      SEQMASK_NUM("temperature", weights.temperature_tau),
      SEQMASK_STR("dataset.kind", dataset.kind),
      SEQMASK_NUM("dataset.seed", dataset.seed),
      SEQMASK_NUM("dataset.count", dataset.count),
      SEQMASK_NUM("dataset.test_count", dataset.test_count),
      SEQMASK_NUM("dataset.size", dataset.size),
      SEQMASK_NUM("dataset.classes", dataset.classes),
      SEQMASK_STR("dataset.root", dataset.root),
      SEQMASK_STR("dataset.manifest", dataset.manifest),
      SEQMASK_STR("dataset.test_manifest", dataset.test_manifest),
      Field{"encoder.backbone",
            [](TrainConfig& c, const std::string&, const std::string& v) {
              c.encoder.backbone = models::backbone_from_string(v);
            },
            [](const TrainConfig& c) { return models::to_string(c.encoder.backbone); }},
      SEQMASK_NUM("encoder.width", encoder.width),
      SEQMASK_NUM("encoder.projection_dim", encoder.projection_dim),
      SEQMASK_NUM("masker.base_channels", masker.base_channels),
      SEQMASK_NUM("masker.depth", masker.depth),
      SEQMASK_NUM("augment.crop_min", augment.crop_scale_min),
      SEQMASK_NUM("augment.crop_max", augment.crop_scale_max),
      SEQMASK_NUM("augment.flip_prob", augment.flip_prob),
      SEQMASK_NUM("augment.jitter_strength", augment.color_jitter_strength),
      SEQMASK_NUM("augment.jitter_prob", augment.color_jitter_prob),
      SEQMASK_NUM("augment.grayscale_prob", augment.grayscale_prob),
      SEQMASK_NUM("probe.lr", probe.lr),
      SEQMASK_NUM("probe.finetune_lr", probe.finetune_lr),
      SEQMASK_NUM("probe.batch_size", probe.batch_size),
      SEQMASK_NUM("probe.epochs", probe.epochs),
      SEQMASK_NUM("probe.weight_decay", probe.weight_decay),
      SEQMASK_NUM("probe.momentum", probe.momentum),
  };
  return table;
}

#undef SEQMASK_NUM
#undef SEQMASK_STR

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, value);
      cfg.sync();
      return;
    }
  }
  throw ContractViolation("unknown config key '" + key + "'");
}

void TrainConfig::sync() {
  masker.n_masks = n_masks;
  encoder.input_size = dataset.size;
  masker.input_size = dataset.size;
  encoder.input_channels = 3;
  masker.input_channels = 3;
  augment.seed = seed;
}

void TrainConfig::validate() const {
  require(batch_size >= 2, "batch_size must be >= 2");
  require(epochs >= 1, "epochs must be >= 1");
  require(encoder_lr > 0.0, "encoder_lr must be > 0");
  require(masker_lr >= 0.0, "masker_lr must be >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  require(warmup_epochs >= 0 && warmup_epochs <= epochs, "warmup_epochs must lie in [0, epochs]");
  require(n_masks >= 1, "n_masks must be >= 1");
  require(dataset.kind == "synthetic" || dataset.kind == "manifest",
          "dataset.kind must be synthetic or manifest");
  require(dataset.count >= 1 && dataset.test_count >= 0, "dataset counts must be positive");
  require(dataset.classes >= 2, "dataset.classes must be >= 2");
  require(probe.lr > 0.0 && probe.finetune_lr > 0.0, "probe learning rates must be > 0");
  require(probe.batch_size >= 1 && probe.epochs >= 0, "probe batch size/epochs invalid");
  weights.validate();
  encoder.validate();
  masker.validate();
  augment.validate();
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << "\n";
  return os.str();
}

std::string TrainConfig::hash() const { return sha256_hex(to_text()); }

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractViolation("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.sync();
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.n_masks = 5;
  c.epochs = 500;
  c.batch_size = 256;
  c.dataset.size = 96;
  c.encoder.backbone = models::Backbone::resnet18_style;
  c.encoder.width = 64;
  c.encoder.projection_dim = 128;
  c.masker.base_channels = 32;
  c.masker.depth = 4;
  c.sync();
  return c;
}

}  // namespace seqmask
