#pragma once

// Run configuration and its flat `key = value` text form.
//
// Text format: one `key = value` per line; blank lines and lines starting
// with '#' are ignored; unknown keys are an error. Keys:
//
//   seed, masking (sequential|random|none), n_masks, epochs, batch_size,
//   encoder_lr, masker_lr, momentum, warmup_epochs,
//   budget_b, budget_weight, overlap_weight, consistency_weight, temperature,
//   dataset.kind (synthetic|manifest), dataset.seed, dataset.count,
//   dataset.test_count, dataset.size, dataset.classes, dataset.root,
//   dataset.manifest, dataset.test_manifest,
//   encoder.backbone (small_conv|resnet18_style), encoder.width,
//   encoder.projection_dim,
//   masker.base_channels, masker.depth,
//   augment.crop_min, augment.crop_max, augment.flip_prob,
//   augment.jitter_strength, augment.jitter_prob, augment.grayscale_prob,
//   probe.lr, probe.finetune_lr, probe.batch_size, probe.epochs,
//   probe.weight_decay, probe.momentum

#include <cstdint>
#include <filesystem>
#include <string>

#include "seqmask/data.hpp"
#include "seqmask/losses.hpp"
#include "seqmask/models.hpp"

namespace seqmask {

enum class MaskingMode { sequential, random, none };

std::string to_string(MaskingMode m);
MaskingMode masking_from_string(const std::string& s);

struct DatasetSpec {
  std::string kind = "synthetic";
  uint64_t seed = 0;
  int64_t count = 2000;
  int64_t test_count = 500;
  int64_t size = 64;
  int64_t classes = 4;
  std::string root;
  std::string manifest;
  std::string test_manifest;
};

struct ProbeSettings {
  double lr = 0.1;
  double finetune_lr = 0.5;
  int64_t batch_size = 256;
  int64_t epochs = 30;
  double weight_decay = 0.0;
  double momentum = 0.9;
};

struct TrainConfig {
  uint64_t seed = 0;
  MaskingMode masking = MaskingMode::sequential;
  int64_t n_masks = 3;
  int64_t epochs = 30;
  int64_t batch_size = 128;
  double encoder_lr = 0.11;
  double masker_lr = 0.11;
  double momentum = 0.9;
  int64_t warmup_epochs = 10;
  losses::PenaltyWeights weights;
  DatasetSpec dataset;
  models::EncoderConfig encoder;
  models::MaskerConfig masker;
  data::AugmentationConfig augment;
  ProbeSettings probe;

  /// Copies shared fields (n_masks, image size, channels, seeds) into the
  /// nested model/augmentation configs. Called by the parser and by pretrain.
  void sync();
  void validate() const;

  /// Canonical text form; every key, fixed order, round-trips through parse.
  std::string to_text() const;
  /// SHA-256 of to_text().
  std::string hash() const;

  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);

  /// Full-scale preset: batch 256, 500 epochs, N = 5, ResNet18 encoder.
  static TrainConfig full_scale();
};

/// Applies a single `key = value` override; throws ContractViolation on
/// unknown keys or malformed values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace seqmask
