#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "seqmask/config.hpp"
#include "seqmask/data.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/losses.hpp"
#include "seqmask/models.hpp"

namespace seqmask::training {

struct StepRecord {
  int64_t step = 0;
  losses::LossBreakdown breakdown;
  double mask_mean = 0.0;
  double mask_pairwise_overlap = 0.0;
  double lr_encoder = 0.0;
  double lr_masker = 0.0;
  /// Mean of each slot's mask (not part of the telemetry line).
  std::vector<double> slot_means;
};

/// One JSON object per line with the fixed field order:
/// step, contrastive, budget, overlap, consistency, adversary_objective,
/// encoder_objective, mask_mean, mask_pairwise_overlap, lr_encoder, lr_masker
std::string telemetry_line(const StepRecord& r);
StepRecord parse_telemetry_line(const std::string& line);

/// Thrown when a step produces a non-finite loss; carries the offending record.
class NonFiniteLoss : public NumericError {
 public:
  explicit NonFiniteLoss(StepRecord record, const std::string& cause = "");
  const StepRecord& record() const { return record_; }

 private:
  StepRecord record_;
};

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak);

struct PretrainResult {
  models::EncoderState encoder;
  models::MaskerState masker;
  std::vector<StepRecord> records;
};

struct PretrainHooks {
  /// Called after every step, in order.
  std::function<void(const StepRecord&)> on_step;
  /// Called after the encoder update and again after the masker update,
  /// with "encoder" or "masker" naming the update that just ran.
  std::function<void(const std::string&, models::EncoderState&, models::MaskerState&)> on_update;
};

/// Seeds used for model initialisation, derived from the run seed.
uint64_t encoder_init_seed(uint64_t run_seed);
uint64_t masker_init_seed(uint64_t run_seed);

/// Batch order for one epoch (drop-last batches of cfg.batch_size).
std::vector<std::vector<int64_t>> epoch_batches(uint64_t run_seed, int64_t epoch, int64_t count,
                                                int64_t batch_size);

/// Augmented views A and B of a batch; item seeds are epoch * count + index.
std::pair<torch::Tensor, torch::Tensor> batch_views(const data::Dataset& ds,
                                                    const std::vector<int64_t>& indices,
                                                    const data::AugmentationConfig& aug,
                                                    int64_t epoch);

/// Binary masks removing exactly round(b * H * W) uniformly chosen pixels.
torch::Tensor random_masks(int64_t batch, int64_t size, double b, uint64_t seed);

/// Alternating min-max optimisation: per batch, one SGD step for the encoder
/// on the mean masked contrastive loss, then one SGD step for the masker on
/// the negated adversary objective using a fresh forward pass.
PretrainResult pretrain(const TrainConfig& cfg, const data::Dataset& train,
                        const PretrainHooks& hooks = {});

/// Builds the training set described by cfg.dataset.
data::Dataset make_train_dataset(const TrainConfig& cfg);
data::Dataset make_test_dataset(const TrainConfig& cfg);

// Checkpoint container, little-endian:
//   magic      8 bytes  "SEQMASK1"
//   version    u32      kCheckpointVersion
//   meta_len   u64, meta  UTF-8 JSON {format_version, config_hash, step, seed,
//                                     encoder_hash, masker_hash, config}
//   count      u64
//   count x    { name_len u32, name, dtype u8 (0 = f32, 1 = i64),
//                ndim u32, dims i64[ndim], nbytes u64, raw data }
//   trailer    8 bytes  "SEQMASKE"
// Tensor names are "encoder.<path>" and "masker.<path>".
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  models::EncoderState encoder;
  models::MaskerState masker;
  int64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const models::EncoderState& encoder,
                     const models::MaskerState& masker, const TrainConfig& cfg, int64_t step);

/// Verifies magic, version, framing and that the stored hash matches the
/// stored config. Throws CorruptCheckpoint, VersionMismatch or HashMismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// As above, and additionally requires the stored config hash to equal
/// expected.hash().
Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& expected);

}  // namespace seqmask::training
