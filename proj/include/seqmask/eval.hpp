#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "seqmask/data.hpp"
#include "seqmask/models.hpp"

namespace seqmask::eval {

enum class ProbeMode { linear, finetune };

struct ProbeConfig {
  double lr = 0.1;
  int64_t batch_size = 256;
  int64_t epochs = 30;
  double weight_decay = 0.0;
  double momentum = 0.9;
  ProbeMode mode = ProbeMode::linear;
  uint64_t seed = 0;

  void validate() const;
  static ProbeConfig linear_default();
  static ProbeConfig finetune_default();
};

/// Trains an affine classifier on frozen pre-projection features and returns
/// top-1 accuracy on `test`. The encoder is not modified.
double linear_probe(models::EncoderState& encoder, const data::Dataset& train,
                    const data::Dataset& test, const ProbeConfig& cfg);

/// Trains a copy of the encoder together with the classifier; returns top-1
/// accuracy on `test`. The caller's encoder is not modified.
double fine_tune(const models::EncoderState& encoder, const data::Dataset& train,
                 const data::Dataset& test, const ProbeConfig& cfg);

struct MaskReport {
  /// |mean(m_k) - b| per slot, with mean(m_k) taken over the whole dataset.
  std::vector<double> mean_budget_error;
  std::vector<double> slot_mean;
  /// N x N; entry (i,j) is the dataset mean of (1/HW) <m_i, m_j>.
  std::vector<std::vector<double>> pairwise_overlap;
  /// Per ground-truth object (dataset order): max IoU over slots of the
  /// 0.5-thresholded mask.
  std::vector<double> best_match_iou;
  /// Per slot: mean over images of the IoU with the best-matching object.
  std::vector<double> slot_match_iou;
  /// Soft-mask counterpart of slot_match_iou, sum(min)/sum(max).
  std::vector<double> slot_soft_iou;
  int64_t empty_slots = 0;

  double mean_best_match_iou() const;
  /// Mean of the off-diagonal entries of pairwise_overlap.
  double mean_pairwise_overlap() const;
};

/// Core of mask_metrics on precomputed masks: masks[k] is [D, H, W] for slot k
/// over the D dataset items. Requires every item to carry gt_masks.
MaskReport mask_report(const std::vector<torch::Tensor>& masks, const data::Dataset& ds, double b);

/// Runs the masker (evaluation mode) over unaugmented images and scores it.
MaskReport mask_metrics(models::MaskerState& masker, const data::Dataset& ds, double b);

/// Generates the full mask sequence for every item, [D, H, W] per slot.
std::vector<torch::Tensor> dataset_masks(models::MaskerState& masker, const data::Dataset& ds);

/// slot_match_iou of iid random binary masks that remove a b fraction of
/// pixels, averaged over `n_slots` slots.
double random_mask_baseline_iou(const data::Dataset& ds, double b, int64_t n_slots, uint64_t seed);

/// Row per image: the image, then one grayscale panel per mask in order.
/// Returns uint8 [rows*H, (N+1)*W, 3].
torch::Tensor render_mask_grid(const torch::Tensor& images, const std::vector<torch::Tensor>& masks);

/// Panel (row, col) of a rendered grid as float [3, H, W] in [0,1].
torch::Tensor grid_panel(const torch::Tensor& grid, int64_t row, int64_t col, int64_t h, int64_t w);

/// Renders the masker's output for up to 16 images and writes a PNG.
void visualize_masks(models::MaskerState& masker, const torch::Tensor& images,
                     const std::filesystem::path& out_path);

void write_png(const torch::Tensor& grid, const std::filesystem::path& out_path);
torch::Tensor read_png(const std::filesystem::path& path);

/// {"checkpoint":..,"dataset":..,"metric":..,"value":..,"seed":..}
std::string metric_line(const std::string& checkpoint, const std::string& dataset,
                        const std::string& metric, double value, uint64_t seed);

}  // namespace seqmask::eval
