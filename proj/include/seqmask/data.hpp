#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace seqmask::data {

struct LabeledImage {
  torch::Tensor pixels;  // float32 [C, H, W] in [0,1]
  int64_t label = 0;
  std::vector<torch::Tensor> gt_masks;  // bool [H, W], pairwise disjoint
};

using Dataset = std::vector<LabeledImage>;

enum class ShapeKind { circle, square, triangle };

/// The shape multiset that defines each synthetic class, in label order.
const std::vector<std::vector<ShapeKind>>& class_shapes();

/// Deterministic multi-object shapes on a textured background.
/// Requires count >= 1, size >= 32, 2 <= classes <= 8. Item i depends only on
/// (seed, i), so any subset can be materialised independently.
Dataset synthetic_shapes(uint64_t seed, int64_t count, int64_t size, int64_t classes);
LabeledImage synthetic_shape_item(uint64_t seed, int64_t index, int64_t size, int64_t classes);

struct AugmentationConfig {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double color_jitter_strength = 0.5;
  /// Probability that colour jitter is applied at all (when strength > 0).
  double color_jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  uint64_t seed = 0;

  void validate() const;
};

/// Two independent draws of crop/flip/jitter/grayscale. Deterministic in
/// (cfg.seed, item_seed). gt_masks are never touched.
std::pair<torch::Tensor, torch::Tensor> augment_pair(const LabeledImage& img,
                                                     const AugmentationConfig& cfg,
                                                     uint64_t item_seed);

/// Reads `relative_path<TAB>label` records, decodes each image relative to
/// `root`, converts to RGB float in [0,1] and resizes to size x size.
Dataset load_image_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest,
                           int64_t size, int64_t num_classes);

/// Writes images as PNG plus `manifest.tsv`; gt masks (if any) go to
/// `<name>_masks.png` as an 8-bit object-id map (0 = background).
void export_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Stacks pixels of the given items into [B, C, H, W].
torch::Tensor stack_pixels(const Dataset& ds, const std::vector<int64_t>& indices);
torch::Tensor stack_pixels(const Dataset& ds);
torch::Tensor labels_tensor(const Dataset& ds);

/// Fraction of pixels covered by the union of gt masks.
double foreground_fraction(const LabeledImage& img);

}  // namespace seqmask::data
