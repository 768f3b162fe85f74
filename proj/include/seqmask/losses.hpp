#pragma once

// Loss and penalty kernels for the encoder/masker game.
//
// Masks are real-valued occlusion maps in [0,1] where 1 means the pixel is
// removed. Every mask kernel accepts either a single mask [H, W] or a batch
// [B, H, W]; batched inputs are reduced by averaging the per-image value over
// the batch, so a batch of one behaves exactly like the single mask.
//
// All kernels return 0-dim tensors and are differentiable through autograd.

#include <span>
#include <vector>

#include <torch/torch.h>

namespace seqmask::losses {

struct PenaltyWeights {
  double budget_weight = 1.0;
  double overlap_weight = 1e-4;
  double consistency_weight = 1e-4;
  double budget_b = 0.25;
  double temperature_tau = 0.2;

  /// Throws ContractViolation unless b in (0,1), tau > 0 and weights >= 0.
  void validate() const;
};

/// Per-mask scalar terms, in the order they enter the adversary objective.
struct PenaltyTerms {
  double contrastive = 0.0;
  double budget = 0.0;
  double overlap = 0.0;
  double consistency = 0.0;
};

struct LossBreakdown {
  double contrastive = 0.0;
  double budget = 0.0;
  double overlap = 0.0;
  double consistency = 0.0;
  double adversary_objective = 0.0;
  double encoder_objective = 0.0;
};

/// Symmetric NT-Xent over the 2B views {zA, zB}. Row i of zA and row i of
/// zB form the positive pair; every other view is a negative. Rows are
/// L2-normalised internally. zB is the embedding of the masked view, but the
/// kernel does not care how it was produced.
torch::Tensor nt_xent_masked(const torch::Tensor& za, const torch::Tensor& zb,
                             double tau);

/// (mean(m) - b)^2, averaged over the batch.
torch::Tensor budget_penalty(const torch::Tensor& mask, double b);

/// (1/HW) * <m_i, sum of prior masks>, averaged over the batch. Exactly zero
/// for an empty prior.
torch::Tensor overlap_penalty(const torch::Tensor& mask,
                              std::span<const torch::Tensor> prior);

/// ||m - avgpool3x3(m)||^2 with stride 1 and same-size output. Border pixels
/// average over their in-bounds neighbours only.
torch::Tensor consistency_penalty(const torch::Tensor& mask);

/// The 3x3 valid-neighbour average pool used by consistency_penalty.
torch::Tensor average_pool_3x3(const torch::Tensor& mask);

/// Mean of the per-mask contrastive losses.
double encoder_objective(std::span<const double> per_mask_losses);
torch::Tensor encoder_objective(std::span<const torch::Tensor> per_mask_losses);

/// Combines per-mask terms into the masker's (maximised) objective:
///   (1/N) sum_i [c_i - wb*budget_i - wo*overlap_i - wc*consistency_i]
/// The other breakdown fields hold the per-term means.
LossBreakdown adversary_objective(std::span<const PenaltyTerms> per_mask,
                                  const PenaltyWeights& w);

/// Differentiable counterpart of adversary_objective on tensor terms. All
/// four spans must have the same length N >= 1.
torch::Tensor adversary_objective(std::span<const torch::Tensor> contrastive,
                                  std::span<const torch::Tensor> budget,
                                  std::span<const torch::Tensor> overlap,
                                  std::span<const torch::Tensor> consistency,
                                  const PenaltyWeights& w);

}  // namespace seqmask::losses
