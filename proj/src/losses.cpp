#include "seqmask/losses.hpp"

#include <cmath>
#include <string>

#include "seqmask/errors.hpp"

namespace seqmask::losses {

using detail::require;

namespace {

void check_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + ": non-finite input");
  }
}

// Promotes [H, W] to [1, H, W]; validates range.
torch::Tensor as_mask_batch(const torch::Tensor& mask, const char* what) {
  require(mask.dim() == 2 || mask.dim() == 3,
          std::string(what) + ": mask must be [H,W] or [B,H,W]");
  require(mask.size(-1) >= 1 && mask.size(-2) >= 1,
          std::string(what) + ": empty mask");
  check_finite(mask, what);
  auto lo = mask.min().item<double>();
  auto hi = mask.max().item<double>();
  require(lo >= 0.0 && hi <= 1.0, std::string(what) + ": mask values outside [0,1]");
  return mask.dim() == 2 ? mask.unsqueeze(0) : mask;
}

}  // namespace

void PenaltyWeights::validate() const {
  require(budget_b > 0.0 && budget_b < 1.0, "budget_b must lie in (0,1)");
  require(temperature_tau > 0.0, "temperature must be positive");
  require(budget_weight >= 0.0 && overlap_weight >= 0.0 && consistency_weight >= 0.0,
          "penalty weights must be nonnegative");
}

torch::Tensor nt_xent_masked(const torch::Tensor& za, const torch::Tensor& zb, double tau) {
  require(za.dim() == 2 && zb.dim() == 2, "nt_xent_masked: embeddings must be [B,d]");
  require(za.sizes() == zb.sizes(), "nt_xent_masked: zA and zB shapes differ");
  require(za.size(0) >= 2, "nt_xent_masked: batch size must be at least 2");
  require(tau > 0.0, "nt_xent_masked: temperature must be positive");
  check_finite(za, "nt_xent_masked");
  check_finite(zb, "nt_xent_masked");

  const auto b = za.size(0);
  auto z = torch::cat({za, zb}, 0);
  auto norms = z.norm(2, /*dim=*/1, /*keepdim=*/true);
  if ((norms == 0).any().item<bool>()) {
    throw NumericError("nt_xent_masked: zero-norm embedding");
  }
  z = z / norms;

  auto logits = torch::matmul(z, z.t()) / tau;
  auto self = torch::eye(2 * b, torch::TensorOptions().dtype(torch::kBool));
  logits = logits.masked_fill(self, -std::numeric_limits<double>::infinity());

  // Anchor i pairs with i+B, anchor i+B with i.
  auto idx = torch::arange(2 * b, torch::kLong);
  auto positives = (idx + b).remainder(2 * b);
  return torch::nn::functional::cross_entropy(logits, positives);
}

torch::Tensor budget_penalty(const torch::Tensor& mask, double b) {
  require(b > 0.0 && b < 1.0, "budget_penalty: b must lie in (0,1)");
  auto m = as_mask_batch(mask, "budget_penalty");
  auto frac = m.mean({1, 2});
  return (frac - b).square().mean();
}

torch::Tensor overlap_penalty(const torch::Tensor& mask, std::span<const torch::Tensor> prior) {
  auto m = as_mask_batch(mask, "overlap_penalty");
  if (prior.empty()) return torch::zeros({}, m.options());
  torch::Tensor sum;
  for (const auto& p : prior) {
    auto pm = as_mask_batch(p, "overlap_penalty");
    require(pm.sizes() == m.sizes(), "overlap_penalty: mask shape mismatch");
    sum = sum.defined() ? sum + pm : pm;
  }
  return (m * sum).mean({1, 2}).mean();
}

torch::Tensor average_pool_3x3(const torch::Tensor& mask) {
  auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
  auto pooled = torch::avg_pool2d(m.unsqueeze(1), /*kernel_size=*/{3, 3}, /*stride=*/{1, 1},
                                  /*padding=*/{1, 1}, /*ceil_mode=*/false,
                                  /*count_include_pad=*/false)
                    .squeeze(1);
  return mask.dim() == 2 ? pooled.squeeze(0) : pooled;
}

torch::Tensor consistency_penalty(const torch::Tensor& mask) {
  auto m = as_mask_batch(mask, "consistency_penalty");
  auto diff = m - average_pool_3x3(m);
  return diff.square().sum({1, 2}).mean();
}

double encoder_objective(std::span<const double> per_mask_losses) {
  require(!per_mask_losses.empty(), "encoder_objective: need at least one mask");
  double s = 0.0;
  for (double v : per_mask_losses) s += v;
  return s / static_cast<double>(per_mask_losses.size());
}

torch::Tensor encoder_objective(std::span<const torch::Tensor> per_mask_losses) {
  require(!per_mask_losses.empty(), "encoder_objective: need at least one mask");
  return torch::stack(std::vector<torch::Tensor>(per_mask_losses.begin(), per_mask_losses.end()))
      .mean();
}

LossBreakdown adversary_objective(std::span<const PenaltyTerms> per_mask, const PenaltyWeights& w) {
  require(!per_mask.empty(), "adversary_objective: need at least one mask");
  w.validate();
  LossBreakdown out;
  double adv = 0.0;
  for (const auto& t : per_mask) {
    out.contrastive += t.contrastive;
    out.budget += t.budget;
    out.overlap += t.overlap;
    out.consistency += t.consistency;
    adv += t.contrastive - w.budget_weight * t.budget - w.overlap_weight * t.overlap -
           w.consistency_weight * t.consistency;
  }
  const auto n = static_cast<double>(per_mask.size());
  out.contrastive /= n;
  out.budget /= n;
  out.overlap /= n;
  out.consistency /= n;
  out.adversary_objective = adv / n;
  out.encoder_objective = out.contrastive;
  return out;
}

torch::Tensor adversary_objective(std::span<const torch::Tensor> contrastive,
                                  std::span<const torch::Tensor> budget,
                                  std::span<const torch::Tensor> overlap,
                                  std::span<const torch::Tensor> consistency,
                                  const PenaltyWeights& w) {
  const auto n = contrastive.size();
  require(n >= 1, "adversary_objective: need at least one mask");
  require(budget.size() == n && overlap.size() == n && consistency.size() == n,
          "adversary_objective: term lists differ in length");
  w.validate();
  torch::Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    auto term = contrastive[i] - w.budget_weight * budget[i] - w.overlap_weight * overlap[i] -
                w.consistency_weight * consistency[i];
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(n);
}

}  // namespace seqmask::losses
