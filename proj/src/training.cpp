#include "seqmask/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "seqmask/errors.hpp"

namespace seqmask::training {

using detail::require;
using losses::PenaltyTerms;

namespace {

std::mt19937_64 make_rng(std::initializer_list<uint64_t> parts) {
  std::vector<uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<uint32_t>(p));
    words.push_back(static_cast<uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

uint64_t derive_seed(std::initializer_list<uint64_t> parts) { return make_rng(parts)(); }

}  // namespace

std::string telemetry_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["contrastive"] = r.breakdown.contrastive;
  j["budget"] = r.breakdown.budget;
  j["overlap"] = r.breakdown.overlap;
  j["consistency"] = r.breakdown.consistency;
  j["adversary_objective"] = r.breakdown.adversary_objective;
  j["encoder_objective"] = r.breakdown.encoder_objective;
  j["mask_mean"] = r.mask_mean;
  j["mask_pairwise_overlap"] = r.mask_pairwise_overlap;
  j["lr_encoder"] = r.lr_encoder;
  j["lr_masker"] = r.lr_masker;
  return j.dump();
}

StepRecord parse_telemetry_line(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  StepRecord r;
  r.step = j.at("step").get<int64_t>();
  r.breakdown.contrastive = j.at("contrastive").get<double>();
  r.breakdown.budget = j.at("budget").get<double>();
  r.breakdown.overlap = j.at("overlap").get<double>();
  r.breakdown.consistency = j.at("consistency").get<double>();
  r.breakdown.adversary_objective = j.at("adversary_objective").get<double>();
  r.breakdown.encoder_objective = j.at("encoder_objective").get<double>();
  r.mask_mean = j.at("mask_mean").get<double>();
  r.mask_pairwise_overlap = j.at("mask_pairwise_overlap").get<double>();
  r.lr_encoder = j.at("lr_encoder").get<double>();
  r.lr_masker = j.at("lr_masker").get<double>();
  return r;
}

NonFiniteLoss::NonFiniteLoss(StepRecord record, const std::string& cause)
    : NumericError("non-finite loss at step " + std::to_string(record.step) +
                   (cause.empty() ? "" : " (" + cause + ")") + ": " + telemetry_line(record)),
      record_(std::move(record)) {}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak) {
  require(total_steps >= 1, "lr_schedule: total_steps must be >= 1");
  require(warmup_steps >= 0 && warmup_steps < total_steps,
          "lr_schedule: warmup_steps must lie in [0, total_steps)");
  require(step >= 0 && step <= total_steps, "lr_schedule: step must lie in [0, total_steps]");
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

uint64_t encoder_init_seed(uint64_t run_seed) { return derive_seed({run_seed, 1}); }
uint64_t masker_init_seed(uint64_t run_seed) { return derive_seed({run_seed, 2}); }

std::vector<std::vector<int64_t>> epoch_batches(uint64_t run_seed, int64_t epoch, int64_t count,
                                                int64_t batch_size) {
  require(batch_size >= 1 && count >= batch_size, "dataset smaller than one batch");
  std::vector<int64_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng({run_seed, 3, static_cast<uint64_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start + batch_size <= count; start += batch_size) {
    batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
  }
  return batches;
}

std::pair<torch::Tensor, torch::Tensor> batch_views(const data::Dataset& ds,
                                                    const std::vector<int64_t>& indices,
                                                    const data::AugmentationConfig& aug,
                                                    int64_t epoch) {
  std::vector<torch::Tensor> as, bs;
  as.reserve(indices.size());
  bs.reserve(indices.size());
  const auto count = static_cast<uint64_t>(ds.size());
  for (auto i : indices) {
    auto [a, b] = data::augment_pair(ds.at(i), aug, static_cast<uint64_t>(epoch) * count + i);
    as.push_back(a);
    bs.push_back(b);
  }
  return {torch::stack(as), torch::stack(bs)};
}

torch::Tensor random_masks(int64_t batch, int64_t size, double b, uint64_t seed) {
  require(b > 0.0 && b < 1.0, "random_masks: b must lie in (0,1)");
  const int64_t hw = size * size;
  const auto k = static_cast<int64_t>(std::llround(b * static_cast<double>(hw)));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto scores = torch::rand({batch, hw}, gen);
  auto idx = std::get<1>(scores.topk(k, 1));
  auto m = torch::zeros({batch, hw});
  m.scatter_(1, idx, 1.0);
  return m.view({batch, size, size});
}

namespace {

void set_lr(torch::optim::SGD& opt, double lr) {
  for (auto& group : opt.param_groups()) {
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
  }
}

// Disables gradients for a module's parameters for the lifetime of the scope.
struct FrozenScope {
  torch::nn::Module& module;
  explicit FrozenScope(torch::nn::Module& m) : module(m) {
    for (auto& p : module.parameters()) p.requires_grad_(false);
  }
  ~FrozenScope() {
    for (auto& p : module.parameters()) p.requires_grad_(true);
  }
};

double scalar(const torch::Tensor& t) { return t.item<double>(); }

// Per-slot penalty values and mask statistics for telemetry.
void fill_mask_stats(const std::vector<torch::Tensor>& masks, const losses::PenaltyWeights& w,
                     std::vector<PenaltyTerms>& terms, StepRecord& rec) {
  torch::NoGradGuard guard;
  rec.slot_means.clear();
  double mean_sum = 0.0;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    terms[k].budget = scalar(losses::budget_penalty(masks[k], w.budget_b));
    terms[k].overlap = scalar(losses::overlap_penalty(masks[k], {masks.data(), k}));
    terms[k].consistency = scalar(losses::consistency_penalty(masks[k]));
    const double mean = scalar(masks[k].mean());
    rec.slot_means.push_back(mean);
    mean_sum += mean;
  }
  rec.mask_mean = masks.empty() ? 0.0 : mean_sum / static_cast<double>(masks.size());
  double pair_sum = 0.0;
  int64_t pairs = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    for (std::size_t j = i + 1; j < masks.size(); ++j) {
      pair_sum += scalar((masks[i] * masks[j]).mean());
      ++pairs;
    }
  }
  rec.mask_pairwise_overlap = pairs == 0 ? 0.0 : pair_sum / static_cast<double>(pairs);
}

}  // namespace

PretrainResult pretrain(const TrainConfig& cfg_in, const data::Dataset& train,
                        const PretrainHooks& hooks) {
  TrainConfig cfg = cfg_in;
  cfg.sync();
  cfg.validate();
  const auto count = static_cast<int64_t>(train.size());
  require(count >= cfg.batch_size, "pretrain: dataset smaller than one batch");

  auto enc = models::make_encoder(cfg.encoder, encoder_init_seed(cfg.seed));
  auto msk = models::make_masker(cfg.masker, masker_init_seed(cfg.seed));
  {
    // Heads start at mean(m) ~ b; from 0.5 a strong budget weight drives the
    // sigmoids into saturation before any structure is learned.
    torch::NoGradGuard guard;
    const double b = cfg.weights.budget_b;
    for (auto& [name, t] : models::named_tensors(*msk.net)) {
      if (name.starts_with("heads.") && name.ends_with(".bias")) t.fill_(std::log(b / (1.0 - b)));
    }
  }
  const auto run_hash = cfg.hash();
  enc.meta.config_hash = run_hash;
  msk.meta.config_hash = run_hash;
  enc.meta.seed = msk.meta.seed = cfg.seed;
  enc.net->train();
  msk.net->train();

  torch::optim::SGD enc_opt(enc.net->parameters(),
                            torch::optim::SGDOptions(cfg.encoder_lr).momentum(cfg.momentum));
  torch::optim::SGD msk_opt(msk.net->parameters(),
                            torch::optim::SGDOptions(cfg.masker_lr).momentum(cfg.momentum));

  const int64_t steps_per_epoch = count / cfg.batch_size;
  const int64_t total = cfg.epochs * steps_per_epoch;
  const int64_t warmup = std::min(cfg.warmup_epochs * steps_per_epoch, total - 1);
  const auto& w = cfg.weights;
  const double tau = w.temperature_tau;
  const bool learn_masks = cfg.masking == MaskingMode::sequential && cfg.masker_lr > 0.0;

  PretrainResult result{enc, msk, {}};
  result.records.reserve(total);
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(cfg.seed, epoch, count, cfg.batch_size)) {
      StepRecord rec;
      rec.step = step;
      rec.lr_encoder = lr_schedule(step, total, warmup, cfg.encoder_lr);
      rec.lr_masker = learn_masks ? lr_schedule(step, total, warmup, cfg.masker_lr) : 0.0;
      set_lr(enc_opt, rec.lr_encoder);
      set_lr(msk_opt, rec.lr_masker);

      auto [view_a, view_b] = batch_views(train, batch, cfg.augment, epoch);

      // One masker forward serves both updates: the encoder step does not
      // touch masker parameters, so a second forward would be identical.
      std::vector<torch::Tensor> live;
      std::vector<torch::Tensor> masks;
      if (cfg.masking == MaskingMode::sequential) {
        if (learn_masks) {
          live = models::generate_mask_sequence(msk, view_b);
          for (const auto& m : live) masks.push_back(m.detach());
        } else {
          torch::NoGradGuard guard;
          masks = models::generate_mask_sequence(msk, view_b);
        }
      } else if (cfg.masking == MaskingMode::random) {
        for (int64_t k = 0; k < cfg.n_masks; ++k) {
          masks.push_back(random_masks(view_b.size(0), cfg.dataset.size, w.budget_b,
                                       derive_seed({cfg.seed, 4, static_cast<uint64_t>(step),
                                                    static_cast<uint64_t>(k)})));
        }
      }

      // Encoder update: masks are fixed inputs.
      enc_opt.zero_grad();
      torch::Tensor enc_obj;
      try {
        auto za = enc.net->forward(view_a);
        std::vector<torch::Tensor> per_mask;
        if (masks.empty()) {
          per_mask.push_back(losses::nt_xent_masked(za, enc.net->forward(view_b), tau));
        } else {
          for (const auto& m : masks) {
            per_mask.push_back(
                losses::nt_xent_masked(za, enc.net->forward(models::apply_mask(view_b, m)), tau));
          }
        }
        enc_obj = losses::encoder_objective(per_mask);

        std::vector<PenaltyTerms> terms(per_mask.size());
        for (std::size_t k = 0; k < per_mask.size(); ++k) terms[k].contrastive = scalar(per_mask[k]);
        fill_mask_stats(masks, w, terms, rec);
        rec.breakdown = losses::adversary_objective(terms, w);
      } catch (const NumericError& e) {
        rec.breakdown.contrastive = rec.breakdown.encoder_objective =
            rec.breakdown.adversary_objective = std::numeric_limits<double>::quiet_NaN();
        throw NonFiniteLoss(rec, e.what());
      }
      if (!std::isfinite(rec.breakdown.adversary_objective) ||
          !std::isfinite(rec.breakdown.encoder_objective)) {
        throw NonFiniteLoss(rec);
      }

      enc_obj.backward();
      enc_opt.step();
      if (hooks.on_update) hooks.on_update("encoder", result.encoder, result.masker);

      // Masker update: fresh encoder forward with the encoder frozen.
      if (learn_masks) {
        FrozenScope frozen(*enc.net);
        msk_opt.zero_grad();
        torch::Tensor adv;
        try {
          torch::Tensor za_frozen;
          {
            torch::NoGradGuard guard;
            za_frozen = enc.net->forward(view_a);
          }
          std::vector<torch::Tensor> c, bud, ovl, con;
          for (std::size_t k = 0; k < live.size(); ++k) {
            c.push_back(losses::nt_xent_masked(
                za_frozen, enc.net->forward(models::apply_mask(view_b, live[k])), tau));
            bud.push_back(losses::budget_penalty(live[k], w.budget_b));
            ovl.push_back(losses::overlap_penalty(live[k], {live.data(), k}));
            con.push_back(losses::consistency_penalty(live[k]));
          }
          adv = losses::adversary_objective(c, bud, ovl, con, w);
        } catch (const NumericError& e) {
          rec.breakdown.adversary_objective = std::numeric_limits<double>::quiet_NaN();
          throw NonFiniteLoss(rec, e.what());
        }
        if (!std::isfinite(adv.item<double>())) {
          rec.breakdown.adversary_objective = adv.item<double>();
          throw NonFiniteLoss(rec, "adversary objective");
        }
        (-adv).backward();
        msk_opt.step();
      }
      if (learn_masks && hooks.on_update) hooks.on_update("masker", result.encoder, result.masker);

      if (hooks.on_step) hooks.on_step(rec);
      result.records.push_back(std::move(rec));
      ++step;
    }
  }
  result.encoder.meta.step = step;
  result.masker.meta.step = step;
  return result;
}

namespace {

// dataset.root, else $SEQMASK_DATA_DIR, else the manifest's directory.
std::filesystem::path dataset_root(const DatasetSpec& d, const std::string& manifest) {
  if (!d.root.empty()) return d.root;
  if (const char* env = std::getenv("SEQMASK_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return std::filesystem::path(manifest).parent_path();
}

}  // namespace

data::Dataset make_train_dataset(const TrainConfig& cfg) {
  const auto& d = cfg.dataset;
  if (d.kind == "synthetic") return data::synthetic_shapes(d.seed, d.count, d.size, d.classes);
  require(!d.manifest.empty(), "dataset.manifest is required for manifest datasets");
  return data::load_image_dataset(dataset_root(d, d.manifest), d.manifest, d.size, d.classes);
}

data::Dataset make_test_dataset(const TrainConfig& cfg) {
  const auto& d = cfg.dataset;
  if (d.kind == "synthetic") {
    // Items past the training range: same distribution, disjoint draws.
    data::Dataset ds;
    ds.reserve(d.test_count);
    for (int64_t i = 0; i < d.test_count; ++i) {
      ds.push_back(data::synthetic_shape_item(d.seed, d.count + i, d.size, d.classes));
    }
    return ds;
  }
  require(!d.test_manifest.empty(), "dataset.test_manifest is required for manifest datasets");
  return data::load_image_dataset(dataset_root(d, d.test_manifest), d.test_manifest, d.size,
                                  d.classes);
}

}  // namespace seqmask::training
