#include "seqmask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "seqmask/errors.hpp"

namespace seqmask::eval {

using detail::require;

void ProbeConfig::validate() const {
  require(lr > 0.0, "probe lr must be > 0");
  require(batch_size >= 1, "probe batch_size must be >= 1");
  require(epochs >= 0, "probe epochs must be >= 0");
  require(weight_decay >= 0.0, "probe weight_decay must be >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "probe momentum must lie in [0,1)");
}

ProbeConfig ProbeConfig::linear_default() { return ProbeConfig{}; }

ProbeConfig ProbeConfig::finetune_default() {
  ProbeConfig c;
  c.lr = 0.5;
  c.mode = ProbeMode::finetune;
  return c;
}

namespace {

constexpr int64_t kEvalBatch = 256;

int64_t class_count(const data::Dataset& train, const data::Dataset& test) {
  require(!train.empty(), "probe: empty training set");
  std::set<int64_t> train_labels;
  int64_t hi = 0;
  for (const auto& item : train) {
    train_labels.insert(item.label);
    hi = std::max(hi, item.label);
  }
  for (const auto& item : test) {
    require(train_labels.count(item.label) > 0,
            "probe: test label " + std::to_string(item.label) + " absent from the training set");
  }
  return hi + 1;
}

torch::Tensor frozen_features(models::EncoderState& enc, const data::Dataset& ds) {
  std::vector<torch::Tensor> parts;
  for (std::size_t start = 0; start < ds.size(); start += kEvalBatch) {
    std::vector<int64_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + kEvalBatch); ++i) idx.push_back(i);
    parts.push_back(models::encode_features(enc, data::stack_pixels(ds, idx)));
  }
  return torch::cat(parts);
}

torch::optim::SGD make_sgd(std::vector<torch::Tensor> params, const ProbeConfig& cfg) {
  return torch::optim::SGD(std::move(params), torch::optim::SGDOptions(cfg.lr)
                                                  .momentum(cfg.momentum)
                                                  .weight_decay(cfg.weight_decay));
}

double accuracy(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (labels.numel() == 0) return 0.0;
  return logits.argmax(1).eq(labels).to(torch::kFloat64).mean().item<double>();
}

// Calls fn(indices) for every minibatch of one epoch.
template <typename Fn>
void for_each_batch(int64_t n, int64_t batch, at::Generator& gen, Fn fn) {
  auto perm = torch::randperm(n, gen, torch::kLong);
  for (int64_t start = 0; start < n; start += batch) {
    fn(perm.slice(0, start, std::min(n, start + batch)));
  }
}

}  // namespace

double linear_probe(models::EncoderState& encoder, const data::Dataset& train,
                    const data::Dataset& test, const ProbeConfig& cfg) {
  cfg.validate();
  require(cfg.mode == ProbeMode::linear, "linear_probe: config mode must be linear");
  const auto classes = class_count(train, test);
  auto x_train = frozen_features(encoder, train);
  auto y_train = data::labels_tensor(train);

  torch::manual_seed(cfg.seed);
  torch::nn::Linear head(x_train.size(1), classes);
  auto opt = make_sgd(head->parameters(), cfg);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for_each_batch(x_train.size(0), cfg.batch_size, gen, [&](const torch::Tensor& idx) {
      opt.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(head(x_train.index_select(0, idx)),
                                                       y_train.index_select(0, idx));
      loss.backward();
      opt.step();
    });
  }
  if (test.empty()) return 0.0;
  torch::NoGradGuard guard;
  return accuracy(head(frozen_features(encoder, test)), data::labels_tensor(test));
}

double fine_tune(const models::EncoderState& encoder, const data::Dataset& train,
                 const data::Dataset& test, const ProbeConfig& cfg) {
  cfg.validate();
  require(cfg.mode == ProbeMode::finetune, "fine_tune: config mode must be finetune");
  const auto classes = class_count(train, test);
  auto enc = models::clone(encoder);
  auto x_train = data::stack_pixels(train);
  auto y_train = data::labels_tensor(train);

  torch::manual_seed(cfg.seed);
  torch::nn::Linear head(enc.net->feature_dim(), classes);
  auto params = enc.net->parameters();
  for (auto& p : head->parameters()) params.push_back(p);
  auto opt = make_sgd(params, cfg);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  enc.net->train();
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for_each_batch(x_train.size(0), cfg.batch_size, gen, [&](const torch::Tensor& idx) {
      if (idx.size(0) < 2) return;  // BatchNorm needs two samples
      opt.zero_grad();
      auto logits = head(enc.net->features(x_train.index_select(0, idx)));
      auto loss = torch::nn::functional::cross_entropy(logits, y_train.index_select(0, idx));
      loss.backward();
      opt.step();
    });
  }
  if (test.empty()) return 0.0;
  std::vector<torch::Tensor> logits;
  for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
    std::vector<int64_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalBatch); ++i) idx.push_back(i);
    torch::NoGradGuard guard;
    logits.push_back(head(models::encode_features(enc, data::stack_pixels(test, idx))));
  }
  return accuracy(torch::cat(logits), data::labels_tensor(test));
}

double MaskReport::mean_best_match_iou() const {
  if (best_match_iou.empty()) return 0.0;
  double s = 0.0;
  for (double v : best_match_iou) s += v;
  return s / static_cast<double>(best_match_iou.size());
}

double MaskReport::mean_pairwise_overlap() const {
  const auto n = pairwise_overlap.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) s += pairwise_overlap[i][j];
    }
  }
  return s / static_cast<double>(n * (n - 1));
}

MaskReport mask_report(const std::vector<torch::Tensor>& masks, const data::Dataset& ds, double b) {
  require(!masks.empty(), "mask_report: need at least one slot");
  require(!ds.empty(), "mask_report: empty dataset");
  for (const auto& item : ds) require(!item.gt_masks.empty(), "mask_report: item without gt_masks");
  const auto n = static_cast<int64_t>(masks.size());
  const auto d = static_cast<int64_t>(ds.size());
  for (const auto& m : masks) {
    require(m.dim() == 3 && m.size(0) == d, "mask_report: masks must be [D,H,W] per slot");
  }
  torch::NoGradGuard guard;

  MaskReport r;
  r.pairwise_overlap.assign(n, std::vector<double>(n, 0.0));
  std::vector<torch::Tensor> soft, hard;
  for (int64_t k = 0; k < n; ++k) {
    soft.push_back(masks[k].to(torch::kFloat64).flatten(1));
    hard.push_back(masks[k].ge(0.5).to(torch::kFloat64).flatten(1));
    const double mean = soft[k].mean().item<double>();
    r.slot_mean.push_back(mean);
    r.mean_budget_error.push_back(std::abs(mean - b));
    if (mean < 0.01) ++r.empty_slots;
  }
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i; j < n; ++j) {
      const double v = (soft[i] * soft[j]).mean().item<double>();
      r.pairwise_overlap[i][j] = v;
      r.pairwise_overlap[j][i] = v;
    }
  }

  auto hard_all = torch::stack(hard, 1);  // [D, N, HW]
  auto soft_all = torch::stack(soft, 1);
  std::vector<double> slot_iou(n, 0.0), slot_soft(n, 0.0);
  for (int64_t i = 0; i < d; ++i) {
    std::vector<torch::Tensor> gts;
    for (const auto& g : ds[i].gt_masks) gts.push_back(g.to(torch::kFloat64).flatten());
    auto gt = torch::stack(gts);       // [G, HW]
    auto t = hard_all[i];              // [N, HW]
    auto inter = torch::matmul(t, gt.t());  // [N, G]
    auto uni = t.sum(1, true) + gt.sum(1).unsqueeze(0) - inter;
    auto iou = inter / uni.clamp_min(1.0);
    auto s = soft_all[i];
    auto soft_inter = torch::matmul(s, gt.t());
    auto soft_uni = s.sum(1, true) + gt.sum(1).unsqueeze(0) - soft_inter;
    auto soft_iou = soft_inter / soft_uni.clamp_min(1e-12);

    auto per_object = std::get<0>(iou.max(0));
    for (int64_t g = 0; g < per_object.size(0); ++g) r.best_match_iou.push_back(per_object[g].item<double>());
    auto per_slot = std::get<0>(iou.max(1));
    auto per_slot_soft = std::get<0>(soft_iou.max(1));
    for (int64_t k = 0; k < n; ++k) {
      slot_iou[k] += per_slot[k].item<double>();
      slot_soft[k] += per_slot_soft[k].item<double>();
    }
  }
  for (int64_t k = 0; k < n; ++k) {
    r.slot_match_iou.push_back(slot_iou[k] / static_cast<double>(d));
    r.slot_soft_iou.push_back(slot_soft[k] / static_cast<double>(d));
  }
  return r;
}

std::vector<torch::Tensor> dataset_masks(models::MaskerState& masker, const data::Dataset& ds) {
  const bool was_training = masker.net->is_training();
  masker.net->eval();
  torch::NoGradGuard guard;
  std::vector<std::vector<torch::Tensor>> per_slot(masker.config.n_masks);
  for (std::size_t start = 0; start < ds.size(); start += 64) {
    std::vector<int64_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + 64); ++i) idx.push_back(i);
    auto masks = models::generate_mask_sequence(masker, data::stack_pixels(ds, idx));
    for (std::size_t k = 0; k < masks.size(); ++k) per_slot[k].push_back(masks[k]);
  }
  masker.net->train(was_training);
  std::vector<torch::Tensor> out;
  for (auto& parts : per_slot) out.push_back(torch::cat(parts));
  return out;
}

MaskReport mask_metrics(models::MaskerState& masker, const data::Dataset& ds, double b) {
  for (const auto& item : ds) require(!item.gt_masks.empty(), "mask_metrics: item without gt_masks");
  return mask_report(dataset_masks(masker, ds), ds, b);
}

double random_mask_baseline_iou(const data::Dataset& ds, double b, int64_t n_slots, uint64_t seed) {
  require(!ds.empty(), "random_mask_baseline_iou: empty dataset");
  require(b > 0.0 && b < 1.0, "random_mask_baseline_iou: b must lie in (0,1)");
  const auto d = static_cast<int64_t>(ds.size());
  const auto h = ds.front().pixels.size(1), w = ds.front().pixels.size(2);
  const auto hw = h * w;
  const auto k = static_cast<int64_t>(std::llround(b * static_cast<double>(hw)));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<torch::Tensor> masks;
  for (int64_t s = 0; s < n_slots; ++s) {
    auto idx = std::get<1>(torch::rand({d, hw}, gen).topk(k, 1));
    masks.push_back(torch::zeros({d, hw}).scatter_(1, idx, 1.0).view({d, h, w}));
  }
  const auto r = mask_report(masks, ds, b);
  double s = 0.0;
  for (double v : r.slot_match_iou) s += v;
  return s / static_cast<double>(n_slots);
}

torch::Tensor render_mask_grid(const torch::Tensor& images, const std::vector<torch::Tensor>& masks) {
  require(images.dim() == 4 && images.size(1) == 3, "render_mask_grid: images must be [B,3,H,W]");
  const auto b = images.size(0), h = images.size(2), w = images.size(3);
  for (const auto& m : masks) {
    require(m.dim() == 3 && m.size(0) == b && m.size(1) == h && m.size(2) == w,
            "render_mask_grid: masks must be [B,H,W]");
  }
  auto to_u8 = [](const torch::Tensor& t) {
    return (t.to(torch::kFloat32) * 255.0).round().clamp(0, 255).to(torch::kUInt8);
  };
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < b; ++i) {
    std::vector<torch::Tensor> panels{to_u8(images[i].permute({1, 2, 0}))};
    for (const auto& m : masks) panels.push_back(to_u8(m[i]).unsqueeze(2).expand({h, w, 3}));
    rows.push_back(torch::cat(panels, 1));
  }
  return torch::cat(rows, 0).contiguous();
}

torch::Tensor grid_panel(const torch::Tensor& grid, int64_t row, int64_t col, int64_t h, int64_t w) {
  return grid.slice(0, row * h, (row + 1) * h)
             .slice(1, col * w, (col + 1) * w)
             .permute({2, 0, 1})
             .to(torch::kFloat32) /
         255.0;
}

void write_png(const torch::Tensor& grid, const std::filesystem::path& out_path) {
  require(grid.dim() == 3 && grid.size(2) == 3 && grid.scalar_type() == torch::kUInt8,
          "write_png: expected uint8 [H,W,3]");
  auto g = grid.contiguous();
  cv::Mat rgb(static_cast<int>(g.size(0)), static_cast<int>(g.size(1)), CV_8UC3, g.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<uchar> bytes;
  if (!cv::imencode(".png", bgr, bytes)) throw IoError("cannot encode PNG for: " + out_path.string());
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image: " + out_path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write image: " + out_path.string());
}

torch::Tensor read_png(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
}

void visualize_masks(models::MaskerState& masker, const torch::Tensor& images,
                     const std::filesystem::path& out_path) {
  require(images.dim() == 4 && images.size(0) >= 1 && images.size(0) <= 16,
          "visualize_masks: between 1 and 16 images");
  const bool was_training = masker.net->is_training();
  masker.net->eval();
  std::vector<torch::Tensor> masks;
  {
    torch::NoGradGuard guard;
    masks = models::generate_mask_sequence(masker, images);
  }
  masker.net->train(was_training);
  write_png(render_mask_grid(images, masks), out_path);
}

std::string metric_line(const std::string& checkpoint, const std::string& dataset,
                        const std::string& metric, double value, uint64_t seed) {
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["dataset"] = dataset;
  j["metric"] = metric;
  j["value"] = value;
  j["seed"] = seed;
  return j.dump();
}

}  // namespace seqmask::eval
