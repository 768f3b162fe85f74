#include "seqmask/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "seqmask/errors.hpp"

namespace seqmask::data {

using detail::require;

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

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool bernoulli(std::mt19937_64& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform(rng, 0.0, 1.0) < p;
}

struct Box {
  int64_t x0, y0, d;
  bool overlaps(const Box& o, int64_t gap) const {
    return x0 < o.x0 + o.d + gap && o.x0 < x0 + d + gap && y0 < o.y0 + o.d + gap &&
           o.y0 < y0 + d + gap;
  }
};

bool inside(ShapeKind kind, const Box& b, double px, double py) {
  const double cx = b.x0 + b.d / 2.0;
  const double cy = b.y0 + b.d / 2.0;
  switch (kind) {
    case ShapeKind::circle: {
      const double r = b.d / 2.0;
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case ShapeKind::square:
      return px >= b.x0 && px < b.x0 + b.d && py >= b.y0 && py < b.y0 + b.d;
    case ShapeKind::triangle: {
      // Apex at top centre, base along the bottom edge.
      const double depth = py - b.y0;
      return depth >= 0.0 && depth <= b.d && std::abs(px - cx) <= depth / 2.0;
    }
  }
  return false;
}

// One attempt at rendering an item; returns false if placement or the
// foreground-fraction bounds fail.
bool render_item(std::mt19937_64& rng, int64_t size, int64_t classes, LabeledImage& out) {
  const int64_t label = std::uniform_int_distribution<int64_t>(0, classes - 1)(rng);
  auto kinds = class_shapes()[label];
  std::shuffle(kinds.begin(), kinds.end(), rng);
  const double shrink = kinds.size() >= 3 ? 0.85 : 1.0;

  std::vector<Box> boxes;
  for (auto kind : kinds) {
    const double lo = kind == ShapeKind::triangle ? 0.36 : 0.28;
    const double hi = kind == ShapeKind::triangle ? 0.50 : 0.42;
    const auto d = static_cast<int64_t>(std::lround(uniform(rng, lo, hi) * shrink * size));
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Box b{std::uniform_int_distribution<int64_t>(0, size - d)(rng),
            std::uniform_int_distribution<int64_t>(0, size - d)(rng), d};
      if (std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) { return b.overlaps(o, 1); })) {
        boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed) return false;
  }

  // Background: base colour, a low-frequency ripple and pixel noise.
  const int64_t hw = size * size;
  std::vector<float> pix(3 * hw);
  double base[3];
  for (auto& c : base) c = uniform(rng, 0.2, 0.8);
  const double fx = uniform(rng, 1.0, 4.0), fy = uniform(rng, 1.0, 4.0);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const double ripple =
          0.08 * std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) / size + phase);
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + ripple + uniform(rng, -0.04, 0.04);
        pix[c * hw + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  out.gt_masks.clear();
  std::vector<uint8_t> covered(hw, 0);
  int64_t fg = 0;
  for (std::size_t s = 0; s < kinds.size(); ++s) {
    double colour[3];
    double dist = 0.0;
    do {
      dist = 0.0;
      for (int c = 0; c < 3; ++c) {
        colour[c] = uniform(rng, 0.0, 1.0);
        dist += std::abs(colour[c] - base[c]);
      }
    } while (dist < 0.6);
    auto mask = torch::zeros({size, size}, torch::kBool);
    auto* mp = mask.data_ptr<bool>();
    int64_t count = 0;
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        if (!inside(kinds[s], boxes[s], x + 0.5, y + 0.5)) continue;
        const int64_t i = y * size + x;
        if (covered[i]) return false;
        covered[i] = 1;
        mp[i] = true;
        ++count;
        for (int c = 0; c < 3; ++c) {
          const double v = colour[c] + uniform(rng, -0.03, 0.03);
          pix[c * hw + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    if (count == 0) return false;
    fg += count;
    out.gt_masks.push_back(mask);
  }
  const double frac = static_cast<double>(fg) / static_cast<double>(hw);
  if (frac < 0.05 || frac > 0.6) return false;

  out.label = label;
  out.pixels = torch::from_blob(pix.data(), {3, size, size}, torch::kFloat32).clone();
  return true;
}

}  // namespace

const std::vector<std::vector<ShapeKind>>& class_shapes() {
  using enum ShapeKind;
  static const std::vector<std::vector<ShapeKind>> table = {
      {circle},         {square},           {triangle},
      {circle, square}, {circle, triangle}, {square, triangle},
      {circle, square, triangle}, {circle, circle, circle},
  };
  return table;
}

LabeledImage synthetic_shape_item(uint64_t seed, int64_t index, int64_t size, int64_t classes) {
  require(size >= 32, "synthetic_shapes: size must be >= 32");
  require(classes >= 2 && classes <= 8, "synthetic_shapes: classes must lie in [2,8]");
  LabeledImage item;
  // Failed placements regenerate from a derived sub-seed.
  for (uint64_t attempt = 0;; ++attempt) {
    auto rng = make_rng({seed, static_cast<uint64_t>(index), attempt});
    if (render_item(rng, size, classes, item)) return item;
  }
}

Dataset synthetic_shapes(uint64_t seed, int64_t count, int64_t size, int64_t classes) {
  require(count >= 1, "synthetic_shapes: count must be >= 1");
  Dataset ds;
  ds.reserve(count);
  for (int64_t i = 0; i < count; ++i) ds.push_back(synthetic_shape_item(seed, i, size, classes));
  return ds;
}

void AugmentationConfig::validate() const {
  require(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0,
          "augmentation crop_scale must satisfy 0 < min <= max <= 1");
  require(flip_prob >= 0.0 && flip_prob <= 1.0, "augmentation flip_prob must lie in [0,1]");
  require(grayscale_prob >= 0.0 && grayscale_prob <= 1.0,
          "augmentation grayscale_prob must lie in [0,1]");
  require(color_jitter_prob >= 0.0 && color_jitter_prob <= 1.0,
          "augmentation color_jitter_prob must lie in [0,1]");
  require(color_jitter_strength >= 0.0, "augmentation color_jitter_strength must be >= 0");
}

namespace {

torch::Tensor luminance(const torch::Tensor& x) {
  return (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0);
}

torch::Tensor random_resized_crop(const torch::Tensor& x, const AugmentationConfig& cfg,
                                  std::mt19937_64& rng) {
  const int64_t h = x.size(1), w = x.size(2);
  const double area = static_cast<double>(h * w);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  int64_t ch = h, cw = w, top = 0, left = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    const double ratio = std::exp(uniform(rng, log_lo, log_hi));
    const auto tw = static_cast<int64_t>(std::lround(std::sqrt(target * ratio)));
    const auto th = static_cast<int64_t>(std::lround(std::sqrt(target / ratio)));
    if (tw > 0 && th > 0 && tw <= w && th <= h) {
      cw = tw;
      ch = th;
      top = std::uniform_int_distribution<int64_t>(0, h - th)(rng);
      left = std::uniform_int_distribution<int64_t>(0, w - tw)(rng);
      break;
    }
  }
  if (ch == h && cw == w) return x;
  auto crop = x.slice(1, top, top + ch).slice(2, left, left + cw).unsqueeze(0);
  namespace F = torch::nn::functional;
  return F::interpolate(crop, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{h, w})
                                  .mode(torch::kBilinear)
                                  .align_corners(false))
      .squeeze(0);
}

torch::Tensor rotate_hue(const torch::Tensor& x, double turns) {
  // Rotation of the chroma plane in YIQ space.
  auto y = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
  auto i = 0.596 * x[0] - 0.274 * x[1] - 0.322 * x[2];
  auto q = 0.211 * x[0] - 0.523 * x[1] + 0.312 * x[2];
  const double a = 2.0 * std::numbers::pi * turns;
  auto i2 = std::cos(a) * i - std::sin(a) * q;
  auto q2 = std::sin(a) * i + std::cos(a) * q;
  auto r = y + 0.956 * i2 + 0.621 * q2;
  auto g = y - 0.272 * i2 - 0.647 * q2;
  auto b = y - 1.106 * i2 + 1.703 * q2;
  return torch::stack({r, g, b});
}

torch::Tensor color_jitter(torch::Tensor x, double s, std::mt19937_64& rng) {
  const double bc = 0.8 * s, hue = 0.2 * s;
  const double brightness = uniform(rng, std::max(0.0, 1.0 - bc), 1.0 + bc);
  const double contrast = uniform(rng, std::max(0.0, 1.0 - bc), 1.0 + bc);
  const double saturation = uniform(rng, std::max(0.0, 1.0 - bc), 1.0 + bc);
  const double hue_shift = uniform(rng, -std::min(hue, 0.5), std::min(hue, 0.5));
  x = (x * brightness).clamp(0.0, 1.0);
  auto mean = luminance(x).mean();
  x = ((x - mean) * contrast + mean).clamp(0.0, 1.0);
  auto gray = luminance(x);
  x = ((x - gray) * saturation + gray).clamp(0.0, 1.0);
  return rotate_hue(x, hue_shift).clamp(0.0, 1.0);
}

torch::Tensor augment_view(const torch::Tensor& pixels, const AugmentationConfig& cfg,
                           std::mt19937_64& rng) {
  auto x = random_resized_crop(pixels, cfg, rng);
  if (bernoulli(rng, cfg.flip_prob)) x = torch::flip(x, {2});
  const bool jitter = bernoulli(rng, cfg.color_jitter_prob);
  if (jitter && cfg.color_jitter_strength > 0.0 && x.size(0) == 3) {
    x = color_jitter(x, cfg.color_jitter_strength, rng);
  }
  if (bernoulli(rng, cfg.grayscale_prob) && x.size(0) == 3) x = luminance(x).expand({3, -1, -1});
  return x.contiguous();
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> augment_pair(const LabeledImage& img,
                                                     const AugmentationConfig& cfg,
                                                     uint64_t item_seed) {
  cfg.validate();
  require(img.pixels.dim() == 3, "augment_pair: pixels must be [C,H,W]");
  torch::NoGradGuard guard;
  auto rng = make_rng({cfg.seed, item_seed});
  auto a = augment_view(img.pixels, cfg, rng);
  auto b = augment_view(img.pixels, cfg, rng);
  return {a, b};
}

Dataset load_image_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest,
                           int64_t size, int64_t num_classes) {
  require(size >= 1, "load_image_dataset: size must be positive");
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest: " + manifest.string());
  Dataset ds;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": expected path<TAB>label");
    }
    const auto rel = line.substr(0, tab);
    const auto label_text = line.substr(tab + 1);
    int64_t label = 0;
    std::size_t used = 0;
    try {
      label = std::stoll(label_text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != label_text.size()) {
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": bad label '" +
                    label_text + "'");
    }
    if (label < 0 || label >= num_classes) {
      throw IoError(manifest.string() + ":" + std::to_string(lineno) + ": label " +
                    std::to_string(label) + " outside [0," + std::to_string(num_classes) + ")");
    }
    const auto path = root / rel;
    if (!std::filesystem::exists(path)) throw IoError("missing image file: " + path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    if (rgb.rows != size || rgb.cols != size) {
      cv::resize(rgb, rgb, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0,
                 cv::INTER_AREA);
    }
    cv::Mat f;
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    auto t = torch::from_blob(f.data, {size, size, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
    ds.push_back(LabeledImage{t, label, {}});
  }
  return ds;
}

void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError("cannot write manifest in: " + dir.string());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& item = ds[i];
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu", i);
    auto hwc = (item.pixels * 255.0).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    const int h = static_cast<int>(hwc.size(0)), w = static_cast<int>(hwc.size(1));
    cv::Mat rgb(h, w, CV_8UC3, hwc.data_ptr<uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    const auto img_path = dir / (std::string(name) + ".png");
    if (!cv::imwrite(img_path.string(), bgr)) throw IoError("cannot write image: " + img_path.string());
    if (!item.gt_masks.empty()) {
      cv::Mat ids(h, w, CV_8UC1, cv::Scalar(0));
      for (std::size_t k = 0; k < item.gt_masks.size(); ++k) {
        auto m = item.gt_masks[k].contiguous();
        const auto* mp = m.data_ptr<bool>();
        for (int p = 0; p < h * w; ++p) {
          if (mp[p]) ids.data[p] = static_cast<uint8_t>(k + 1);
        }
      }
      const auto mask_path = dir / (std::string(name) + "_masks.png");
      if (!cv::imwrite(mask_path.string(), ids)) throw IoError("cannot write image: " + mask_path.string());
    }
    manifest << name << ".png\t" << item.label << "\n";
  }
}

torch::Tensor stack_pixels(const Dataset& ds, const std::vector<int64_t>& indices) {
  std::vector<torch::Tensor> xs;
  xs.reserve(indices.size());
  for (auto i : indices) xs.push_back(ds.at(i).pixels);
  return torch::stack(xs);
}

torch::Tensor stack_pixels(const Dataset& ds) {
  std::vector<torch::Tensor> xs;
  xs.reserve(ds.size());
  for (const auto& item : ds) xs.push_back(item.pixels);
  return torch::stack(xs);
}

torch::Tensor labels_tensor(const Dataset& ds) {
  std::vector<int64_t> ys;
  ys.reserve(ds.size());
  for (const auto& item : ds) ys.push_back(item.label);
  return torch::tensor(ys, torch::kLong);
}

double foreground_fraction(const LabeledImage& img) {
  if (img.gt_masks.empty()) return 0.0;
  torch::Tensor u = img.gt_masks.front().clone();
  for (std::size_t k = 1; k < img.gt_masks.size(); ++k) u = u.logical_or(img.gt_masks[k]);
  return u.to(torch::kFloat64).mean().item<double>();
}

}  // namespace seqmask::data
