#include "seqmask/models.hpp"

#include <sstream>

#include "seqmask/errors.hpp"
#include "seqmask/hash.hpp"

namespace seqmask::models {

namespace nn = torch::nn;
using detail::require;

// Logits are clamped so that float32 sigmoid outputs stay strictly inside (0,1).
constexpr double kLogitClamp = 15.0;

std::string to_string(Backbone b) {
  return b == Backbone::small_conv ? "small_conv" : "resnet18_style";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "small_conv") return Backbone::small_conv;
  if (s == "resnet18_style") return Backbone::resnet18_style;
  throw ContractViolation("unknown backbone '" + s + "'");
}

void EncoderConfig::validate() const {
  require(projection_dim >= 2, "encoder.projection_dim must be >= 2");
  require(input_channels >= 1, "encoder.input_channels must be >= 1");
  require(input_size >= 8 && input_size % 8 == 0, "encoder.input_size must be a multiple of 8");
  require(width >= 1, "encoder.width must be >= 1");
}

std::string EncoderConfig::canonical() const {
  std::ostringstream os;
  os << "encoder:" << to_string(backbone) << ",proj=" << projection_dim << ",in=" << input_channels
     << ",size=" << input_size << ",width=" << width;
  return os.str();
}

void MaskerConfig::validate() const {
  require(n_masks >= 1, "n_masks must be >= 1");
  require(base_channels >= 1, "masker.base_channels must be >= 1");
  require(depth >= 2, "masker.depth must be >= 2");
  require(input_channels >= 1, "masker.input_channels must be >= 1");
  const int64_t stride = int64_t{1} << (depth - 1);
  require(input_size >= stride && input_size % stride == 0,
          "masker.input_size must be divisible by 2^(depth-1)");
}

std::string MaskerConfig::canonical() const {
  std::ostringstream os;
  os << "masker:n=" << n_masks << ",base=" << base_channels << ",depth=" << depth
     << ",in=" << input_channels << ",size=" << input_size << ",cond=channel_concat";
  return os.str();
}

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride, bool bias) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(bias));
}

struct BasicBlockImpl : nn::Module {
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, down{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, down_bn{nullptr};

  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module("conv1", conv3x3(in, out, stride, false));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", conv3x3(out, out, 1, false));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      down = register_module(
          "down", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
      down_bn = register_module("down_bn", nn::BatchNorm2d(out));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = bn2(conv2(y));
    auto skip = down ? down_bn(down(x)) : x;
    return torch::relu(y + skip);
  }
};
TORCH_MODULE(BasicBlock);

// conv3x3 -> norm -> ReLU; BatchNorm for the encoder, GroupNorm for the masker.
struct ConvBlockImpl : nn::Module {
  nn::Conv2d conv{nullptr};
  nn::AnyModule norm;

  ConvBlockImpl(int64_t in, int64_t out, int64_t stride, bool group_norm) {
    conv = register_module("conv", conv3x3(in, out, stride, group_norm));
    if (group_norm) {
      const int64_t groups = out % 4 == 0 ? 4 : 1;
      norm = nn::AnyModule(nn::GroupNorm(nn::GroupNormOptions(groups, out)));
    } else {
      norm = nn::AnyModule(nn::BatchNorm2d(out));
    }
    register_module("norm", norm.ptr());
  }

  torch::Tensor forward(torch::Tensor x) { return torch::relu(norm.forward(conv(x))); }
};
TORCH_MODULE(ConvBlock);

ConvBlock conv_bn_relu(int64_t in, int64_t out, int64_t stride) {
  return ConvBlock(in, out, stride, false);
}

ConvBlock conv_gn_relu(int64_t in, int64_t out, int64_t stride) {
  return ConvBlock(in, out, stride, true);
}

}  // namespace

EncoderImpl::EncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  backbone_ = nn::Sequential();
  const auto w = cfg_.width;
  if (cfg_.backbone == Backbone::small_conv) {
    // Four stride-2 stages, each followed by a stride-1 refinement conv.
    int64_t in = cfg_.input_channels;
    for (int64_t stage = 0; stage < 4; ++stage) {
      const int64_t out = w << stage;
      backbone_->push_back("stage" + std::to_string(stage) + "_down", conv_bn_relu(in, out, 2));
      backbone_->push_back("stage" + std::to_string(stage) + "_conv", conv_bn_relu(out, out, 1));
      in = out;
    }
    feature_dim_ = in;
  } else {
    // ResNet18 layout with a 3x3 stem for small inputs.
    backbone_->push_back("stem", conv_bn_relu(cfg_.input_channels, w, 1));
    int64_t in = w;
    for (int64_t stage = 0; stage < 4; ++stage) {
      const int64_t out = w << stage;
      const int64_t stride = stage == 0 ? 1 : 2;
      backbone_->push_back("layer" + std::to_string(stage + 1) + "_0", BasicBlock(in, out, stride));
      backbone_->push_back("layer" + std::to_string(stage + 1) + "_1", BasicBlock(out, out, 1));
      in = out;
    }
    feature_dim_ = in;
  }
  backbone_->push_back("pool", nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
  backbone_->push_back("flatten", nn::Flatten());
  backbone_ = register_module("backbone", backbone_);
  head_ = register_module("head", nn::Linear(feature_dim_, cfg_.projection_dim));
}

// Channels-last activations are markedly faster for these small convs on CPU.
torch::Tensor EncoderImpl::features(const torch::Tensor& images) {
  return backbone_->forward(images.contiguous(torch::MemoryFormat::ChannelsLast));
}

torch::Tensor EncoderImpl::project(const torch::Tensor& features) { return head_(features); }

torch::Tensor EncoderImpl::features_checked(const torch::Tensor& images) {
  auto x = images.contiguous(torch::MemoryFormat::ChannelsLast);
  auto children = backbone_->named_children();
  std::size_t i = 0;
  for (auto& layer : *backbone_) {
    x = layer.forward(x);
    if (!torch::isfinite(x).all().item<bool>()) {
      throw NumericError("non-finite activation at backbone." + children[i].key());
    }
    ++i;
  }
  return x;
}

MaskerImpl::MaskerImpl(const MaskerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto ch = [&](int64_t level) { return cfg_.base_channels << level; };
  for (int64_t l = 0; l < cfg_.depth; ++l) {
    const int64_t in = l == 0 ? cfg_.input_channels + 1 : ch(l - 1);
    down_.emplace_back(register_module("down" + std::to_string(l), conv_gn_relu(in, ch(l), l == 0 ? 1 : 2)));
  }
  for (int64_t l = cfg_.depth - 2; l >= 0; --l) {
    up_.push_back(register_module(
        "up" + std::to_string(l),
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(ch(l + 1), ch(l), 2).stride(2))));
    merge_.emplace_back(register_module("merge" + std::to_string(l), conv_gn_relu(2 * ch(l), ch(l), 1)));
  }
  heads_ = register_module("heads", nn::ModuleList());
  for (int64_t k = 0; k < cfg_.n_masks; ++k) {
    heads_->push_back(nn::Conv2d(nn::Conv2dOptions(ch(0), 1, 1)));
  }
}

torch::Tensor MaskerImpl::trunk(const torch::Tensor& input) {
  std::vector<torch::Tensor> skips;
  auto x = input.contiguous(torch::MemoryFormat::ChannelsLast);
  for (auto& block : down_) {
    x = block.forward(x);
    skips.push_back(x);
  }
  // skips.back() is x itself; walk back up from the next-to-last level.
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    x = up_[i]->forward(x);
    x = merge_[i].forward(torch::cat({x, skip}, 1));
  }
  return x;
}

torch::Tensor MaskerImpl::head_logits(int64_t slot, const torch::Tensor& trunk_features) {
  require(slot >= 0 && slot < cfg_.n_masks, "mask slot out of range");
  return heads_[slot]->as<nn::Conv2d>()->forward(trunk_features).squeeze(1).contiguous();
}

EncoderState make_encoder(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  EncoderState s{cfg, Encoder(cfg), StateMeta{}};
  s.meta.config_hash = sha256_hex(cfg.canonical());
  s.meta.seed = seed;
  return s;
}

MaskerState make_masker(const MaskerConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  MaskerState s{cfg, Masker(cfg), StateMeta{}};
  s.meta.config_hash = sha256_hex(cfg.canonical());
  s.meta.seed = seed;
  return s;
}

namespace {
template <typename Net>
void copy_tensors(Net& src, Net& dst) {
  torch::NoGradGuard guard;
  auto from = named_tensors(*src);
  for (auto& [name, t] : named_tensors(*dst)) t.copy_(from.at(name));
  dst->train(src->is_training());
}
}  // namespace

EncoderState clone(const EncoderState& s) {
  EncoderState out{s.config, Encoder(s.config), s.meta};
  auto src = s.net;
  copy_tensors(src, out.net);
  return out;
}

MaskerState clone(const MaskerState& s) {
  MaskerState out{s.config, Masker(s.config), s.meta};
  auto src = s.net;
  copy_tensors(src, out.net);
  return out;
}

std::map<std::string, torch::Tensor> named_tensors(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out.emplace(p.key(), p.value());
  for (const auto& b : m.named_buffers()) out.emplace(b.key(), b.value());
  return out;
}

namespace {

void check_images(const torch::Tensor& images, int64_t channels, int64_t size, const char* what) {
  require(images.dim() == 4, std::string(what) + ": images must be [B,C,H,W]");
  require(images.size(1) == channels && images.size(2) == size && images.size(3) == size,
          std::string(what) + ": image shape does not match the model config");
}

struct EvalModeScope {
  torch::nn::Module& module;
  bool was_training;
  explicit EvalModeScope(torch::nn::Module& m) : module(m), was_training(m.is_training()) {
    module.eval();
  }
  ~EvalModeScope() { module.train(was_training); }
};

}  // namespace

torch::Tensor encode_features(EncoderState& state, const torch::Tensor& images) {
  check_images(images, state.config.input_channels, state.config.input_size, "encode");
  EvalModeScope scope(*state.net);
  torch::NoGradGuard guard;
  return state.net->features_checked(images);
}

torch::Tensor encode(EncoderState& state, const torch::Tensor& images) {
  auto f = encode_features(state, images);
  torch::NoGradGuard guard;
  auto z = state.net->project(f);
  if (!torch::isfinite(z).all().item<bool>()) throw NumericError("non-finite activation at head");
  return z;
}

torch::Tensor generate_mask(MaskerState& state, const torch::Tensor& images,
                            const std::vector<torch::Tensor>& prior, int64_t slot) {
  const auto& cfg = state.config;
  check_images(images, cfg.input_channels, cfg.input_size, "generate_mask");
  require(slot >= 0 && slot < cfg.n_masks, "generate_mask: slot out of range");
  require(static_cast<int64_t>(prior.size()) == slot,
          "generate_mask: prior must hold exactly `slot` masks");

  const auto b = images.size(0);
  torch::Tensor cond;
  if (prior.empty()) {
    cond = torch::zeros({b, 1, cfg.input_size, cfg.input_size}, images.options());
  } else {
    for (const auto& p : prior) {
      require(p.dim() == 3 && p.size(0) == b && p.size(1) == cfg.input_size &&
                  p.size(2) == cfg.input_size,
              "generate_mask: prior mask shape mismatch");
      cond = cond.defined() ? cond + p : p;
    }
    cond = cond.unsqueeze(1);
  }
  auto features = state.net->trunk(torch::cat({images, cond}, 1));
  auto logits = state.net->head_logits(slot, features).clamp(-kLogitClamp, kLogitClamp);
  return torch::sigmoid(logits);
}

std::vector<torch::Tensor> generate_mask_sequence(MaskerState& state, const torch::Tensor& images) {
  std::vector<torch::Tensor> masks;
  masks.reserve(state.config.n_masks);
  for (int64_t k = 0; k < state.config.n_masks; ++k) {
    masks.push_back(generate_mask(state, images, masks, k));
  }
  return masks;
}

torch::Tensor apply_mask(const torch::Tensor& images, const torch::Tensor& mask) {
  require(images.dim() == 4, "apply_mask: images must be [B,C,H,W]");
  require(mask.dim() == 3 && mask.size(0) == images.size(0) && mask.size(1) == images.size(2) &&
              mask.size(2) == images.size(3),
          "apply_mask: mask must be [B,H,W] matching the images");
  return images * (1.0 - mask.unsqueeze(1));
}

}  // namespace seqmask::models
