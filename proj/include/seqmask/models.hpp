#pragma once

// The two adversaries: a convolutional encoder with a one-layer projection
// head, and a U-Net masker whose shared trunk feeds N 1x1 mask heads.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace seqmask::models {

enum class Backbone { small_conv, resnet18_style };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct EncoderConfig {
  Backbone backbone = Backbone::small_conv;
  int64_t projection_dim = 64;
  int64_t input_channels = 3;
  int64_t input_size = 64;
  /// Channel count of the first stage; later stages double it.
  int64_t width = 16;

  void validate() const;
  /// Canonical one-line description; the config hash is taken over this.
  std::string canonical() const;
};

enum class Conditioning { channel_concat };

struct MaskerConfig {
  int64_t n_masks = 3;
  int64_t base_channels = 8;
  int64_t depth = 3;
  int64_t input_channels = 3;
  int64_t input_size = 64;
  Conditioning conditioning = Conditioning::channel_concat;

  void validate() const;
  std::string canonical() const;
};

struct StateMeta {
  std::string config_hash;
  int64_t step = 0;
  uint64_t seed = 0;
};

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const EncoderConfig& cfg);

  /// Backbone features, before the projection head. [B, feature_dim]
  torch::Tensor features(const torch::Tensor& images);
  torch::Tensor project(const torch::Tensor& features);
  torch::Tensor forward(const torch::Tensor& images) { return project(features(images)); }

  /// Like features(), but checks every layer output for non-finite values and
  /// reports the offending layer path.
  torch::Tensor features_checked(const torch::Tensor& images);

  int64_t feature_dim() const { return feature_dim_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  int64_t feature_dim_ = 0;
  torch::nn::Sequential backbone_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Encoder);

class MaskerImpl : public torch::nn::Module {
 public:
  explicit MaskerImpl(const MaskerConfig& cfg);

  /// Shared U-Net trunk. Input is [B, C+1, H, W] (image plus conditioning
  /// channel); output is [B, base_channels, H, W].
  torch::Tensor trunk(const torch::Tensor& input);
  /// Mask logits of one head, [B, H, W].
  torch::Tensor head_logits(int64_t slot, const torch::Tensor& trunk_features);

  const MaskerConfig& config() const { return cfg_; }

 private:
  MaskerConfig cfg_;
  std::vector<torch::nn::AnyModule> down_;
  std::vector<torch::nn::ConvTranspose2d> up_;
  std::vector<torch::nn::AnyModule> merge_;
  torch::nn::ModuleList heads_{nullptr};
};
TORCH_MODULE(Masker);

struct EncoderState {
  EncoderConfig config;
  Encoder net{nullptr};
  StateMeta meta;
};

struct MaskerState {
  MaskerConfig config;
  Masker net{nullptr};
  StateMeta meta;
};

/// Builds a freshly initialised encoder. Initialisation draws from the global
/// torch generator after seeding it with `seed`.
EncoderState make_encoder(const EncoderConfig& cfg, uint64_t seed);
MaskerState make_masker(const MaskerConfig& cfg, uint64_t seed);

/// Deep copy with independent parameter storage.
EncoderState clone(const EncoderState& s);
MaskerState clone(const MaskerState& s);

/// Parameters and buffers keyed by layer path, e.g. "backbone.0.weight".
std::map<std::string, torch::Tensor> named_tensors(torch::nn::Module& m);

/// Projection embeddings in evaluation mode. images: [B, C, H, W] in [0,1].
/// Restores the module's previous train/eval mode before returning.
torch::Tensor encode(EncoderState& state, const torch::Tensor& images);

/// Backbone features in evaluation mode (the linear-probe input).
torch::Tensor encode_features(EncoderState& state, const torch::Tensor& images);

/// Mask for `slot` given the masks already produced for slots 0..slot-1.
/// Each prior entry is [B, H, W]. Returns [B, H, W] with values in (0,1).
/// Runs in whatever mode the masker is currently in and records autograd
/// history unless the caller disables it.
torch::Tensor generate_mask(MaskerState& state, const torch::Tensor& images,
                            const std::vector<torch::Tensor>& prior, int64_t slot);

/// Slots 0..N-1 in order, each conditioned on all earlier outputs.
std::vector<torch::Tensor> generate_mask_sequence(MaskerState& state, const torch::Tensor& images);

/// images * (1 - m), with m [B, H, W] broadcast over channels.
torch::Tensor apply_mask(const torch::Tensor& images, const torch::Tensor& mask);

}  // namespace seqmask::models
