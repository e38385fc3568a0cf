#pragma once

// Differentiable building blocks. All modules take and return NCHW tensors.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace wmr {

enum class AttentionKind { transposed, conventional, conv3, conv7, dconv5d3 };
enum class FusionKind { gfm, conv };
enum class BackboneBlockKind { ffc, transposed_attention };

std::string to_string(AttentionKind k);
std::string to_string(FusionKind k);
std::string to_string(BackboneBlockKind k);
AttentionKind attention_kind_from_string(const std::string& s);
FusionKind fusion_kind_from_string(const std::string& s);
BackboneBlockKind backbone_block_from_string(const std::string& s);

struct ModelConfig {
  std::int64_t height = 256;
  std::int64_t width = 256;
  /// Number of stride-2 encoder stages; the downsample factor is 2^stages.
  std::int64_t downsample_stages = 5;
  std::int64_t channels = 128;  // d
  /// Floor on the encoder/decoder channel schedule.
  std::int64_t base_channels = 32;
  std::int64_t ta_blocks_per_branch = 3;
  std::int64_t ffc_blocks = 18;
  std::int64_t ffc_groups = 3;
  double ffc_global_ratio = 0.5;
  std::int64_t attention_heads = 1;
  bool learnable_temperature = false;
  bool use_wcc = true;
  bool use_bce = true;
  FusionKind fusion_kind = FusionKind::gfm;
  AttentionKind attention_kind = AttentionKind::transposed;
  BackboneBlockKind backbone_block = BackboneBlockKind::ffc;
  std::string pretrained_backbone;  // empty = none
  std::int64_t disc_channels = 64;

  std::int64_t downsample_factor() const { return std::int64_t{1} << downsample_stages; }
  std::int64_t feature_height() const { return height / downsample_factor(); }
  std::int64_t feature_width() const { return width / downsample_factor(); }
  std::int64_t global_channels() const;
  /// Throws InputError when dimensions are inconsistent.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// Architecture used in the published experiments (256x256, 18 FFC blocks).
  static ModelConfig full_scale();
  /// 64x64, d=32, 6 FFC blocks in 3 groups, 2 attention blocks. CI scale.
  static ModelConfig desk();
};

/// Throws InputError unless x is [N,C,H,W] with H, W divisible by `factor`.
void check_spatial(const torch::Tensor& x, std::int64_t factor, const char* what);

/// Per-channel affine normalization without batch statistics: a single-group
/// group norm, so it stays well defined on 1x1 feature maps.
torch::nn::GroupNorm make_norm(std::int64_t channels);

// ---------------------------------------------------------------------------
// Encoder / decoder

/// 7x7 stem followed by `downsample_stages` stride-2 3x3 conv + norm + ReLU
/// stages. Output channels: cfg.channels.
class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(std::int64_t in_channels, const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::int64_t factor_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Encoder);

/// Mirror of the encoder: nearest x2 upsample + conv stages, then a 7x7 conv to
/// `out_channels` and a logistic squashing into [0, 1].
class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(const ModelConfig& cfg, std::int64_t out_channels = 3);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Decoder);

/// Channel schedule shared by encoder and decoder; entry k is the width after
/// stage k (entry 0 is the stem).
std::vector<std::int64_t> channel_schedule(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Transposed attention

struct AttentionInternals {
  torch::Tensor q_map, k_map, v_map;  // [N, d, h', w']
  torch::Tensor q, k;                 // unfolded, [N, h'w', d]
  torch::Tensor correlation;          // S, [N, heads, d/heads, d/heads]; rows sum to 1
  double temperature = 1.0;             // alpha
};

/// F_out = F_in + Conv1x1(fold(unfold(V) S)),
/// [Q, K, V] = DConv3x3(Conv1x1(F_in)),  S = softmax(q^T k / alpha).
/// The correlation map is d x d, so memory is linear in h'w'.
class TransposedAttentionImpl : public torch::nn::Module {
 public:
  TransposedAttentionImpl(std::int64_t channels, std::int64_t heads = 1, bool learnable_temperature = false);

  torch::Tensor forward(const torch::Tensor& x);
  std::pair<torch::Tensor, AttentionInternals> forward_with_internals(const torch::Tensor& x);

  torch::nn::Conv2d qkv_proj{nullptr};
  torch::nn::Conv2d qkv_dwconv{nullptr};
  torch::nn::Conv2d out_proj{nullptr};  // zero-initialized
  torch::Tensor log_temperature;        // defined only when learnable

 private:
  std::int64_t channels_;
  std::int64_t heads_;
};
TORCH_MODULE(TransposedAttention);

/// Spatial (h'w' x h'w') softmax attention with the same projections; used by
/// the conventional-attention ablation.
class ConventionalAttentionImpl : public torch::nn::Module {
 public:
  explicit ConventionalAttentionImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d qkv_proj{nullptr};
  torch::nn::Conv2d qkv_dwconv{nullptr};
  torch::nn::Conv2d out_proj{nullptr};

 private:
  std::int64_t channels_;
};
TORCH_MODULE(ConventionalAttention);

/// Residual convolution used by the kernel-size ablations:
/// F + Conv1x1(GELU(Conv_kxk(F))).
class ConvFeatureBlockImpl : public torch::nn::Module {
 public:
  ConvFeatureBlockImpl(std::int64_t channels, std::int64_t kernel, std::int64_t dilation = 1);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Conv2d out_proj{nullptr};
};
TORCH_MODULE(ConvFeatureBlock);

/// Feature-enhancement block of the configured kind, as an AnyModule.
torch::nn::AnyModule make_feature_block(AttentionKind kind, std::int64_t channels, std::int64_t heads,
                                        bool learnable_temperature);

// ---------------------------------------------------------------------------
// Gated fusion

struct GateInternals {
  torch::Tensor gate;       // G_i
  torch::Tensor candidate;  // T_i
};

/// F_hat = F_inp + Conv1x1(GELU(G) * T),  [G, T] = DConv3x3(Conv1x1([branches..., F_inp])).
/// `branches` is {F_wcc, F_bce} in the full model; ablations drop one.
class GatedFusionImpl : public torch::nn::Module {
 public:
  GatedFusionImpl(std::int64_t channels, std::int64_t branch_count);

  torch::Tensor forward(const torch::Tensor& inp, const std::vector<torch::Tensor>& branches);
  std::pair<torch::Tensor, GateInternals> forward_with_internals(const torch::Tensor& inp,
                                                                 const std::vector<torch::Tensor>& branches);

  torch::nn::Conv2d in_proj{nullptr};
  torch::nn::Conv2d dwconv{nullptr};
  torch::nn::Conv2d out_proj{nullptr};  // zero-initialized

 private:
  std::int64_t channels_;
  std::int64_t branch_count_;
};
TORCH_MODULE(GatedFusion);

/// Ungated ablation: F_inp + Conv1x1(GELU(Conv3x3(concat))).
class ConvFusionImpl : public torch::nn::Module {
 public:
  ConvFusionImpl(std::int64_t channels, std::int64_t branch_count);
  torch::Tensor forward(const torch::Tensor& inp, const std::vector<torch::Tensor>& branches);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Conv2d out_proj{nullptr};  // zero-initialized

 private:
  std::int64_t branch_count_;
};
TORCH_MODULE(ConvFusion);

// ---------------------------------------------------------------------------
// Fast Fourier convolution

/// rfft2 (orthonormal) -> stack real/imag as channels -> Conv1x1 -> norm ->
/// ReLU -> back to complex -> irfft2.
class FourierUnitImpl : public torch::nn::Module {
 public:
  explicit FourierUnitImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};  // 2c -> 2c, no bias
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(FourierUnit);

/// Global path: Conv1x1 reduce (c -> c/2) + norm + ReLU, Fourier unit with a
/// residual, Conv1x1 expand back to c.
class SpectralTransformImpl : public torch::nn::Module {
 public:
  explicit SpectralTransformImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential reduce{nullptr};
  FourierUnit fourier{nullptr};
  torch::nn::Conv2d expand{nullptr};
};
TORCH_MODULE(SpectralTransform);

/// One FFC layer with norm + ReLU on each path:
///   local'  = Conv3x3_ll(local) + Conv3x3_gl(global)
///   global' = Conv3x3_lg(local) + Spectral(global)
class FFCLayerImpl : public torch::nn::Module {
 public:
  FFCLayerImpl(std::int64_t channels, std::int64_t global_channels);
  torch::Tensor forward(const torch::Tensor& x);

  std::int64_t local_channels() const { return local_; }
  std::int64_t global_channels() const { return global_; }

 private:
  std::int64_t local_;
  std::int64_t global_;
  torch::nn::Conv2d l2l_{nullptr}, l2g_{nullptr}, g2l_{nullptr};
  SpectralTransform g2g_{nullptr};
  torch::nn::GroupNorm norm_l_{nullptr}, norm_g_{nullptr};
};
TORCH_MODULE(FFCLayer);

/// Residual pair of FFC layers: x + layer2(layer1(x)). Shape-preserving.
class FFCBlockImpl : public torch::nn::Module {
 public:
  FFCBlockImpl(std::int64_t channels, double global_ratio);
  torch::Tensor forward(const torch::Tensor& x);

  FFCLayer layer1{nullptr};
  FFCLayer layer2{nullptr};
};
TORCH_MODULE(FFCBlock);

// ---------------------------------------------------------------------------
// Patch discriminator

struct DiscriminatorOutput {
  std::vector<torch::Tensor> features;  // one per stride-2 stage
  torch::Tensor scores;                 // [N, 1, H/16, W/16], each in [eps, 1 - eps]
};

/// Four stride-2 4x4 conv stages (base, 2b, 4b, 8b channels) and a 3x3 scoring
/// conv followed by a logistic squashing. Score map is H/16 x W/16.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  static constexpr double kScoreEpsilon = 1e-6;
  static constexpr std::int64_t kFactor = 16;

  explicit PatchDiscriminatorImpl(std::int64_t base_channels = 64, std::int64_t in_channels = 3);
  torch::Tensor forward(const torch::Tensor& img);
  DiscriminatorOutput forward_features(const torch::Tensor& img);

  torch::nn::Conv2d score{nullptr};

 private:
  std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(PatchDiscriminator);

}  // namespace wmr
