#pragma once

// Full watermark-removal network:
//
//   wcc:      [X, M]         -> encoder -> attention blocks -> decoder -> C_bkg
//   bce:      [X, M, C_bkg]  -> encoder -> attention blocks
//   backbone: [X_una, M]     -> encoder -> 3 FFC groups -> decoder -> Y
//
// Feature taps 1..4 of each branch (encoder output, then three block outputs)
// are fused into the backbone before each FFC group and before the decoder.

#include "wmr/blocks.hpp"
#include "wmr/checkpoint.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace wmr {

struct ForwardTrace {
  torch::Tensor x_una;
  torch::Tensor c_bkg;  // undefined when the WCC branch is disabled
  std::vector<torch::Tensor> f_wcc;
  std::vector<torch::Tensor> f_bce;
  std::vector<torch::Tensor> f_inp;
  std::vector<torch::Tensor> f_hat_inp;
  torch::Tensor y;
};

struct BranchOutput {
  std::vector<torch::Tensor> features;  // 4 taps
  torch::Tensor image;                  // decoder output, if the branch has one
};

/// Block indices (1-based) whose outputs supply taps 2..4 for a stack of
/// `blocks`: ceil(i * blocks / 3) for i = 1..3.
std::vector<std::int64_t> tap_indices(std::int64_t blocks);

/// Encoder, a stack of feature blocks and an optional decoder.
class BranchImpl : public torch::nn::Module {
 public:
  BranchImpl(std::int64_t in_channels, const ModelConfig& cfg, bool with_decoder);
  BranchOutput forward(const torch::Tensor& x);

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};

 private:
  std::vector<torch::nn::AnyModule> blocks_;
  std::vector<std::int64_t> taps_;
};
TORCH_MODULE(Branch);

/// Inpainting backbone split at the fusion points.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const ModelConfig& cfg);

  torch::Tensor encode(const torch::Tensor& x_una_and_mask);
  torch::Tensor group(std::size_t index, const torch::Tensor& x);
  torch::Tensor decode(const torch::Tensor& x);

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};

 private:
  std::vector<std::vector<torch::nn::AnyModule>> groups_;
};
TORCH_MODULE(Backbone);

class WatermarkRemoverImpl : public torch::nn::Module {
 public:
  explicit WatermarkRemoverImpl(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// X [N,3,H,W], M [N,1,H,W]; M may be soft (values in [0,1]).
  BranchOutput wcc_forward(const torch::Tensor& x, const torch::Tensor& m);
  /// c_bkg may be undefined when the WCC branch is disabled.
  std::vector<torch::Tensor> bce_forward(const torch::Tensor& x, const torch::Tensor& m, const torch::Tensor& c_bkg);
  ForwardTrace full_forward(const torch::Tensor& x, const torch::Tensor& m);
  /// The backbone alone on (X_una, M); no adapters.
  torch::Tensor backbone_forward(const torch::Tensor& x, const torch::Tensor& m);

  std::vector<torch::Tensor> backbone_parameters() const;
  /// Branch and fusion parameters.
  std::vector<torch::Tensor> adapter_parameters() const;
  std::vector<torch::Tensor> fusion_parameters() const;

  void set_backbone_trainable(bool trainable);

  /// Replaces backbone parameters from an archive (keys under "backbone.").
  checkpoint::LoadReport load_backbone(const std::filesystem::path& archive, bool strict);

  Backbone backbone{nullptr};
  Branch wcc{nullptr};
  Branch bce{nullptr};

 private:
  torch::Tensor fuse(std::size_t index, const torch::Tensor& inp, const std::vector<torch::Tensor>& branches);
  void check_inputs(const torch::Tensor& x, const torch::Tensor& m) const;

  ModelConfig cfg_;
  std::vector<GatedFusion> gfm_;
  std::vector<ConvFusion> conv_fusion_;
};
TORCH_MODULE(WatermarkRemover);

// ---------------------------------------------------------------------------
// Model card and checkpoint directory

struct ModelCard {
  std::string model_id;
  ModelConfig config;
  std::string config_hash;
};

/// FNV-1a 64 over the canonical JSON dump of the config, as 16 hex digits.
std::string config_hash(const ModelConfig& cfg);

void write_model_card(const std::filesystem::path& path, const ModelCard& card);
ModelCard read_model_card(const std::filesystem::path& path);

inline constexpr const char* kModelCardFile = "model_card.json";
inline constexpr const char* kGeneratorFile = "generator.wmrt";

/// Writes model_card.json + generator.wmrt into `dir`.
void save_model(const std::filesystem::path& dir, WatermarkRemover& model, const std::string& model_id);

struct LoadedModel {
  WatermarkRemover model{nullptr};
  ModelCard card;
};
LoadedModel load_model(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Inference

struct RemovalResult {
  torch::Tensor y;      // [3,H,W]
  torch::Tensor c_bkg;  // [3,H,W], undefined without WCC
};

/// Single-image inference on a frozen model. Inputs whose sides are not
/// multiples of the downsample factor are reflect-padded (replicate-padded
/// when too small to reflect) and the outputs cropped back.
RemovalResult remove_watermark(WatermarkRemover& model, const torch::Tensor& image, const torch::Tensor& mask);

}  // namespace wmr
