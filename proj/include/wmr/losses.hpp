#pragma once

// Training objectives for the generator and the patch discriminator.

#include "wmr/blocks.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace wmr::losses {

/// Gamma: per-element average (default) or plain summation.
enum class Reduction { mean, sum };

/// off: P is neither computed nor added. detached: P is computed and added as
/// a constant (logged, no second-order gradient). second_order: P is part of
/// the graph and contributes its own gradient.
enum class PenaltyMode { off, detached, second_order };

/// Parameter subset differentiated by the penalty.
enum class PenaltyScope { adapters, all };

std::string to_string(Reduction r);
std::string to_string(PenaltyMode m);
std::string to_string(PenaltyScope s);
Reduction reduction_from_string(const std::string& s);
PenaltyMode penalty_mode_from_string(const std::string& s);
PenaltyScope penalty_scope_from_string(const std::string& s);

struct LossWeights {
  double pixel = 10.0;                  // w1
  double perceptual = 30.0;             // w2
  double adversarial = 1.0;             // w3
  double disc_perceptual = 100.0;       // w4
  double penalty = 0.001;               // w5

  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

struct LossConfig {
  LossWeights weights;
  Reduction reduction = Reduction::mean;
  PenaltyMode penalty = PenaltyMode::second_order;
  PenaltyScope penalty_scope = PenaltyScope::adapters;

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

inline constexpr double kScoreEpsilon = 1e-6;

struct LossBreakdown {
  double pixel = 0;
  double perceptual = 0;
  double gen_adv = 0;          // L_G
  double disc_adv = 0;         // L_D
  double disc_perceptual = 0;  // L'_per
  double penalty = 0;          // P
  double total = 0;
  Reduction reduction = Reduction::mean;
  std::int64_t n_feature_stages = 0;

  bool finite() const;
  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

/// Frozen convolutional feature stack used for the perceptual terms and the
/// perceptual-distance metric. Weights live in buffers, so they are never
/// optimized. The default stack is seeded: 3->16 (stride 1), 16->32 and
/// 32->64 (stride 2), 3x3 kernels, ReLU after every stage.
class FeatureExtractorImpl : public torch::nn::Module {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eedf00dULL;

  explicit FeatureExtractorImpl(std::uint64_t seed = kDefaultSeed);
  /// Explicit stage weights [out, in, k, k] (no bias) and strides.
  FeatureExtractorImpl(std::vector<torch::Tensor> weights, std::vector<std::int64_t> strides);

  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  std::int64_t stages() const { return static_cast<std::int64_t>(strides_.size()); }

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<std::int64_t> strides_;
};
TORCH_MODULE(FeatureExtractor);

torch::Tensor reduce(const torch::Tensor& t, Reduction r);

/// ||Y - G_wf||_1 + ||C_bkg - G_bkg||_1. The second term is dropped when
/// c_bkg is undefined.
torch::Tensor pixel_loss(const torch::Tensor& y, const torch::Tensor& c_bkg, const torch::Tensor& g_wf,
                         const torch::Tensor& g_bkg, Reduction r);

/// Sum over stages of the per-sample L2 distance between feature maps. With
/// mean reduction the per-sample distance is normalized by sqrt(numel) and
/// averaged over the batch; with sum reduction per-sample norms are summed.
torch::Tensor feature_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b,
                               Reduction r);

torch::Tensor perceptual_loss(const torch::Tensor& y, const torch::Tensor& c_bkg, const torch::Tensor& g_wf,
                              const torch::Tensor& g_bkg, FeatureExtractor& extractor, Reduction r);

/// Mask averaged over each score patch, then thresholded at 0.5.
torch::Tensor patch_mask(const torch::Tensor& m, std::int64_t patch_h, std::int64_t patch_w);

/// Clamps scores to [eps, 1 - eps]; throws RuntimeFailure on non-finite input.
torch::Tensor checked_scores(const torch::Tensor& scores);

/// L_G = -Gamma(log D(Y) * M_patch).
torch::Tensor generator_adversarial(const torch::Tensor& fake_scores, const torch::Tensor& m_patch, Reduction r);

/// L_D = -Gamma(log D(G_wf)) - Gamma(log D(Y) * (1 - M_patch)) - Gamma(log(1 - D(Y)) * M_patch).
/// `fake_scores` must come from a detached Y.
torch::Tensor discriminator_adversarial(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                                        const torch::Tensor& m_patch, Reduction r);

/// P = sum over params of ||dL_G/dtheta||^2. With create_graph the result is
/// differentiable. Throws RuntimeFailure if L_G does not require grad.
torch::Tensor gradient_penalty(const torch::Tensor& l_g, const std::vector<torch::Tensor>& params, bool create_graph);

/// L'_per over discriminator stage features; the G_wf side is detached.
torch::Tensor discriminator_feature_perceptual(const std::vector<torch::Tensor>& fake_features,
                                               const std::vector<torch::Tensor>& real_features, Reduction r);

struct GeneratorTerms {
  torch::Tensor pixel, perceptual, gen_adv, disc_perceptual, penalty, total;
};

struct GeneratorInputs {
  torch::Tensor y;
  torch::Tensor c_bkg;  // may be undefined
  torch::Tensor g_wf;
  torch::Tensor g_bkg;
  torch::Tensor m;
};

/// Weighted generator total for one batch. Discriminator parameters should be frozen by
/// the caller; gradients still flow through D into Y.
GeneratorTerms generator_objective(const GeneratorInputs& in, PatchDiscriminator& disc, FeatureExtractor& extractor,
                                   const std::vector<torch::Tensor>& penalty_params, const LossConfig& cfg);

/// Discriminator objective with Y treated as constant.
torch::Tensor discriminator_objective(const torch::Tensor& y, const torch::Tensor& g_wf, const torch::Tensor& m,
                                      PatchDiscriminator& disc, Reduction r);

}  // namespace wmr::losses
