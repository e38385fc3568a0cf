#pragma once

// Image-quality metrics and the evaluation harness.
//
// All distances use the 0-255 scale: inputs are [C,H,W] tensors in [0,1] and
// are multiplied by 255 before comparison.

#include "wmr/losses.hpp"
#include "wmr/model.hpp"
#include "wmr/synth.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wmr::metrics {

inline constexpr double kPsnrCap = 99.0;

double mse(const torch::Tensor& y, const torch::Tensor& g);
/// 10 log10(255^2 / MSE), capped at 99 dB.
double psnr(const torch::Tensor& y, const torch::Tensor& g);
double rmse(const torch::Tensor& y, const torch::Tensor& g);
/// sqrt(sum_{p in M} ||Y_p - G_p||^2 / (C |M|)). nullopt for an empty mask.
std::optional<double> rmse_w(const torch::Tensor& y, const torch::Tensor& g, const torch::Tensor& mask);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 255.0;
};
/// Normalized 1-D Gaussian taps of the SSIM window.
std::vector<double> gaussian_window(int size, double sigma);
/// Mean local SSIM over channels and all fully contained windows.
double ssim(const torch::Tensor& y, const torch::Tensor& g, const SsimOptions& opts = {});

/// Feature-space distance: per stage, features are unit-normalized along
/// channels, squared differences are summed over channels and averaged over
/// positions; stage values are averaged. A generic stand-in for learned
/// perceptual metrics, not numerically comparable to them.
double perceptual_distance(const torch::Tensor& y, const torch::Tensor& g, losses::FeatureExtractor& extractor);

// ---------------------------------------------------------------------------
// Evaluation

enum class MaskCondition { fixed, coarser, white, none };

std::string to_string(MaskCondition c);
MaskCondition mask_condition_from_string(const std::string& s);
/// Parses a comma-separated list such as "fixed,coarser,white".
std::vector<MaskCondition> parse_conditions(const std::string& list);

inline constexpr int kCoarserDilation = 9;
inline constexpr int kCoarserVertices = 12;

/// Mask fed to the restorer under `cond`: stored M, M dilated by 9 and made
/// convex, all ones, or all zeros.
torch::Tensor condition_mask(const synth::WatermarkSample& sample, MaskCondition cond);

class Restorer {
 public:
  virtual ~Restorer() = default;
  virtual std::string name() const = 0;
  /// Returns Y [3,H,W] in [0,1].
  virtual torch::Tensor restore(const synth::WatermarkSample& sample, const torch::Tensor& mask) = 0;
};

class ModelRestorer : public Restorer {
 public:
  ModelRestorer(WatermarkRemover model, std::string id);
  std::string name() const override { return id_; }
  torch::Tensor restore(const synth::WatermarkSample& sample, const torch::Tensor& mask) override;

 private:
  WatermarkRemover model_;
  std::string id_;
};

/// Returns G_wf. Test hook for a perfect restorer.
class GroundTruthRestorer : public Restorer {
 public:
  std::string name() const override { return "identity-gt"; }
  torch::Tensor restore(const synth::WatermarkSample& sample, const torch::Tensor&) override { return sample.g_wf; }
};

/// Returns X unchanged.
class PassthroughRestorer : public Restorer {
 public:
  std::string name() const override { return "passthrough"; }
  torch::Tensor restore(const synth::WatermarkSample& sample, const torch::Tensor&) override { return sample.x; }
};

struct ImageMetrics {
  std::string id;
  MaskCondition condition = MaskCondition::fixed;
  double psnr = 0;
  double ssim = 0;
  double rmse = 0;
  std::optional<double> rmse_w;
  double perceptual = 0;

  nlohmann::json to_json() const;
};

struct Aggregate {
  double psnr = 0;
  double ssim = 0;
  double rmse = 0;
  std::optional<double> rmse_w;  // over images with a non-empty mask
  double perceptual = 0;
  std::size_t count = 0;
  std::size_t rmse_w_count = 0;

  nlohmann::json to_json() const;
};

Aggregate aggregate(const std::vector<ImageMetrics>& rows);

struct EvalReport {
  std::string model;
  std::vector<MaskCondition> conditions;
  std::vector<ImageMetrics> per_image;
  std::map<MaskCondition, Aggregate> aggregates;
  std::vector<std::string> missing;

  /// Two-section plain-text table plus a blind-removal section.
  std::string to_text() const;
  /// Writes report.jsonl and report.txt into `dir`.
  void write(const std::filesystem::path& dir) const;
};

/// Restores every sample under every condition. Outputs are quantized to 8
/// bits before scoring; RMSE_w is measured inside the precise mask M_0 so
/// conditions are comparable. Unreadable samples are listed in `missing`.
EvalReport evaluate(Restorer& restorer, const synth::Dataset& dataset, const std::vector<MaskCondition>& conditions,
                    losses::FeatureExtractor& extractor);

}  // namespace wmr::metrics
