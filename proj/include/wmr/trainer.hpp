#pragma once

// Joint adversarial training of the generator and the patch discriminator.
//
// Each step runs one generator forward pass, one discriminator update on the
// detached output, then one generator update on the weighted total. Batch
// order and per-step mask augmentation come from a seeded Rng whose state is
// part of the checkpoint, so an interrupted run resumes on the same sequence.

#include "wmr/losses.hpp"
#include "wmr/model.hpp"
#include "wmr/rng.hpp"
#include "wmr/synth.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace wmr::trainer {

/// Distribution of per-step mask augmentation applied to the stored mask.
struct MaskAugDistribution {
  bool enabled = true;
  double p_dilate = 0.5;
  double p_erode = 0.25;
  int min_radius = 1;
  int max_radius = 5;
  double p_polygonalize = 0.1;
  int min_vertices = 5;
  int max_vertices = 12;

  synth::MaskAugParams sample(Rng& rng) const;
  nlohmann::json to_json() const;
  static MaskAugDistribution from_json(const nlohmann::json& j);
};

enum class MaskSource { coarse, precise };

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  losses::LossConfig loss;
  MaskAugDistribution mask_aug;
  /// Mask the augmentation starts from: the stored coarse M or the precise M_0.
  MaskSource mask_source = MaskSource::coarse;

  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t batch_size = 4;
  std::int64_t epochs = 100;
  /// 0 = no cap.
  std::int64_t max_steps = 0;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  /// Steps between checkpoints; 0 writes only the final one.
  std::int64_t checkpoint_every = 0;
  /// Global gradient-norm clip for the generator; 0 disables it.
  double grad_clip = 0.0;
  /// Steps between train-set RMSE_w measurements in fit(); 0 measures only
  /// at the start and the end.
  std::int64_t eval_every = 0;
  std::string model_id = "wmr";

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);

  /// Names accepted by preset().
  static std::vector<std::string> preset_names();
  /// Named configurations: "full", "desk" and one per ablation row.
  static TrainConfig preset(const std::string& name);
};

std::string to_string(MaskSource s);
MaskSource mask_source_from_string(const std::string& s);

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  losses::LossBreakdown losses;

  nlohmann::json to_json() const;
  static StepRecord from_json(const nlohmann::json& j);
};

struct TrainState {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::vector<std::int64_t> order;  // permutation for the current epoch
  std::int64_t cursor = 0;          // position in `order`
  std::string rng_state;

  nlohmann::json to_json() const;
  static TrainState from_json(const nlohmann::json& j);
};

struct Batch {
  torch::Tensor x, m, g_wf, g_bkg;  // [N,C,H,W]
  std::vector<std::string> ids;
};

inline constexpr const char* kDiscriminatorFile = "discriminator.wmrt";
inline constexpr const char* kGeneratorOptimFile = "optimizer_g.pt";
inline constexpr const char* kDiscriminatorOptimFile = "optimizer_d.pt";
inline constexpr const char* kStateFile = "train_state.json";
inline constexpr const char* kTrainConfigFile = "train_config.json";
inline constexpr const char* kLossLogFile = "loss_log.jsonl";
inline constexpr const char* kSummaryFile = "train_summary.json";

class Trainer {
 public:
  Trainer(TrainConfig cfg, synth::Dataset dataset);

  /// Rebuilds a trainer from a checkpoint directory written by save().
  static Trainer resume(const std::filesystem::path& dir, synth::Dataset dataset);

  const TrainConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  WatermarkRemover& model() { return model_; }
  PatchDiscriminator& discriminator() { return disc_; }

  /// Stacks samples into a batch, applying the configured mask augmentation.
  Batch make_batch(const std::vector<synth::WatermarkSample>& samples);
  /// One D update then one G update. Throws RuntimeFailure on a non-finite loss.
  losses::LossBreakdown train_step(const Batch& batch);
  /// Draws the next batch in epoch order and trains on it.
  StepRecord step();

  /// Trains until `epochs` or `max_steps`; logs every step to
  /// out/loss_log.jsonl and checkpoints into `out`. Returns `out`.
  std::filesystem::path fit(const std::filesystem::path& out,
                            const std::function<void(const StepRecord&)>& on_step = {});

  void save(const std::filesystem::path& dir);

  /// Mean RMSE_w (inside M_0, stored M as input) over every training sample.
  double measure_rmse_w();

  std::vector<torch::Tensor> generator_parameters() const;
  /// Subset differentiated by the gradient penalty.
  std::vector<torch::Tensor> penalty_parameters() const;

 private:
  void start_epoch();

  TrainConfig cfg_;
  synth::Dataset dataset_;
  WatermarkRemover model_{nullptr};
  PatchDiscriminator disc_{nullptr};
  losses::FeatureExtractor extractor_{nullptr};
  std::unique_ptr<torch::optim::Adam> g_opt_;
  std::unique_ptr<torch::optim::Adam> d_opt_;
  Rng rng_;
  TrainState state_;
};

std::vector<StepRecord> read_loss_log(const std::filesystem::path& path);

struct CurvePoint {
  std::int64_t epoch = 0;
  std::int64_t steps = 0;
  losses::LossBreakdown mean;
};

/// Per-epoch mean of every loss term, in epoch order.
std::vector<CurvePoint> epoch_curves(const std::vector<StepRecord>& records);

}  // namespace wmr::trainer
