#pragma once

// Synthetic watermarked-sample generation.
//
//   X     = T((1 - A) * I + A * W)
//   G_wf  = T(I)
//   G_bkg = T((1 - A) * I)
//   M_0   = A > 0
//   M     = resample(polygonalize(morph(M_0)))
//
// T is a deterministic function of DistortionParams (resampling followed by
// JPEG compression) and is applied with the same parameters to X, G_wf and
// G_bkg of one sample.

#include "wmr/image.hpp"
#include "wmr/rng.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace wmr::synth {

using image::ResampleFilter;

struct DistortionParams {
  int codec_quality = 75;        // [30, 95]
  double resample_scale = 1.0;   // [0.5, 1.0]
  ResampleFilter resample_filter = ResampleFilter::bilinear;
  std::uint64_t seed = 0;
  /// Skip both resampling and compression. Test-only; generated data is always distorted.
  bool identity = false;

  static DistortionParams identity_mode() {
    DistortionParams p;
    p.identity = true;
    return p;
  }
  static DistortionParams sample(Rng& rng);
  void validate() const;
};

enum class MorphOp { dilate, erode, none };

struct MaskAugParams {
  MorphOp op = MorphOp::none;
  int kernel_radius = 1;  // [1, 7]
  bool polygonalize = false;
  int polygon_vertices = 8;  // >= 3
  std::uint64_t seed = 0;

  static MaskAugParams sample(Rng& rng);
  void validate() const;
};

struct SourcePair {
  torch::Tensor background;  // I, [3,H,W]
  torch::Tensor watermark;   // W, [3,H,W]
  torch::Tensor alpha;       // A, [1,H,W]

  /// Throws InputError on spatial mismatch; clamps alpha into [0,1].
  void validate();
};

struct Composite {
  torch::Tensor x;
  torch::Tensor g_wf;
  torch::Tensor g_bkg;
};

/// T applied to a single image.
torch::Tensor distort(const torch::Tensor& img, const DistortionParams& params);

Composite composite(SourcePair pair, const DistortionParams& params);

torch::Tensor make_precise_mask(const torch::Tensor& alpha);

/// Binary disc structuring element {(dx,dy) : dx^2 + dy^2 <= r^2}, as a
/// [2r+1, 2r+1] uint8 tensor.
torch::Tensor disc_kernel(int radius);

torch::Tensor morph(const torch::Tensor& mask, MorphOp op, int radius);

/// Filled convex polygon of the mask support, reduced to at most
/// `max_vertices` corners. Empty masks stay empty.
torch::Tensor polygonalize(const torch::Tensor& mask, int max_vertices);

/// The sample's resampling applied to a binary mask: a pixel is set if any
/// pixel sharing its downscaled cell is set. Extensive and idempotent.
torch::Tensor resample_mask(const torch::Tensor& mask, double scale);

/// Morphology, optional polygonalization, then the sample resampling.
/// An erosion that empties a non-empty mask falls back to M_0.
torch::Tensor coarsen_mask(const torch::Tensor& m0, const MaskAugParams& aug, const DistortionParams& distortion);

struct WatermarkSample {
  std::string id;
  torch::Tensor x;      // [3,H,W]
  torch::Tensor m;      // coarse mask [1,H,W]
  torch::Tensor m0;     // precise mask [1,H,W]
  torch::Tensor g_wf;   // [3,H,W]
  torch::Tensor g_bkg;  // [3,H,W]
  torch::Tensor alpha;  // [1,H,W]
  DistortionParams distortion;
  MaskAugParams mask_aug;
  std::uint64_t seed = 0;
  nlohmann::json placement;
};

/// Indexed image source. Entries that fail to load yield nullopt.
class SourceCollection {
 public:
  enum class Kind { backgrounds, watermarks };

  /// Every regular file in `dir` (sorted by name). Throws InputError if the
  /// directory does not exist or holds no files.
  static SourceCollection from_directory(const std::filesystem::path& dir, Kind kind);
  /// `count` procedurally drawn images (gradients and shapes for backgrounds,
  /// text and glyph logos for watermarks), a pure function of the index.
  static SourceCollection procedural(Kind kind, std::size_t count = 32);

  std::size_t size() const { return size_; }
  Kind kind() const { return kind_; }
  std::string name(std::size_t i) const;
  /// Backgrounds: [3,H,W]. Watermarks: [4,H,W] (RGB + alpha).
  std::optional<torch::Tensor> load(std::size_t i) const;

 private:
  Kind kind_ = Kind::backgrounds;
  std::size_t size_ = 0;
  std::vector<std::filesystem::path> files_;
};

torch::Tensor procedural_background(std::uint64_t seed, int size);
torch::Tensor procedural_watermark(std::uint64_t seed, int size);

struct GenerateOptions {
  std::int64_t n = 0;
  std::uint64_t master_seed = 0;
  int image_size = 64;
  bool identity_distortion = false;
  /// Replaces the sampled global opacity multiplier and binarizes A to {0, opacity}.
  std::optional<double> force_opacity;
  double min_scale = 0.4;
  double max_scale = 0.95;
  double min_opacity = 0.35;
  double max_opacity = 1.0;
  int jobs = 1;
};

struct ManifestEntry {
  std::string id;
  std::string dir;
  std::uint64_t seed = 0;
  std::string background;
  std::string watermark;
};

struct Manifest {
  std::uint64_t master_seed = 0;
  int image_size = 0;
  std::vector<ManifestEntry> entries;
};

/// Builds sample `index` of a dataset. Pure function of its arguments.
WatermarkSample generate_sample(const SourceCollection& backgrounds, const SourceCollection& watermarks,
                                const GenerateOptions& options, std::int64_t index);

/// Writes `options.n` records plus `manifest.jsonl` under `out`.
Manifest generate_dataset(const SourceCollection& backgrounds, const SourceCollection& watermarks,
                          const GenerateOptions& options, const std::filesystem::path& out);

void write_sample(const std::filesystem::path& dir, const WatermarkSample& sample);
WatermarkSample read_sample(const std::filesystem::path& dir);

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const DistortionParams& p);
nlohmann::json to_json(const MaskAugParams& p);
DistortionParams distortion_from_json(const nlohmann::json& j);
MaskAugParams mask_aug_from_json(const nlohmann::json& j);

std::string to_string(MorphOp op);
MorphOp morph_op_from_string(const std::string& s);

/// On-disk dataset: a manifest plus one directory per sample.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root);

  std::size_t size() const { return manifest_.entries.size(); }
  const Manifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  /// Reads a record. Throws InputError if it is missing or unreadable.
  WatermarkSample load(std::size_t i) const;
  std::vector<WatermarkSample> load_all() const;

 private:
  std::filesystem::path root_;
  Manifest manifest_;
};

}  // namespace wmr::synth
