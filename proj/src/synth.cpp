#include "wmr/synth.hpp"

#include "wmr/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

namespace wmr::synth {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kBackgroundStream = 0xb6;
constexpr std::uint64_t kWatermarkStream = 0x3a;
constexpr int kProceduralSize = 256;

cv::Mat mask_to_mat(const torch::Tensor& mask) {
  auto m = (mask.squeeze(0) > 0.5).to(torch::kUInt8).contiguous();
  return cv::Mat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<std::uint8_t>()).clone();
}

torch::Tensor mat_to_mask(const cv::Mat& mat) {
  auto t = torch::from_blob(mat.data, {mat.rows, mat.cols}, torch::kUInt8).clone();
  return (t > 0).to(torch::kFloat).unsqueeze(0);
}

std::string sample_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(index));
  return buf;
}

std::string filter_name(ResampleFilter f) { return f == ResampleFilter::bicubic ? "bicubic" : "bilinear"; }

ResampleFilter filter_from_name(const std::string& s) {
  if (s == "bilinear") return ResampleFilter::bilinear;
  if (s == "bicubic") return ResampleFilter::bicubic;
  throw InputError("unknown resample filter '" + s + "'");
}

// Random square crop resized to `size`.
torch::Tensor prepare_background(const torch::Tensor& img, int size, Rng& rng) {
  cv::Mat mat = image::to_mat8(img);
  const int side = std::min(mat.rows, mat.cols);
  const int x0 = static_cast<int>(rng.uniform_int(0, mat.cols - side));
  const int y0 = static_cast<int>(rng.uniform_int(0, mat.rows - side));
  cv::Mat crop = mat(cv::Rect(x0, y0, side, side));
  cv::Mat out;
  cv::resize(crop, out, cv::Size(size, size), 0, 0, side >= size ? cv::INTER_AREA : cv::INTER_LINEAR);
  return image::from_mat8(out);
}

// Tight crop of an RGBA logo to its alpha support.
torch::Tensor crop_to_alpha(const torch::Tensor& rgba) {
  auto support = rgba[3] > 0;
  auto rows = support.any(1).nonzero();
  auto cols = support.any(0).nonzero();
  if (rows.numel() == 0) {
    return rgba;
  }
  const auto r0 = rows.min().item<int64_t>();
  const auto r1 = rows.max().item<int64_t>() + 1;
  const auto c0 = cols.min().item<int64_t>();
  const auto c1 = cols.max().item<int64_t>() + 1;
  return rgba.index({torch::indexing::Slice(), torch::indexing::Slice(r0, r1), torch::indexing::Slice(c0, c1)});
}

template <typename Load>
std::pair<std::size_t, torch::Tensor> pick(const SourceCollection& sources, Rng& rng, Load&& load) {
  if (sources.size() == 0) {
    throw InputError("empty source collection");
  }
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(sources.size()) - 1));
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const auto i = (start + k) % sources.size();
    if (auto img = load(i)) {
      return {i, *img};
    }
    std::cerr << "warning: skipping unreadable source " << sources.name(i) << "\n";
  }
  throw InputError("no readable images in source collection");
}

double polygon_area(const std::vector<cv::Point>& poly, std::size_t skip) {
  // Area of the triangle (prev, skip, next).
  const auto n = poly.size();
  const auto& a = poly[(skip + n - 1) % n];
  const auto& b = poly[skip];
  const auto& c = poly[(skip + 1) % n];
  return std::abs(static_cast<double>((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))) * 0.5;
}

}  // namespace

DistortionParams DistortionParams::sample(Rng& rng) {
  DistortionParams p;
  p.codec_quality = static_cast<int>(rng.uniform_int(30, 95));
  p.resample_scale = rng.uniform(0.5, 1.0);
  p.resample_filter = rng.bernoulli(0.5) ? ResampleFilter::bicubic : ResampleFilter::bilinear;
  p.seed = rng.next();
  return p;
}

void DistortionParams::validate() const {
  if (identity) return;
  if (codec_quality < 30 || codec_quality > 95) {
    throw InputError("codec_quality must lie in [30, 95]");
  }
  if (!(resample_scale >= 0.5 && resample_scale <= 1.0)) {
    throw InputError("resample_scale must lie in [0.5, 1.0]");
  }
}

MaskAugParams MaskAugParams::sample(Rng& rng) {
  MaskAugParams p;
  const double u = rng.uniform();
  p.op = u < 0.6 ? MorphOp::dilate : (u < 0.8 ? MorphOp::erode : MorphOp::none);
  p.kernel_radius = static_cast<int>(rng.uniform_int(1, 7));
  p.polygonalize = rng.bernoulli(0.2);
  p.polygon_vertices = static_cast<int>(rng.uniform_int(5, 12));
  p.seed = rng.next();
  return p;
}

void MaskAugParams::validate() const {
  if (kernel_radius < 1 || kernel_radius > 7) {
    throw InputError("kernel_radius must lie in [1, 7]");
  }
  if (polygon_vertices < 3) {
    throw InputError("polygon_vertices must be >= 3");
  }
}

void SourcePair::validate() {
  if (!background.defined() || !watermark.defined() || !alpha.defined()) {
    throw InputError("source pair is incomplete");
  }
  if (background.dim() != 3 || background.size(0) != 3 || watermark.dim() != 3 || watermark.size(0) != 3 ||
      alpha.dim() != 3 || alpha.size(0) != 1) {
    throw InputError("source pair expects I, W as [3,H,W] and A as [1,H,W]");
  }
  if (background.sizes().slice(1) != watermark.sizes().slice(1) || background.sizes().slice(1) != alpha.sizes().slice(1)) {
    throw InputError("I, W and A must share spatial dimensions");
  }
  alpha = alpha.clamp(0.0, 1.0);
}

torch::Tensor distort(const torch::Tensor& img, const DistortionParams& params) {
  params.validate();
  if (params.identity) {
    return img.clone();
  }
  auto out = img;
  if (params.resample_scale < 1.0) {
    out = image::resample_roundtrip(out, params.resample_scale, params.resample_filter);
  }
  return image::jpeg_roundtrip(out, params.codec_quality);
}

Composite composite(SourcePair pair, const DistortionParams& params) {
  pair.validate();
  const auto& a = pair.alpha;
  auto blended = (1.0 - a) * pair.background + a * pair.watermark;
  auto background_component = (1.0 - a) * pair.background;
  return {distort(blended, params), distort(pair.background, params), distort(background_component, params)};
}

torch::Tensor make_precise_mask(const torch::Tensor& alpha) { return (alpha > 0).to(torch::kFloat); }

torch::Tensor disc_kernel(int radius) {
  const int side = 2 * radius + 1;
  auto k = torch::zeros({side, side}, torch::kUInt8);
  auto acc = k.accessor<std::uint8_t, 2>();
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) {
        acc[dy + radius][dx + radius] = 1;
      }
    }
  }
  return k;
}

torch::Tensor morph(const torch::Tensor& mask, MorphOp op, int radius) {
  if (op == MorphOp::none) {
    return (mask > 0.5).to(torch::kFloat);
  }
  auto k = disc_kernel(radius).contiguous();
  cv::Mat kernel(static_cast<int>(k.size(0)), static_cast<int>(k.size(1)), CV_8UC1, k.data_ptr<std::uint8_t>());
  cv::Mat src = mask_to_mat(mask);
  cv::Mat dst;
  if (op == MorphOp::dilate) {
    cv::dilate(src, dst, kernel);
  } else {
    cv::erode(src, dst, kernel);
  }
  return mat_to_mask(dst);
}

torch::Tensor polygonalize(const torch::Tensor& mask, int max_vertices) {
  cv::Mat src = mask_to_mat(mask);
  std::vector<cv::Point> points;
  cv::findNonZero(src, points);
  cv::Mat dst = cv::Mat::zeros(src.size(), CV_8UC1);
  if (points.empty()) {
    return mat_to_mask(dst);
  }
  std::vector<cv::Point> hull;
  cv::convexHull(points, hull);
  // Visvalingam reduction: drop the corner whose triangle is smallest.
  while (static_cast<int>(hull.size()) > std::max(3, max_vertices)) {
    std::size_t best = 0;
    double best_area = polygon_area(hull, 0);
    for (std::size_t i = 1; i < hull.size(); ++i) {
      const double a = polygon_area(hull, i);
      if (a < best_area) {
        best_area = a;
        best = i;
      }
    }
    hull.erase(hull.begin() + static_cast<std::ptrdiff_t>(best));
  }
  cv::fillConvexPoly(dst, hull, cv::Scalar(1), cv::LINE_8);
  return mat_to_mask(dst);
}

torch::Tensor resample_mask(const torch::Tensor& mask, double scale) {
  const auto h = mask.size(1);
  const auto w = mask.size(2);
  const auto hs = image::scaled_extent(h, scale);
  const auto ws = image::scaled_extent(w, scale);
  auto src = (mask.squeeze(0) > 0.5).to(torch::kUInt8).contiguous();
  auto cells = torch::zeros({hs, ws}, torch::kUInt8);
  auto s = src.accessor<std::uint8_t, 2>();
  auto c = cells.accessor<std::uint8_t, 2>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (s[y][x]) c[y * hs / h][x * ws / w] = 1;
    }
  }
  auto out = torch::zeros({h, w}, torch::kUInt8);
  auto o = out.accessor<std::uint8_t, 2>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      o[y][x] = c[y * hs / h][x * ws / w];
    }
  }
  return out.to(torch::kFloat).unsqueeze(0);
}

torch::Tensor coarsen_mask(const torch::Tensor& m0, const MaskAugParams& aug, const DistortionParams& distortion) {
  aug.validate();
  distortion.validate();
  auto m = morph(m0, aug.op, aug.kernel_radius);
  if (aug.op == MorphOp::erode && m.sum().item<double>() == 0.0 && m0.sum().item<double>() > 0.0) {
    m = (m0 > 0.5).to(torch::kFloat);
  }
  if (aug.polygonalize) {
    m = polygonalize(m, aug.polygon_vertices);
  }
  if (!distortion.identity && distortion.resample_scale < 1.0) {
    m = resample_mask(m, distortion.resample_scale);
  }
  return m;
}

SourceCollection SourceCollection::from_directory(const fs::path& dir, Kind kind) {
  if (!fs::is_directory(dir)) {
    throw InputError("source directory not found: " + dir.string());
  }
  SourceCollection c;
  c.kind_ = kind;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      c.files_.push_back(entry.path());
    }
  }
  std::sort(c.files_.begin(), c.files_.end());
  if (c.files_.empty()) {
    throw InputError("source directory is empty: " + dir.string());
  }
  c.size_ = c.files_.size();
  return c;
}

SourceCollection SourceCollection::procedural(Kind kind, std::size_t count) {
  SourceCollection c;
  c.kind_ = kind;
  c.size_ = count;
  return c;
}

std::string SourceCollection::name(std::size_t i) const {
  if (!files_.empty()) {
    return files_.at(i).filename().string();
  }
  return std::string(kind_ == Kind::backgrounds ? "procedural-bg-" : "procedural-wm-") + std::to_string(i);
}

std::optional<torch::Tensor> SourceCollection::load(std::size_t i) const {
  if (i >= size_) {
    return std::nullopt;
  }
  if (files_.empty()) {
    return kind_ == Kind::backgrounds ? procedural_background(derive_seed(kBackgroundStream, i), kProceduralSize)
                                      : procedural_watermark(derive_seed(kWatermarkStream, i), kProceduralSize);
  }
  return kind_ == Kind::backgrounds ? image::read(files_[i], 3) : image::read_rgba(files_[i]);
}

torch::Tensor procedural_background(std::uint64_t seed, int size) {
  Rng rng(seed);
  auto color = [&rng] {
    return cv::Scalar(rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255));
  };
  const cv::Scalar c0 = color();
  const cv::Scalar c1 = color();
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  cv::Mat mat(size, size, CV_8UC3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t = std::clamp(0.5 + ((x - size / 2.0) * ca + (y - size / 2.0) * sa) / size, 0.0, 1.0);
      auto& px = mat.at<cv::Vec3b>(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        px[ch] = cv::saturate_cast<std::uint8_t>(c0[ch] * (1.0 - t) + c1[ch] * t);
      }
    }
  }
  const auto shapes = rng.uniform_int(3, 7);
  for (int64_t s = 0; s < shapes; ++s) {
    const cv::Point center(static_cast<int>(rng.uniform_int(0, size - 1)), static_cast<int>(rng.uniform_int(0, size - 1)));
    const int extent = static_cast<int>(rng.uniform_int(size / 12, size / 3));
    const cv::Scalar c = color();
    if (rng.bernoulli(0.5)) {
      cv::circle(mat, center, extent, c, cv::FILLED, cv::LINE_AA);
    } else {
      cv::rectangle(mat, center - cv::Point(extent, extent / 2), center + cv::Point(extent, extent / 2), c, cv::FILLED,
                    cv::LINE_AA);
    }
  }
  cv::GaussianBlur(mat, mat, cv::Size(5, 5), 1.0);
  return image::from_mat8(mat);
}

torch::Tensor procedural_watermark(std::uint64_t seed, int size) {
  static constexpr std::array<const char*, 10> words = {"STOCK", "PHOTO", "SAMPLE", "DEMO", "LOGO",
                                                        "PROOF", "COPY",  "DRAFT",  "WM",   "PREVIEW"};
  Rng rng(seed);
  cv::Mat rgb(size, size, CV_8UC3, cv::Scalar(0, 0, 0));
  cv::Mat alpha(size, size, CV_8UC1, cv::Scalar(0));
  const cv::Scalar ink(rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255));
  const cv::Scalar plate(rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255));

  // Translucent plate behind the lettering gives a large-area watermark.
  const int plate_alpha = static_cast<int>(rng.uniform_int(90, 200));
  const cv::Point center(size / 2, size / 2);
  if (rng.bernoulli(0.5)) {
    cv::circle(rgb, center, size * 2 / 5, plate, cv::FILLED, cv::LINE_AA);
    cv::circle(alpha, center, size * 2 / 5, cv::Scalar(plate_alpha), cv::FILLED, cv::LINE_AA);
  } else {
    const cv::Rect box(size / 10, size / 4, size * 4 / 5, size / 2);
    cv::rectangle(rgb, box, plate, cv::FILLED, cv::LINE_AA);
    cv::rectangle(alpha, box, cv::Scalar(plate_alpha), cv::FILLED, cv::LINE_AA);
  }

  const std::string text = words[static_cast<std::size_t>(rng.uniform_int(0, words.size() - 1))];
  const int thickness = std::max(2, size / 24);
  int baseline = 0;
  const cv::Size unit = cv::getTextSize(text, cv::FONT_HERSHEY_DUPLEX, 1.0, thickness, &baseline);
  const double scale = 0.8 * size / std::max(1, unit.width);
  const cv::Size extent = cv::getTextSize(text, cv::FONT_HERSHEY_DUPLEX, scale, thickness, &baseline);
  const cv::Point origin((size - extent.width) / 2, (size + extent.height) / 2);
  cv::putText(rgb, text, origin, cv::FONT_HERSHEY_DUPLEX, scale, ink, thickness, cv::LINE_AA);
  cv::putText(alpha, text, origin, cv::FONT_HERSHEY_DUPLEX, scale, cv::Scalar(255), thickness, cv::LINE_AA);

  auto color = image::from_mat8(rgb);
  auto a = image::from_mat8(alpha);
  return torch::cat({color, a}, 0);
}

WatermarkSample generate_sample(const SourceCollection& backgrounds, const SourceCollection& watermarks,
                                const GenerateOptions& options, std::int64_t index) {
  const auto seed = derive_seed(options.master_seed, static_cast<std::uint64_t>(index));
  Rng rng(seed);
  const int size = options.image_size;

  auto [bg_index, bg_raw] = pick(backgrounds, rng, [&](std::size_t i) { return backgrounds.load(i); });
  auto [wm_index, wm_raw] = pick(watermarks, rng, [&](std::size_t i) { return watermarks.load(i); });
  auto background = prepare_background(bg_raw, size, rng);

  auto logo = crop_to_alpha(wm_raw);
  const double scale = rng.uniform(options.min_scale, options.max_scale);
  const double long_side = std::max(logo.size(1), logo.size(2));
  const int target = std::max(1, static_cast<int>(std::lround(scale * size)));
  const int lw = std::clamp(static_cast<int>(std::lround(logo.size(2) * target / long_side)), 1, size);
  const int lh = std::clamp(static_cast<int>(std::lround(logo.size(1) * target / long_side)), 1, size);
  cv::Mat logo_mat = image::to_mat8(logo);
  cv::Mat logo_resized;
  cv::resize(logo_mat, logo_resized, cv::Size(lw, lh), 0, 0, cv::INTER_AREA);
  auto logo_t = image::from_mat8(logo_resized);
  const int x0 = static_cast<int>(rng.uniform_int(0, size - lw));
  const int y0 = static_cast<int>(rng.uniform_int(0, size - lh));
  double opacity = rng.uniform(options.min_opacity, options.max_opacity);

  auto watermark = torch::zeros({3, size, size});
  auto alpha = torch::zeros({1, size, size});
  using torch::indexing::Slice;
  watermark.index_put_({Slice(), Slice(y0, y0 + lh), Slice(x0, x0 + lw)}, logo_t.index({Slice(0, 3)}));
  alpha.index_put_({Slice(), Slice(y0, y0 + lh), Slice(x0, x0 + lw)}, logo_t.index({Slice(3, 4)}));
  if (options.force_opacity) {
    opacity = *options.force_opacity;
    alpha = (alpha > 0).to(torch::kFloat) * opacity;
  } else {
    alpha = alpha * opacity;
  }

  auto distortion = DistortionParams::sample(rng);
  distortion.identity = options.identity_distortion;
  const auto aug = MaskAugParams::sample(rng);

  auto comp = composite(SourcePair{background, watermark, alpha}, distortion);
  WatermarkSample s;
  s.id = sample_id(index);
  s.seed = seed;
  s.x = comp.x;
  s.g_wf = comp.g_wf;
  s.g_bkg = comp.g_bkg;
  s.alpha = alpha;
  s.m0 = make_precise_mask(alpha);
  s.m = coarsen_mask(s.m0, aug, distortion);
  s.distortion = distortion;
  s.mask_aug = aug;
  s.placement = {{"background", backgrounds.name(bg_index)},
                 {"watermark", watermarks.name(wm_index)},
                 {"scale", scale},
                 {"x", x0},
                 {"y", y0},
                 {"width", lw},
                 {"height", lh},
                 {"opacity", opacity}};
  return s;
}

Manifest generate_dataset(const SourceCollection& backgrounds, const SourceCollection& watermarks,
                          const GenerateOptions& options, const fs::path& out) {
  if (options.n < 0) {
    throw InputError("sample count must be non-negative");
  }
  if (options.image_size <= 0) {
    throw InputError("image size must be positive");
  }
  if (options.n > 0 && (backgrounds.size() == 0 || watermarks.size() == 0)) {
    throw InputError("background and watermark collections must be non-empty");
  }
  fs::create_directories(out);

  Manifest manifest;
  manifest.master_seed = options.master_seed;
  manifest.image_size = options.image_size;
  manifest.entries.resize(static_cast<std::size_t>(options.n));

  auto work = [&](std::int64_t index) {
    auto sample = generate_sample(backgrounds, watermarks, options, index);
    const auto dir = "sample_" + sample.id;
    write_sample(out / dir, sample);
    auto& e = manifest.entries[static_cast<std::size_t>(index)];
    e.id = sample.id;
    e.dir = dir;
    e.seed = sample.seed;
    e.background = sample.placement["background"];
    e.watermark = sample.placement["watermark"];
  };

  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(std::max<std::int64_t>(1, options.n))));
  if (jobs == 1) {
    for (std::int64_t i = 0; i < options.n; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::int64_t i = t; i < options.n; i += jobs) work(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  write_manifest(out / "manifest.jsonl", manifest);
  return manifest;
}

std::string to_string(MorphOp op) {
  switch (op) {
    case MorphOp::dilate: return "dilate";
    case MorphOp::erode: return "erode";
    case MorphOp::none: return "none";
  }
  return "none";
}

MorphOp morph_op_from_string(const std::string& s) {
  if (s == "dilate") return MorphOp::dilate;
  if (s == "erode") return MorphOp::erode;
  if (s == "none") return MorphOp::none;
  throw InputError("unknown morphology op '" + s + "'");
}

nlohmann::json to_json(const DistortionParams& p) {
  return {{"codec_quality", p.codec_quality},
          {"resample_scale", p.resample_scale},
          {"resample_filter", filter_name(p.resample_filter)},
          {"seed", p.seed},
          {"identity", p.identity}};
}

nlohmann::json to_json(const MaskAugParams& p) {
  return {{"op", to_string(p.op)},
          {"kernel_radius", p.kernel_radius},
          {"polygonalize", p.polygonalize},
          {"polygon_vertices", p.polygon_vertices},
          {"seed", p.seed}};
}

DistortionParams distortion_from_json(const nlohmann::json& j) {
  DistortionParams p;
  p.codec_quality = j.at("codec_quality").get<int>();
  p.resample_scale = j.at("resample_scale").get<double>();
  p.resample_filter = filter_from_name(j.at("resample_filter").get<std::string>());
  p.seed = j.at("seed").get<std::uint64_t>();
  p.identity = j.value("identity", false);
  return p;
}

MaskAugParams mask_aug_from_json(const nlohmann::json& j) {
  MaskAugParams p;
  p.op = morph_op_from_string(j.at("op").get<std::string>());
  p.kernel_radius = j.at("kernel_radius").get<int>();
  p.polygonalize = j.at("polygonalize").get<bool>();
  p.polygon_vertices = j.at("polygon_vertices").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

void write_sample(const fs::path& dir, const WatermarkSample& s) {
  fs::create_directories(dir);
  image::write_png(dir / "X.png", s.x);
  image::write_png(dir / "M.png", s.m);
  image::write_png(dir / "M0.png", s.m0);
  image::write_png(dir / "G_wf.png", s.g_wf);
  image::write_png(dir / "G_bkg.png", s.g_bkg);
  image::write_png(dir / "A.png", s.alpha);
  nlohmann::json meta = {{"id", s.id},
                         {"seed", s.seed},
                         {"height", s.x.size(1)},
                         {"width", s.x.size(2)},
                         {"distortion", to_json(s.distortion)},
                         {"mask_aug", to_json(s.mask_aug)},
                         {"placement", s.placement}};
  std::ofstream os(dir / "meta.json");
  os << meta.dump(2) << "\n";
  if (!os) {
    throw RuntimeFailure("cannot write " + (dir / "meta.json").string());
  }
}

WatermarkSample read_sample(const fs::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) {
    throw InputError("missing sample record: " + dir.string());
  }
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed " + (dir / "meta.json").string() + ": " + e.what());
  }
  auto need = [&](const char* name, int channels) {
    auto img = image::read(dir / name, channels);
    if (!img) {
      throw InputError("unreadable record file " + (dir / name).string());
    }
    return *img;
  };
  WatermarkSample s;
  s.id = meta.at("id").get<std::string>();
  s.seed = meta.at("seed").get<std::uint64_t>();
  s.x = need("X.png", 3);
  s.m = (need("M.png", 1) > 0.5).to(torch::kFloat);
  s.m0 = (need("M0.png", 1) > 0.5).to(torch::kFloat);
  s.g_wf = need("G_wf.png", 3);
  s.g_bkg = need("G_bkg.png", 3);
  s.alpha = need("A.png", 1);
  s.distortion = distortion_from_json(meta.at("distortion"));
  s.mask_aug = mask_aug_from_json(meta.at("mask_aug"));
  s.placement = meta.value("placement", nlohmann::json::object());
  return s;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream os(path);
  os << nlohmann::json{{"kind", "header"},
                       {"format", "wmr-manifest/1"},
                       {"master_seed", manifest.master_seed},
                       {"image_size", manifest.image_size},
                       {"count", manifest.entries.size()}}
            .dump()
     << "\n";
  for (const auto& e : manifest.entries) {
    os << nlohmann::json{{"kind", "sample"},
                         {"id", e.id},
                         {"dir", e.dir},
                         {"seed", e.seed},
                         {"background", e.background},
                         {"watermark", e.watermark}}
              .dump()
       << "\n";
  }
  if (!os) {
    throw RuntimeFailure("cannot write manifest " + path.string());
  }
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw InputError("cannot read manifest " + path.string());
  }
  Manifest m;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("malformed manifest line in " + path.string() + ": " + e.what());
    }
    if (j.value("kind", "") == "header") {
      m.master_seed = j.at("master_seed").get<std::uint64_t>();
      m.image_size = j.at("image_size").get<int>();
    } else {
      m.entries.push_back({j.at("id").get<std::string>(), j.at("dir").get<std::string>(),
                           j.at("seed").get<std::uint64_t>(), j.value("background", ""), j.value("watermark", "")});
    }
  }
  return m;
}

Dataset Dataset::open(const fs::path& root) {
  Dataset d;
  d.root_ = root;
  d.manifest_ = read_manifest(root / "manifest.jsonl");
  return d;
}

WatermarkSample Dataset::load(std::size_t i) const { return read_sample(root_ / manifest_.entries.at(i).dir); }

std::vector<WatermarkSample> Dataset::load_all() const {
  std::vector<WatermarkSample> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(load(i));
  return out;
}

}  // namespace wmr::synth
