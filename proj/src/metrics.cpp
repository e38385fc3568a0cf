#include "wmr/metrics.hpp"

#include "wmr/errors.hpp"
#include "wmr/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace wmr::metrics {

namespace {

void require_pair(const torch::Tensor& y, const torch::Tensor& g, const char* what) {
  if (y.sizes() != g.sizes()) {
    throw InputError(std::string(what) + ": shape mismatch " + c10::str(y.sizes()) + " vs " + c10::str(g.sizes()));
  }
  if (y.dim() != 3) throw InputError(std::string(what) + ": expected [C,H,W] images");
}

torch::Tensor scaled(const torch::Tensor& t) { return t.detach().to(torch::kDouble) * 255.0; }

}  // namespace

double mse(const torch::Tensor& y, const torch::Tensor& g) {
  require_pair(y, g, "mse");
  return (scaled(y) - scaled(g)).pow(2).mean().item<double>();
}

double psnr(const torch::Tensor& y, const torch::Tensor& g) {
  const double e = mse(y, g);
  if (e <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / e));
}

double rmse(const torch::Tensor& y, const torch::Tensor& g) { return std::sqrt(mse(y, g)); }

std::optional<double> rmse_w(const torch::Tensor& y, const torch::Tensor& g, const torch::Tensor& mask) {
  require_pair(y, g, "rmse_w");
  auto m = mask.detach().to(torch::kDouble).reshape({1, y.size(1), y.size(2)});
  m = (m >= 0.5).to(torch::kDouble);
  const double count = m.sum().item<double>();
  if (count <= 0.0) return std::nullopt;
  const double sq = ((scaled(y) - scaled(g)).pow(2) * m).sum().item<double>();
  return std::sqrt(sq / (static_cast<double>(y.size(0)) * count));
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-((i - c) * (i - c)) / (2 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

double ssim(const torch::Tensor& y, const torch::Tensor& g, const SsimOptions& opts) {
  require_pair(y, g, "ssim");
  if (y.size(1) < opts.window || y.size(2) < opts.window) {
    throw InputError("ssim: image smaller than the " + std::to_string(opts.window) + "x" +
                     std::to_string(opts.window) + " window");
  }
  namespace F = torch::nn::functional;
  const auto c = y.size(0);
  auto taps = torch::tensor(gaussian_window(opts.window, opts.sigma), torch::kDouble);
  auto col = taps.view({1, 1, opts.window, 1}).expand({c, 1, opts.window, 1}).contiguous();
  auto row = taps.view({1, 1, 1, opts.window}).expand({c, 1, 1, opts.window}).contiguous();
  auto blur = [&](const torch::Tensor& t) {
    auto h = F::conv2d(t, col, F::Conv2dFuncOptions().groups(c));
    return F::conv2d(h, row, F::Conv2dFuncOptions().groups(c));
  };
  auto a = scaled(y).unsqueeze(0);
  auto b = scaled(g).unsqueeze(0);
  auto mu_a = blur(a);
  auto mu_b = blur(b);
  auto var_a = blur(a * a) - mu_a * mu_a;
  auto var_b = blur(b * b) - mu_b * mu_b;
  auto cov = blur(a * b) - mu_a * mu_b;
  const double c1 = std::pow(opts.k1 * opts.peak, 2);
  const double c2 = std::pow(opts.k2 * opts.peak, 2);
  auto map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return map.mean().item<double>();
}

double perceptual_distance(const torch::Tensor& y, const torch::Tensor& g, losses::FeatureExtractor& extractor) {
  require_pair(y, g, "perceptual_distance");
  torch::NoGradGuard guard;
  auto fa = extractor->forward(y.detach().to(torch::kDouble).unsqueeze(0));
  auto fb = extractor->forward(g.detach().to(torch::kDouble).unsqueeze(0));
  double total = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto na = fa[i] / (fa[i].pow(2).sum(1, true).sqrt() + 1e-10);
    auto nb = fb[i] / (fb[i].pow(2).sum(1, true).sqrt() + 1e-10);
    total += (na - nb).pow(2).sum(1).mean().item<double>();
  }
  return fa.empty() ? 0.0 : total / static_cast<double>(fa.size());
}

// ---------------------------------------------------------------------------

std::string to_string(MaskCondition c) {
  switch (c) {
    case MaskCondition::fixed: return "fixed";
    case MaskCondition::coarser: return "coarser";
    case MaskCondition::white: return "white";
    case MaskCondition::none: return "none";
  }
  return "fixed";
}

MaskCondition mask_condition_from_string(const std::string& s) {
  if (s == "fixed") return MaskCondition::fixed;
  if (s == "coarser") return MaskCondition::coarser;
  if (s == "white") return MaskCondition::white;
  if (s == "none") return MaskCondition::none;
  throw InputError("unknown mask condition '" + s + "' (expected fixed, coarser, white or none)");
}

std::vector<MaskCondition> parse_conditions(const std::string& list) {
  std::vector<MaskCondition> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    item = item.substr(first, item.find_last_not_of(" \t") - first + 1);
    auto c = mask_condition_from_string(item);
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  if (out.empty()) throw InputError("no mask conditions given");
  return out;
}

torch::Tensor condition_mask(const synth::WatermarkSample& sample, MaskCondition cond) {
  switch (cond) {
    case MaskCondition::fixed: return sample.m;
    case MaskCondition::coarser:
      return synth::polygonalize(synth::morph(sample.m, synth::MorphOp::dilate, kCoarserDilation), kCoarserVertices);
    case MaskCondition::white: return torch::ones_like(sample.m);
    case MaskCondition::none: return torch::zeros_like(sample.m);
  }
  return sample.m;
}

ModelRestorer::ModelRestorer(WatermarkRemover model, std::string id) : model_(std::move(model)), id_(std::move(id)) {
  model_->eval();
}

torch::Tensor ModelRestorer::restore(const synth::WatermarkSample& sample, const torch::Tensor& mask) {
  return remove_watermark(model_, sample.x, mask).y;
}

nlohmann::json ImageMetrics::to_json() const {
  nlohmann::json j = {{"id", id},       {"condition", to_string(condition)}, {"psnr", psnr},
                      {"ssim", ssim},   {"rmse", rmse},                      {"perceptual", perceptual}};
  j["rmse_w"] = rmse_w ? nlohmann::json(*rmse_w) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json Aggregate::to_json() const {
  nlohmann::json j = {{"psnr", psnr},         {"ssim", ssim},   {"rmse", rmse}, {"perceptual", perceptual},
                      {"count", count},       {"rmse_w_count", rmse_w_count}};
  j["rmse_w"] = rmse_w ? nlohmann::json(*rmse_w) : nlohmann::json(nullptr);
  return j;
}

Aggregate aggregate(const std::vector<ImageMetrics>& rows) {
  Aggregate a;
  double rw = 0;
  for (const auto& r : rows) {
    a.psnr += r.psnr;
    a.ssim += r.ssim;
    a.rmse += r.rmse;
    a.perceptual += r.perceptual;
    ++a.count;
    if (r.rmse_w) {
      rw += *r.rmse_w;
      ++a.rmse_w_count;
    }
  }
  if (a.count > 0) {
    const auto n = static_cast<double>(a.count);
    a.psnr /= n;
    a.ssim /= n;
    a.rmse /= n;
    a.perceptual /= n;
  }
  if (a.rmse_w_count > 0) a.rmse_w = rw / static_cast<double>(a.rmse_w_count);
  return a;
}

namespace {

struct ReferenceRow {
  const char* label;
  double psnr, ssim, rmse, rmse_w, lpips;
};

constexpr ReferenceRow kReferenceFixed{"reference, fixed mask", 26.81, 0.924, 15.11, 18.01, 0.094};
constexpr ReferenceRow kReferenceCoarser{"reference, fixed and coarser", 26.66, 0.924, 15.09, 16.48, 0.094};

std::string format_row(const std::string& label, const Aggregate& a) {
  char buf[256];
  const std::string rw = a.rmse_w ? [&] {
    char b[32];
    std::snprintf(b, sizeof b, "%8.2f", *a.rmse_w);
    return std::string(b);
  }()
                                  : std::string("     n/a");
  std::snprintf(buf, sizeof buf, "  %-30s %7.2f %7.3f %7.2f %s %10.4f %5zu\n", label.c_str(), a.psnr, a.ssim, a.rmse,
                rw.c_str(), a.perceptual, a.count);
  return buf;
}

std::string format_reference(const ReferenceRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-30s %7.2f %7.3f %7.2f %8.2f %10.3f\n", r.label, r.psnr, r.ssim, r.rmse,
                r.rmse_w, r.lpips);
  return buf;
}

std::string header_line() {
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-30s %7s %7s %7s %8s %10s %5s\n", "condition", "PSNR", "SSIM", "RMSE", "RMSE_w",
                "Perceptual", "n");
  return buf;
}

}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "Watermark removal evaluation\n";
  os << "model: " << model << "\n";
  os << "conditions:";
  for (auto c : conditions) os << ' ' << to_string(c);
  os << "\n\n";
  os << "Published full-scale reference rows (60k-image training; not reproducible at this scale;\n"
        "their last column is LPIPS, while the Perceptual column below is a generic feature distance):\n";
  os << format_reference(kReferenceFixed) << format_reference(kReferenceCoarser) << "\n";

  auto has = [&](MaskCondition c) { return aggregates.count(c) > 0; };

  os << "Performance with fixed mask per image\n" << header_line();
  if (has(MaskCondition::fixed)) {
    os << format_row("fixed", aggregates.at(MaskCondition::fixed));
  } else {
    os << "  (fixed condition not evaluated)\n";
  }
  os << "\n";

  os << "Performance with fixed and coarser mask per image\n" << header_line();
  std::vector<ImageMetrics> both;
  for (auto c : {MaskCondition::fixed, MaskCondition::coarser}) {
    if (!has(c)) continue;
    os << format_row(to_string(c), aggregates.at(c));
    for (const auto& r : per_image) {
      if (r.condition == c) both.push_back(r);
    }
  }
  if (has(MaskCondition::fixed) && has(MaskCondition::coarser)) {
    os << format_row("fixed + coarser", aggregate(both));
  } else if (!has(MaskCondition::coarser)) {
    os << "  (coarser condition not evaluated)\n";
  }
  os << "\n";

  if (has(MaskCondition::white) || has(MaskCondition::none)) {
    os << "Blind removal\n" << header_line();
    for (auto c : {MaskCondition::white, MaskCondition::none}) {
      if (has(c)) os << format_row(to_string(c), aggregates.at(c));
    }
    os << "\n";
  }

  if (has(MaskCondition::fixed) && has(MaskCondition::coarser)) {
    const double pf = aggregates.at(MaskCondition::fixed).psnr;
    const double pc = aggregates.at(MaskCondition::coarser).psnr;
    char buf[128];
    std::snprintf(buf, sizeof buf, "PSNR fixed >= coarser: %s (%.2f vs %.2f)\n", pf >= pc ? "yes" : "no", pf, pc);
    os << buf;
  }
  if (!missing.empty()) {
    os << "missing samples:";
    for (const auto& m : missing) os << ' ' << m;
    os << "\n";
  }
  return os.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "report.jsonl");
    if (!os) throw RuntimeFailure("cannot write " + (dir / "report.jsonl").string());
    nlohmann::json head = {{"kind", "header"}, {"format", "wmr-eval/1"}, {"model", model}, {"missing", missing}};
    std::vector<std::string> names;
    for (auto c : conditions) names.push_back(to_string(c));
    head["conditions"] = names;
    os << head.dump() << '\n';
    for (const auto& r : per_image) {
      auto j = r.to_json();
      j["kind"] = "image";
      os << j.dump() << '\n';
    }
    for (const auto& [c, a] : aggregates) {
      auto j = a.to_json();
      j["kind"] = "aggregate";
      j["condition"] = to_string(c);
      os << j.dump() << '\n';
    }
  }
  std::ofstream txt(dir / "report.txt");
  if (!txt) throw RuntimeFailure("cannot write " + (dir / "report.txt").string());
  txt << to_text();
}

EvalReport evaluate(Restorer& restorer, const synth::Dataset& dataset, const std::vector<MaskCondition>& conditions,
                    losses::FeatureExtractor& extractor) {
  EvalReport report;
  report.model = restorer.name();
  report.conditions = conditions;
  std::map<MaskCondition, std::vector<ImageMetrics>> by_condition;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    synth::WatermarkSample sample;
    try {
      sample = dataset.load(i);
    } catch (const InputError& e) {
      report.missing.push_back(dataset.manifest().entries[i].id);
      continue;
    }
    for (auto cond : conditions) {
      auto mask = condition_mask(sample, cond);
      auto y = image::quantize8(restorer.restore(sample, mask).detach().to(torch::kFloat).clamp(0.0, 1.0));
      ImageMetrics row;
      row.id = sample.id;
      row.condition = cond;
      row.psnr = psnr(y, sample.g_wf);
      row.ssim = ssim(y, sample.g_wf);
      row.rmse = rmse(y, sample.g_wf);
      row.rmse_w = rmse_w(y, sample.g_wf, sample.m0);
      row.perceptual = perceptual_distance(y, sample.g_wf, extractor);
      report.per_image.push_back(row);
      by_condition[cond].push_back(row);
    }
  }
  for (auto cond : conditions) report.aggregates[cond] = aggregate(by_condition[cond]);
  return report;
}

}  // namespace wmr::metrics
