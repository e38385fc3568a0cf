#include "wmr/losses.hpp"

#include "wmr/errors.hpp"

#include <cmath>

namespace wmr::losses {

std::string to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

std::string to_string(PenaltyMode m) {
  switch (m) {
    case PenaltyMode::off: return "off";
    case PenaltyMode::detached: return "detached";
    case PenaltyMode::second_order: return "second_order";
  }
  return "off";
}

std::string to_string(PenaltyScope s) { return s == PenaltyScope::adapters ? "adapters" : "all"; }

Reduction reduction_from_string(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw InputError("unknown reduction '" + s + "' (expected mean or sum)");
}

PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "off") return PenaltyMode::off;
  if (s == "detached") return PenaltyMode::detached;
  if (s == "second_order") return PenaltyMode::second_order;
  throw InputError("unknown penalty mode '" + s + "' (expected off, detached or second_order)");
}

PenaltyScope penalty_scope_from_string(const std::string& s) {
  if (s == "adapters") return PenaltyScope::adapters;
  if (s == "all") return PenaltyScope::all;
  throw InputError("unknown penalty scope '" + s + "' (expected adapters or all)");
}

nlohmann::json LossWeights::to_json() const {
  return {{"pixel", pixel},
          {"perceptual", perceptual},
          {"adversarial", adversarial},
          {"disc_perceptual", disc_perceptual},
          {"penalty", penalty}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.pixel = j.value("pixel", w.pixel);
  w.perceptual = j.value("perceptual", w.perceptual);
  w.adversarial = j.value("adversarial", w.adversarial);
  w.disc_perceptual = j.value("disc_perceptual", w.disc_perceptual);
  w.penalty = j.value("penalty", w.penalty);
  for (double v : {w.pixel, w.perceptual, w.adversarial, w.disc_perceptual, w.penalty}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("loss weights must be finite and non-negative");
  }
  return w;
}

nlohmann::json LossConfig::to_json() const {
  return {{"weights", weights.to_json()},
          {"reduction", to_string(reduction)},
          {"penalty", to_string(penalty)},
          {"penalty_scope", to_string(penalty_scope)}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
  if (j.contains("reduction")) c.reduction = reduction_from_string(j.at("reduction").get<std::string>());
  if (j.contains("penalty")) c.penalty = penalty_mode_from_string(j.at("penalty").get<std::string>());
  if (j.contains("penalty_scope")) c.penalty_scope = penalty_scope_from_string(j.at("penalty_scope").get<std::string>());
  return c;
}

bool LossBreakdown::finite() const {
  for (double v : {pixel, perceptual, gen_adv, disc_adv, disc_perceptual, penalty, total}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"pixel", pixel},
          {"perceptual", perceptual},
          {"gen_adv", gen_adv},
          {"disc_adv", disc_adv},
          {"disc_perceptual", disc_perceptual},
          {"penalty", penalty},
          {"total", total},
          {"reduction", to_string(reduction)},
          {"n_feature_stages", n_feature_stages}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.pixel = j.at("pixel").get<double>();
  b.perceptual = j.at("perceptual").get<double>();
  b.gen_adv = j.at("gen_adv").get<double>();
  b.disc_adv = j.at("disc_adv").get<double>();
  b.disc_perceptual = j.at("disc_perceptual").get<double>();
  b.penalty = j.at("penalty").get<double>();
  b.total = j.at("total").get<double>();
  b.reduction = reduction_from_string(j.value("reduction", std::string("mean")));
  b.n_feature_stages = j.value("n_feature_stages", std::int64_t{0});
  return b;
}

// ---------------------------------------------------------------------------

FeatureExtractorImpl::FeatureExtractorImpl(std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  const std::int64_t widths[] = {3, 16, 32, 64};
  const std::int64_t strides[] = {1, 2, 2};
  for (int i = 0; i < 3; ++i) {
    const auto fan_in = static_cast<double>(widths[i] * 9);
    auto w = torch::randn({widths[i + 1], widths[i], 3, 3}, gen, torch::kFloat) * std::sqrt(2.0 / fan_in);
    weights_.push_back(register_buffer("w" + std::to_string(i), w));
    strides_.push_back(strides[i]);
  }
}

FeatureExtractorImpl::FeatureExtractorImpl(std::vector<torch::Tensor> weights, std::vector<std::int64_t> strides)
    : strides_(std::move(strides)) {
  if (weights.size() != strides_.size() || weights.empty()) {
    throw InputError("feature extractor needs one stride per stage");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].dim() != 4) throw InputError("feature extractor weights must be [out, in, k, k]");
    weights_.push_back(register_buffer("w" + std::to_string(i), weights[i].detach().clone()));
  }
}

std::vector<torch::Tensor> FeatureExtractorImpl::forward(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  std::vector<torch::Tensor> out;
  auto h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto& w = weights_[i];
    const auto pad = w.size(2) / 2;
    h = torch::relu(F::conv2d(h, w.to(h.dtype()), F::Conv2dFuncOptions().stride(strides_[i]).padding(pad)));
    out.push_back(h);
  }
  return out;
}

// ---------------------------------------------------------------------------

torch::Tensor reduce(const torch::Tensor& t, Reduction r) { return r == Reduction::mean ? t.mean() : t.sum(); }

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw InputError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

}  // namespace

torch::Tensor pixel_loss(const torch::Tensor& y, const torch::Tensor& c_bkg, const torch::Tensor& g_wf,
                         const torch::Tensor& g_bkg, Reduction r) {
  require_same(y, g_wf, "pixel_loss");
  auto loss = reduce((y - g_wf).abs(), r);
  if (c_bkg.defined()) {
    require_same(c_bkg, g_bkg, "pixel_loss");
    loss = loss + reduce((c_bkg - g_bkg).abs(), r);
  }
  return loss;
}

torch::Tensor feature_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b,
                               Reduction r) {
  if (a.size() != b.size()) throw InputError("feature_distance: stage count mismatch");
  torch::Tensor total;
  for (std::size_t i = 0; i < a.size(); ++i) {
    require_same(a[i], b[i], "feature_distance");
    auto diff = (a[i] - b[i]).flatten(1);
    auto norms = torch::linalg_vector_norm(diff, 2, {1}, false, c10::nullopt);
    torch::Tensor term;
    if (r == Reduction::mean) {
      term = (norms / std::sqrt(static_cast<double>(diff.size(1)))).mean();
    } else {
      term = norms.sum();
    }
    total = total.defined() ? total + term : term;
  }
  return total.defined() ? total : torch::zeros({});
}

torch::Tensor perceptual_loss(const torch::Tensor& y, const torch::Tensor& c_bkg, const torch::Tensor& g_wf,
                              const torch::Tensor& g_bkg, FeatureExtractor& extractor, Reduction r) {
  require_same(y, g_wf, "perceptual_loss");
  auto loss = feature_distance(extractor->forward(y), extractor->forward(g_wf), r);
  if (c_bkg.defined()) {
    require_same(c_bkg, g_bkg, "perceptual_loss");
    loss = loss + feature_distance(extractor->forward(c_bkg), extractor->forward(g_bkg), r);
  }
  return loss;
}

torch::Tensor patch_mask(const torch::Tensor& m, std::int64_t patch_h, std::int64_t patch_w) {
  if (m.dim() != 4 || patch_h <= 0 || patch_w <= 0 || m.size(2) % patch_h != 0 || m.size(3) % patch_w != 0) {
    throw InputError("patch_mask: mask " + c10::str(m.sizes()) + " does not tile a " + std::to_string(patch_h) + "x" +
                     std::to_string(patch_w) + " grid");
  }
  namespace F = torch::nn::functional;
  const auto kh = m.size(2) / patch_h;
  const auto kw = m.size(3) / patch_w;
  auto avg = F::avg_pool2d(m.detach(), F::AvgPool2dFuncOptions({kh, kw}).stride({kh, kw}));
  return (avg >= 0.5).to(m.dtype());
}

torch::Tensor checked_scores(const torch::Tensor& scores) {
  if (!torch::isfinite(scores).all().item<bool>()) {
    throw RuntimeFailure("discriminator produced non-finite scores");
  }
  return scores.clamp(kScoreEpsilon, 1.0 - kScoreEpsilon);
}

torch::Tensor generator_adversarial(const torch::Tensor& fake_scores, const torch::Tensor& m_patch, Reduction r) {
  require_same(fake_scores, m_patch, "generator_adversarial");
  return -reduce(torch::log(checked_scores(fake_scores)) * m_patch, r);
}

torch::Tensor discriminator_adversarial(const torch::Tensor& real_scores, const torch::Tensor& fake_scores,
                                        const torch::Tensor& m_patch, Reduction r) {
  require_same(fake_scores, m_patch, "discriminator_adversarial");
  auto real = checked_scores(real_scores);
  auto fake = checked_scores(fake_scores);
  return -reduce(torch::log(real), r) - reduce(torch::log(fake) * (1.0 - m_patch), r) -
         reduce(torch::log(1.0 - fake) * m_patch, r);
}

torch::Tensor gradient_penalty(const torch::Tensor& l_g, const std::vector<torch::Tensor>& params, bool create_graph) {
  if (!l_g.requires_grad()) {
    throw RuntimeFailure("gradient_penalty: L_G is not tracking gradients");
  }
  std::vector<torch::Tensor> inputs;
  for (const auto& p : params) {
    if (p.requires_grad()) inputs.push_back(p);
  }
  if (inputs.empty()) return torch::zeros({}, l_g.options());
  auto grads = torch::autograd::grad({l_g}, inputs, {}, /*retain_graph=*/true, create_graph, /*allow_unused=*/true);
  auto total = torch::zeros({}, l_g.options());
  for (const auto& g : grads) {
    if (g.defined()) total = total + g.pow(2).sum();
  }
  return create_graph ? total : total.detach();
}

torch::Tensor discriminator_feature_perceptual(const std::vector<torch::Tensor>& fake_features,
                                               const std::vector<torch::Tensor>& real_features, Reduction r) {
  std::vector<torch::Tensor> real;
  real.reserve(real_features.size());
  for (const auto& f : real_features) real.push_back(f.detach());
  return feature_distance(fake_features, real, r);
}

GeneratorTerms generator_objective(const GeneratorInputs& in, PatchDiscriminator& disc, FeatureExtractor& extractor,
                                   const std::vector<torch::Tensor>& penalty_params, const LossConfig& cfg) {
  const auto r = cfg.reduction;
  const auto& w = cfg.weights;
  GeneratorTerms t;
  t.pixel = pixel_loss(in.y, in.c_bkg, in.g_wf, in.g_bkg, r);
  t.perceptual = perceptual_loss(in.y, in.c_bkg, in.g_wf, in.g_bkg, extractor, r);

  auto fake = disc->forward_features(in.y);
  std::vector<torch::Tensor> real_features;
  {
    torch::NoGradGuard guard;
    real_features = disc->forward_features(in.g_wf).features;
  }
  auto m_patch = patch_mask(in.m, fake.scores.size(2), fake.scores.size(3));
  t.gen_adv = generator_adversarial(fake.scores, m_patch, r);
  t.disc_perceptual = discriminator_feature_perceptual(fake.features, real_features, r);

  switch (cfg.penalty) {
    case PenaltyMode::off: t.penalty = torch::zeros({}, in.y.options()); break;
    case PenaltyMode::detached: t.penalty = gradient_penalty(t.gen_adv, penalty_params, false); break;
    case PenaltyMode::second_order: t.penalty = gradient_penalty(t.gen_adv, penalty_params, true); break;
  }

  t.total = w.pixel * t.pixel + w.perceptual * t.perceptual + w.adversarial * t.gen_adv +
            w.disc_perceptual * t.disc_perceptual + w.penalty * t.penalty;
  return t;
}

torch::Tensor discriminator_objective(const torch::Tensor& y, const torch::Tensor& g_wf, const torch::Tensor& m,
                                      PatchDiscriminator& disc, Reduction r) {
  auto real = disc->forward(g_wf);
  auto fake = disc->forward(y.detach());
  auto m_patch = patch_mask(m, fake.size(2), fake.size(3));
  return discriminator_adversarial(real, fake, m_patch, r);
}

}  // namespace wmr::losses
