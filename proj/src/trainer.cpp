#include "wmr/trainer.hpp"

#include "wmr/checkpoint.hpp"
#include "wmr/config.hpp"
#include "wmr/errors.hpp"
#include "wmr/image.hpp"
#include "wmr/metrics.hpp"

#include <cmath>
#include <fstream>

namespace wmr::trainer {

namespace fs = std::filesystem;

synth::MaskAugParams MaskAugDistribution::sample(Rng& rng) const {
  synth::MaskAugParams p;
  const double u = rng.uniform();
  p.op = u < p_dilate ? synth::MorphOp::dilate : (u < p_dilate + p_erode ? synth::MorphOp::erode : synth::MorphOp::none);
  p.kernel_radius = static_cast<int>(rng.uniform_int(min_radius, max_radius));
  p.polygonalize = rng.bernoulli(p_polygonalize);
  p.polygon_vertices = static_cast<int>(rng.uniform_int(min_vertices, max_vertices));
  p.seed = rng.next();
  return p;
}

nlohmann::json MaskAugDistribution::to_json() const {
  return {{"enabled", enabled},       {"p_dilate", p_dilate},         {"p_erode", p_erode},
          {"min_radius", min_radius}, {"max_radius", max_radius},     {"p_polygonalize", p_polygonalize},
          {"min_vertices", min_vertices}, {"max_vertices", max_vertices}};
}

MaskAugDistribution MaskAugDistribution::from_json(const nlohmann::json& j) {
  MaskAugDistribution d;
  d.enabled = j.value("enabled", d.enabled);
  d.p_dilate = j.value("p_dilate", d.p_dilate);
  d.p_erode = j.value("p_erode", d.p_erode);
  d.min_radius = j.value("min_radius", d.min_radius);
  d.max_radius = j.value("max_radius", d.max_radius);
  d.p_polygonalize = j.value("p_polygonalize", d.p_polygonalize);
  d.min_vertices = j.value("min_vertices", d.min_vertices);
  d.max_vertices = j.value("max_vertices", d.max_vertices);
  if (d.p_dilate < 0 || d.p_erode < 0 || d.p_dilate + d.p_erode > 1.0) {
    throw InputError("mask_aug: p_dilate and p_erode must be non-negative and sum to at most 1");
  }
  if (d.min_radius < 1 || d.max_radius > 7 || d.min_radius > d.max_radius) {
    throw InputError("mask_aug: radii must satisfy 1 <= min_radius <= max_radius <= 7");
  }
  if (d.min_vertices < 3 || d.min_vertices > d.max_vertices) {
    throw InputError("mask_aug: vertices must satisfy 3 <= min_vertices <= max_vertices");
  }
  return d;
}

std::string to_string(MaskSource s) { return s == MaskSource::coarse ? "coarse" : "precise"; }

MaskSource mask_source_from_string(const std::string& s) {
  if (s == "coarse") return MaskSource::coarse;
  if (s == "precise") return MaskSource::precise;
  throw InputError("unknown mask_source '" + s + "' (expected coarse or precise)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"loss", loss.to_json()},
          {"mask_aug", mask_aug.to_json()},
          {"train",
           {{"mask_source", to_string(mask_source)},
            {"learning_rate", learning_rate},
            {"beta1", beta1},
            {"beta2", beta2},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"seed", seed},
            {"freeze_backbone", freeze_backbone},
            {"checkpoint_every", checkpoint_every},
            {"grad_clip", grad_clip},
            {"eval_every", eval_every},
            {"model_id", model_id}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("loss")) c.loss = losses::LossConfig::from_json(j.at("loss"));
    if (j.contains("mask_aug")) c.mask_aug = MaskAugDistribution::from_json(j.at("mask_aug"));
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.mask_source = mask_source_from_string(t.value("mask_source", to_string(c.mask_source)));
      c.learning_rate = t.value("learning_rate", c.learning_rate);
      c.beta1 = t.value("beta1", c.beta1);
      c.beta2 = t.value("beta2", c.beta2);
      c.batch_size = t.value("batch_size", c.batch_size);
      c.epochs = t.value("epochs", c.epochs);
      c.max_steps = t.value("max_steps", c.max_steps);
      c.seed = t.value("seed", c.seed);
      c.freeze_backbone = t.value("freeze_backbone", c.freeze_backbone);
      c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
      c.grad_clip = t.value("grad_clip", c.grad_clip);
      c.eval_every = t.value("eval_every", c.eval_every);
      c.model_id = t.value("model_id", c.model_id);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("invalid training config: ") + e.what());
  }
  c.model.validate();
  if (!(c.learning_rate > 0) || c.batch_size < 1 || c.epochs < 0 || c.max_steps < 0) {
    throw InputError("training config: learning_rate > 0, batch_size >= 1, epochs >= 0, max_steps >= 0 required");
  }
  return c;
}

std::vector<std::string> TrainConfig::preset_names() {
  return {"full", "desk",  "backbone_only", "bce_only", "wcc_backbone",           "ta2",         "ta3",
          "ta6",   "conv3", "conv7",         "dconv5d3", "conventional_attention", "conv_fusion", "unaugmented_masks",
          "no_pretrain"};
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "full") {
    c.model = ModelConfig::full_scale();
    c.batch_size = 16;
    c.epochs = 100;
    c.model_id = "wmr-full";
    return c;
  }
  c.model = ModelConfig::desk();
  c.batch_size = 4;
  if (name == "desk" || name == "ta2" || name == "no_pretrain") {
    c.model.ta_blocks_per_branch = 2;
  } else if (name == "ta3") {
    c.model.ta_blocks_per_branch = 3;
  } else if (name == "ta6") {
    c.model.ta_blocks_per_branch = 6;
  } else if (name == "backbone_only") {
    c.model.use_wcc = false;
    c.model.use_bce = false;
  } else if (name == "bce_only") {
    c.model.use_wcc = false;
  } else if (name == "wcc_backbone") {
    c.model.use_wcc = false;
    c.model.backbone_block = BackboneBlockKind::transposed_attention;
  } else if (name == "conv3") {
    c.model.attention_kind = AttentionKind::conv3;
  } else if (name == "conv7") {
    c.model.attention_kind = AttentionKind::conv7;
  } else if (name == "dconv5d3") {
    c.model.attention_kind = AttentionKind::dconv5d3;
  } else if (name == "conventional_attention") {
    c.model.attention_kind = AttentionKind::conventional;
  } else if (name == "conv_fusion") {
    c.model.fusion_kind = FusionKind::conv;
  } else if (name == "unaugmented_masks") {
    c.mask_aug.enabled = false;
    c.mask_source = MaskSource::precise;
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw InputError("unknown preset '" + name + "' (available: " + names + ")");
  }
  if (name == "no_pretrain") c.model.pretrained_backbone.clear();
  c.model_id = "wmr-" + name;
  return c;
}

nlohmann::json StepRecord::to_json() const {
  auto j = losses.to_json();
  j["kind"] = "step";
  j["step"] = step;
  j["epoch"] = epoch;
  return j;
}

StepRecord StepRecord::from_json(const nlohmann::json& j) {
  StepRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.epoch = j.at("epoch").get<std::int64_t>();
  r.losses = losses::LossBreakdown::from_json(j);
  return r;
}

nlohmann::json TrainState::to_json() const {
  return {{"step", step}, {"epoch", epoch}, {"order", order}, {"cursor", cursor}, {"rng_state", rng_state}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
  TrainState s;
  s.step = j.at("step").get<std::int64_t>();
  s.epoch = j.at("epoch").get<std::int64_t>();
  s.order = j.at("order").get<std::vector<std::int64_t>>();
  s.cursor = j.at("cursor").get<std::int64_t>();
  s.rng_state = j.at("rng_state").get<std::string>();
  return s;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, synth::Dataset dataset)
    : cfg_(std::move(cfg)), dataset_(std::move(dataset)), rng_(derive_seed(cfg_.seed, 0, 0x7a)) {
  if (dataset_.size() == 0) throw InputError("training dataset is empty");
  cfg_.model.validate();
  const auto size = dataset_.manifest().image_size;
  if (size != cfg_.model.height || size != cfg_.model.width) {
    throw InputError("dataset image size " + std::to_string(size) + " does not match model " +
                     std::to_string(cfg_.model.height) + "x" + std::to_string(cfg_.model.width));
  }
  torch::manual_seed(cfg_.seed);
  model_ = WatermarkRemover(cfg_.model);
  disc_ = PatchDiscriminator(cfg_.model.disc_channels);
  extractor_ = losses::FeatureExtractor();
  if (cfg_.freeze_backbone) model_->set_backbone_trainable(false);

  auto adam = [&](std::vector<torch::Tensor> params) {
    return std::make_unique<torch::optim::Adam>(
        std::move(params),
        torch::optim::AdamOptions(cfg_.learning_rate).betas({cfg_.beta1, cfg_.beta2}));
  };
  g_opt_ = adam(model_->parameters());
  d_opt_ = adam(disc_->parameters());
  state_.rng_state = rng_.state();
}

Trainer Trainer::resume(const fs::path& dir, synth::Dataset dataset) {
  auto cfg = TrainConfig::from_json(config::read_file(dir / kTrainConfigFile));
  cfg.model.pretrained_backbone.clear();
  Trainer t(std::move(cfg), std::move(dataset));
  checkpoint::apply(*t.model_, checkpoint::load(dir / kGeneratorFile));
  checkpoint::apply(*t.disc_, checkpoint::load(dir / kDiscriminatorFile));
  try {
    torch::load(*t.g_opt_, (dir / kGeneratorOptimFile).string());
    torch::load(*t.d_opt_, (dir / kDiscriminatorOptimFile).string());
  } catch (const c10::Error& e) {
    throw InputError("cannot restore optimizer state from " + dir.string() + ": " + e.what_without_backtrace());
  }
  t.state_ = TrainState::from_json(config::read_file(dir / kStateFile));
  t.rng_.set_state(t.state_.rng_state);
  return t;
}

std::vector<torch::Tensor> Trainer::generator_parameters() const { return model_->parameters(); }

std::vector<torch::Tensor> Trainer::penalty_parameters() const {
  return cfg_.loss.penalty_scope == losses::PenaltyScope::adapters ? model_->adapter_parameters()
                                                                   : model_->parameters();
}

Batch Trainer::make_batch(const std::vector<synth::WatermarkSample>& samples) {
  if (samples.empty()) throw InputError("empty batch");
  std::vector<torch::Tensor> xs, ms, wf, bk;
  Batch b;
  for (const auto& s : samples) {
    auto m = cfg_.mask_source == MaskSource::coarse ? s.m : s.m0;
    if (cfg_.mask_aug.enabled) {
      const auto aug = cfg_.mask_aug.sample(rng_);
      auto a = synth::morph(m, aug.op, aug.kernel_radius);
      if (a.sum().item<double>() == 0.0) a = m;
      if (aug.polygonalize) a = synth::polygonalize(a, aug.polygon_vertices);
      m = a;
    }
    xs.push_back(s.x);
    ms.push_back(m);
    wf.push_back(s.g_wf);
    bk.push_back(s.g_bkg);
    b.ids.push_back(s.id);
  }
  b.x = torch::stack(xs);
  b.m = torch::stack(ms);
  b.g_wf = torch::stack(wf);
  b.g_bkg = torch::stack(bk);
  return b;
}

namespace {

void set_trainable(PatchDiscriminator& d, bool on) {
  for (auto& p : d->parameters()) p.set_requires_grad(on);
}

std::string dump(const losses::LossBreakdown& b) { return b.to_json().dump(); }

}  // namespace

losses::LossBreakdown Trainer::train_step(const Batch& batch) {
  const auto r = cfg_.loss.reduction;
  model_->train();
  disc_->train();
  auto trace = model_->full_forward(batch.x, batch.m);

  losses::LossBreakdown out;
  out.reduction = r;
  out.n_feature_stages = extractor_->stages();

  set_trainable(disc_, true);
  d_opt_->zero_grad();
  auto l_d = losses::discriminator_objective(trace.y, batch.g_wf, batch.m, disc_, r);
  out.disc_adv = l_d.item<double>();
  if (!std::isfinite(out.disc_adv)) {
    throw RuntimeFailure("non-finite discriminator loss at step " + std::to_string(state_.step) + ": " + dump(out));
  }
  l_d.backward();
  d_opt_->step();

  set_trainable(disc_, false);
  g_opt_->zero_grad();
  losses::GeneratorInputs in{trace.y, trace.c_bkg, batch.g_wf, batch.g_bkg, batch.m};
  auto terms = losses::generator_objective(in, disc_, extractor_, penalty_parameters(), cfg_.loss);
  out.pixel = terms.pixel.item<double>();
  out.perceptual = terms.perceptual.item<double>();
  out.gen_adv = terms.gen_adv.item<double>();
  out.disc_perceptual = terms.disc_perceptual.item<double>();
  out.penalty = terms.penalty.item<double>();
  out.total = terms.total.item<double>();
  if (!out.finite()) {
    set_trainable(disc_, true);
    throw RuntimeFailure("non-finite generator loss at step " + std::to_string(state_.step) + ": " + dump(out));
  }
  terms.total.backward();
  if (cfg_.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.grad_clip);
  g_opt_->step();
  set_trainable(disc_, true);
  return out;
}

void Trainer::start_epoch() {
  const auto n = static_cast<std::int64_t>(dataset_.size());
  state_.order.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) state_.order[i] = i;
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(state_.order[i], state_.order[rng_.uniform_int(0, i)]);
  state_.cursor = 0;
}

StepRecord Trainer::step() {
  if (state_.order.empty()) start_epoch();
  std::vector<synth::WatermarkSample> samples;
  const auto n = static_cast<std::int64_t>(state_.order.size());
  while (state_.cursor < n && static_cast<std::int64_t>(samples.size()) < cfg_.batch_size) {
    samples.push_back(dataset_.load(static_cast<std::size_t>(state_.order[state_.cursor++])));
  }
  auto batch = make_batch(samples);
  StepRecord rec;
  rec.epoch = state_.epoch;
  rec.losses = train_step(batch);
  rec.step = ++state_.step;
  if (state_.cursor >= n) {
    ++state_.epoch;
    state_.order.clear();
    state_.cursor = 0;
  }
  state_.rng_state = rng_.state();
  return rec;
}

void Trainer::save(const fs::path& dir) {
  fs::create_directories(dir);
  save_model(dir, model_, cfg_.model_id);
  checkpoint::save(dir / kDiscriminatorFile, checkpoint::state_of(*disc_));
  torch::save(*g_opt_, (dir / kGeneratorOptimFile).string());
  torch::save(*d_opt_, (dir / kDiscriminatorOptimFile).string());
  state_.rng_state = rng_.state();
  config::persist(dir / kStateFile, state_.to_json());
  config::persist(dir / kTrainConfigFile, cfg_.to_json());
}

double Trainer::measure_rmse_w() {
  model_->eval();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < dataset_.size(); ++i) {
    auto s = dataset_.load(i);
    auto y = image::quantize8(remove_watermark(model_, s.x, s.m).y.clamp(0.0, 1.0));
    if (auto v = metrics::rmse_w(y, s.g_wf, s.m0)) {
      total += *v;
      ++count;
    }
  }
  model_->train();
  return count ? total / static_cast<double>(count) : 0.0;
}

fs::path Trainer::fit(const fs::path& out, const std::function<void(const StepRecord&)>& on_step) {
  fs::create_directories(out);
  config::persist(out / kTrainConfigFile, cfg_.to_json());

  nlohmann::json summary;
  if (fs::exists(out / kSummaryFile)) summary = config::read_file(out / kSummaryFile);
  if (!summary.contains("initial_rmse_w")) summary["initial_rmse_w"] = measure_rmse_w();
  std::vector<nlohmann::json> evals = summary.value("evals", std::vector<nlohmann::json>{});

  std::ofstream log(out / kLossLogFile, std::ios::app);
  if (!log) throw RuntimeFailure("cannot open " + (out / kLossLogFile).string());

  auto more = [&] {
    return state_.epoch < cfg_.epochs && (cfg_.max_steps == 0 || state_.step < cfg_.max_steps);
  };
  while (more()) {
    auto rec = step();
    log << rec.to_json().dump() << '\n';
    log.flush();
    if (on_step) on_step(rec);
    if (cfg_.checkpoint_every > 0 && rec.step % cfg_.checkpoint_every == 0) save(out);
    if (cfg_.eval_every > 0 && rec.step % cfg_.eval_every == 0) {
      evals.push_back({{"step", rec.step}, {"rmse_w", measure_rmse_w()}});
    }
  }
  if (!log) throw RuntimeFailure("failed writing " + (out / kLossLogFile).string());
  save(out);
  summary["final_rmse_w"] = measure_rmse_w();
  summary["steps"] = state_.step;
  summary["epochs"] = state_.epoch;
  summary["evals"] = evals;
  config::persist(out / kSummaryFile, summary);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<StepRecord> read_loss_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read loss log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.value("kind", std::string()) == "step") out.push_back(StepRecord::from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corrupt loss log line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<CurvePoint> epoch_curves(const std::vector<StepRecord>& records) {
  std::vector<CurvePoint> out;
  for (const auto& r : records) {
    if (out.empty() || out.back().epoch != r.epoch) {
      out.push_back({r.epoch, 0, {}});
      out.back().mean.reduction = r.losses.reduction;
      out.back().mean.n_feature_stages = r.losses.n_feature_stages;
    }
    auto& p = out.back();
    auto& m = p.mean;
    m.pixel += r.losses.pixel;
    m.perceptual += r.losses.perceptual;
    m.gen_adv += r.losses.gen_adv;
    m.disc_adv += r.losses.disc_adv;
    m.disc_perceptual += r.losses.disc_perceptual;
    m.penalty += r.losses.penalty;
    m.total += r.losses.total;
    ++p.steps;
  }
  for (auto& p : out) {
    const auto n = static_cast<double>(p.steps);
    for (double* v : {&p.mean.pixel, &p.mean.perceptual, &p.mean.gen_adv, &p.mean.disc_adv, &p.mean.disc_perceptual,
                      &p.mean.penalty, &p.mean.total}) {
      *v /= n;
    }
  }
  return out;
}

}  // namespace wmr::trainer
