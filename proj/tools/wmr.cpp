// wmr: dataset synthesis, training, evaluation, single-image removal and the
// HTTP service behind one executable.
//
// Exit codes: 0 success, 2 bad input, 3 runtime failure.

#include "wmr/config.hpp"
#include "wmr/errors.hpp"
#include "wmr/image.hpp"
#include "wmr/metrics.hpp"
#include "wmr/model.hpp"
#include "wmr/service.hpp"
#include "wmr/synth.hpp"
#include "wmr/trainer.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace wmr;

namespace {

constexpr int kOk = 0;
constexpr int kBadInput = 2;
constexpr int kFailure = 3;

bool g_quiet = false;

void info(const std::string& msg) {
  if (!g_quiet) std::cerr << msg << '\n';
}

struct SynthArgs {
  std::int64_t n = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::string backgrounds;
  std::string watermarks;
  int size = 64;
  bool identity = false;
  std::optional<double> opacity;
  int jobs = 1;
};

int cmd_synth(const SynthArgs& a) {
  if (a.n < 0) throw InputError("--n must be non-negative");
  auto bgs = a.backgrounds.empty() ? synth::SourceCollection::procedural(synth::SourceCollection::Kind::backgrounds)
                                   : synth::SourceCollection::from_directory(a.backgrounds,
                                                                             synth::SourceCollection::Kind::backgrounds);
  auto wms = a.watermarks.empty() ? synth::SourceCollection::procedural(synth::SourceCollection::Kind::watermarks)
                                  : synth::SourceCollection::from_directory(a.watermarks,
                                                                            synth::SourceCollection::Kind::watermarks);
  synth::GenerateOptions opts;
  opts.n = a.n;
  opts.master_seed = a.seed;
  opts.image_size = a.size;
  opts.identity_distortion = a.identity;
  opts.force_opacity = a.opacity;
  opts.jobs = a.jobs;
  synth::generate_dataset(bgs, wms, opts, a.out);
  std::cout << (fs::path(a.out) / "manifest.jsonl").string() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string preset = "desk";
  std::string config_file;
  std::vector<std::string> sets;
  bool resume = false;
  std::int64_t log_every = 10;
};

nlohmann::json train_defaults(const std::string& preset) { return trainer::TrainConfig::preset(preset).to_json(); }

int cmd_train(const TrainArgs& a) {
  auto dataset = synth::Dataset::open(a.data);
  const fs::path out = a.out;
  std::optional<trainer::Trainer> t;
  if (a.resume && fs::exists(out / trainer::kStateFile)) {
    if (!a.sets.empty() || !a.config_file.empty()) {
      throw InputError("--resume continues with the stored configuration; drop --config/--set");
    }
    t.emplace(trainer::Trainer::resume(out, std::move(dataset)));
    info("resuming at step " + std::to_string(t->state().step));
  } else {
    std::optional<fs::path> file;
    if (!a.config_file.empty()) file = a.config_file;
    auto effective = config::resolve(train_defaults(a.preset), file, a.sets);
    auto cfg = trainer::TrainConfig::from_json(effective);
    config::persist(out / "effective_config.json", cfg.to_json());
    t.emplace(std::move(cfg), std::move(dataset));
  }
  t->fit(out, [&](const trainer::StepRecord& r) {
    if (a.log_every > 0 && r.step % a.log_every == 0) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "step %lld epoch %lld total %.5f pixel %.5f L_D %.5f", static_cast<long long>(r.step),
                    static_cast<long long>(r.epoch), r.losses.total, r.losses.pixel, r.losses.disc_adv);
      info(buf);
    }
  });
  auto summary = config::read_file(out / trainer::kSummaryFile);
  std::cout << summary.dump() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string model;
  std::string out;
  std::string conditions = "fixed,coarser,white";
};

int cmd_eval(const EvalArgs& a) {
  auto dataset = synth::Dataset::open(a.data);
  auto conditions = metrics::parse_conditions(a.conditions);
  std::unique_ptr<metrics::Restorer> restorer;
  if (a.model == "identity-gt") {
    restorer = std::make_unique<metrics::GroundTruthRestorer>();
  } else if (a.model == "passthrough") {
    restorer = std::make_unique<metrics::PassthroughRestorer>();
  } else if (!a.model.empty()) {
    throw InputError("--model must be identity-gt or passthrough");
  } else {
    if (a.checkpoint.empty()) throw InputError("eval needs --checkpoint or --model");
    auto loaded = load_model(a.checkpoint);
    restorer = std::make_unique<metrics::ModelRestorer>(loaded.model, loaded.card.model_id);
  }
  losses::FeatureExtractor extractor;
  auto report = metrics::evaluate(*restorer, dataset, conditions, extractor);
  report.write(a.out);
  std::cout << report.to_text();
  return kOk;
}

struct RemoveArgs {
  std::string image;
  std::string mask;
  std::string checkpoint;
  std::string out;
  std::string dump_cbkg;
};

int cmd_remove(const RemoveArgs& a) {
  auto img = image::read(a.image, 3);
  if (!img) throw InputError("cannot read image " + a.image);
  const auto h = img->size(1);
  const auto w = img->size(2);
  torch::Tensor mask;
  if (a.mask == "white") {
    mask = torch::ones({1, h, w});
  } else if (a.mask == "none") {
    mask = torch::zeros({1, h, w});
  } else {
    auto m = image::read(a.mask, 1);
    if (!m) throw InputError("cannot read mask " + a.mask);
    mask = image::resize_mask(*m, h, w);
  }
  auto loaded = load_model(a.checkpoint);
  auto result = remove_watermark(loaded.model, *img, mask);
  image::write_png(a.out, result.y);
  if (!a.dump_cbkg.empty()) {
    if (!result.c_bkg.defined()) throw InputError("--dump-cbkg: this model has no background-component branch");
    image::write_png(a.dump_cbkg, result.c_bkg);
  }
  std::cout << a.out << '\n';
  return kOk;
}

struct ServeArgs {
  std::string checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  int workers = 2;
  std::size_t max_body = service::kDefaultMaxBody;
};

service::Service* g_service = nullptr;

int cmd_serve(const ServeArgs& a) {
  service::ServiceConfig cfg;
  cfg.host = a.host;
  cfg.port = a.port;
  cfg.workers = a.workers;
  cfg.max_body = a.max_body;
  std::optional<fs::path> ckpt;
  if (!a.checkpoint.empty()) ckpt = a.checkpoint;
  auto svc = service::Service::from_checkpoint(ckpt, cfg);
  info(std::string("service ") + (svc->ready() ? "ready" : "degraded") + " on " + a.host + ":" +
       std::to_string(a.port));
  g_service = svc.get();
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  const bool ok = svc->listen();
  g_service = nullptr;
  if (!ok) throw RuntimeFailure("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-mask visible watermark removal"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("-q,--quiet", g_quiet, "Suppress progress messages on stderr");
  std::function<int()> run;

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic watermark dataset");
  synth_cmd->add_option("--n", sa.n, "Number of samples")->required();
  synth_cmd->add_option("--seed", sa.seed, "Master seed")->capture_default_str();
  synth_cmd->add_option("--out", sa.out, "Output dataset directory")->required();
  synth_cmd->add_option("--backgrounds", sa.backgrounds, "Directory of background images (default: procedural)");
  synth_cmd->add_option("--watermarks", sa.watermarks, "Directory of watermark images (default: procedural)");
  synth_cmd->add_option("--size", sa.size, "Square image size")->capture_default_str();
  synth_cmd->add_flag("--identity", sa.identity, "Skip compression and resampling (testing only)");
  synth_cmd->add_option("--opacity", sa.opacity, "Force watermark opacity (binarizes the matte)");
  synth_cmd->add_option("--jobs", sa.jobs, "Worker threads")->capture_default_str();
  synth_cmd->callback([&] { run = [&] { return cmd_synth(sa); }; });

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", ta.data, "Dataset directory")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint directory")->required();
  train_cmd->add_option("--preset", ta.preset, "Named configuration")
      ->capture_default_str()
      ->check(CLI::IsMember(trainer::TrainConfig::preset_names()));
  train_cmd->add_option("--config", ta.config_file, "JSON config file layered over the preset");
  train_cmd->add_option("--set", ta.sets, "Override a config key: --set train.batch_size=2 (repeatable)");
  train_cmd->add_flag("--resume", ta.resume, "Continue from the checkpoint in --out if present");
  train_cmd->add_option("--log-every", ta.log_every, "Progress line interval in steps (0 = silent)")
      ->capture_default_str();
  train_cmd->footer("Config keys (shown with desk preset defaults):\n" +
                    config::describe_keys(train_defaults("desk")));
  train_cmd->callback([&] { run = [&] { return cmd_train(ta); }; });

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--data", ea.data, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory");
  eval_cmd->add_option("--model", ea.model, "Built-in restorer instead of a checkpoint: identity-gt | passthrough");
  eval_cmd->add_option("--out", ea.out, "Report directory")->required();
  eval_cmd->add_option("--conditions", ea.conditions, "Comma-separated subset of fixed,coarser,white,none")
      ->capture_default_str();
  eval_cmd->callback([&] { run = [&] { return cmd_eval(ea); }; });

  RemoveArgs ra;
  auto* remove_cmd = app.add_subcommand("remove", "Remove a watermark from one image");
  remove_cmd->add_option("--image", ra.image, "Input image")->required();
  remove_cmd->add_option("--mask", ra.mask, "Mask image, or 'white' (blind) or 'none'")->required();
  remove_cmd->add_option("--checkpoint", ra.checkpoint, "Checkpoint directory")->required();
  remove_cmd->add_option("--out", ra.out, "Output PNG")->required();
  remove_cmd->add_option("--dump-cbkg", ra.dump_cbkg, "Also write the background-component image here");
  remove_cmd->callback([&] { run = [&] { return cmd_remove(ra); }; });

  ServeArgs va;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP inference service");
  serve_cmd->add_option("--checkpoint", va.checkpoint, "Checkpoint directory (omit for a degraded service)");
  serve_cmd->add_option("--host", va.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", va.port, "Port")->capture_default_str();
  serve_cmd->add_option("--workers", va.workers, "Simultaneous forward passes")->capture_default_str();
  serve_cmd->add_option("--max-body", va.max_body, "Request size limit in bytes")->capture_default_str();
  serve_cmd->callback([&] { run = [&] { return cmd_serve(va); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kBadInput;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  }

  try {
    return run ? run() : kBadInput;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const RuntimeFailure& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kFailure;
  } catch (const c10::Error& e) {
    std::cerr << "failure: " << e.what_without_backtrace() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kFailure;
  }
}
