#include "wmr/model.hpp"

#include "wmr/errors.hpp"
#include "wmr/image.hpp"

#include <cstdio>
#include <fstream>

namespace wmr {

namespace fs = std::filesystem;

std::vector<std::int64_t> tap_indices(std::int64_t blocks) {
  std::vector<std::int64_t> taps;
  for (std::int64_t i = 1; i <= 3; ++i) {
    taps.push_back((i * blocks + 2) / 3);
  }
  return taps;
}

BranchImpl::BranchImpl(std::int64_t in_channels, const ModelConfig& cfg, bool with_decoder)
    : taps_(tap_indices(cfg.ta_blocks_per_branch)) {
  encoder = register_module("encoder", Encoder(in_channels, cfg));
  for (std::int64_t b = 0; b < cfg.ta_blocks_per_branch; ++b) {
    auto block = make_feature_block(cfg.attention_kind, cfg.channels, cfg.attention_heads, cfg.learnable_temperature);
    register_module("block" + std::to_string(b), block.ptr());
    blocks_.push_back(std::move(block));
  }
  if (with_decoder) {
    decoder = register_module("decoder", Decoder(cfg, 3));
  }
}

BranchOutput BranchImpl::forward(const torch::Tensor& x) {
  BranchOutput out;
  auto h = encoder->forward(x);
  out.features.push_back(h);
  std::size_t next_tap = 0;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = blocks_[b].forward(h);
    while (next_tap < taps_.size() && taps_[next_tap] == static_cast<std::int64_t>(b + 1)) {
      out.features.push_back(h);
      ++next_tap;
    }
  }
  if (decoder) {
    out.image = decoder->forward(h);
  }
  return out;
}

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
  encoder = register_module("encoder", Encoder(4, cfg));
  const auto per_group = cfg.ffc_blocks / cfg.ffc_groups;
  for (std::int64_t g = 0; g < cfg.ffc_groups; ++g) {
    std::vector<torch::nn::AnyModule> group;
    for (std::int64_t b = 0; b < per_group; ++b) {
      torch::nn::AnyModule block =
          cfg.backbone_block == BackboneBlockKind::ffc
              ? torch::nn::AnyModule(FFCBlock(cfg.channels, cfg.ffc_global_ratio))
              : torch::nn::AnyModule(TransposedAttention(cfg.channels, cfg.attention_heads, cfg.learnable_temperature));
      register_module("group" + std::to_string(g) + "_block" + std::to_string(b), block.ptr());
      group.push_back(std::move(block));
    }
    groups_.push_back(std::move(group));
  }
  decoder = register_module("decoder", Decoder(cfg, 3));
}

torch::Tensor BackboneImpl::encode(const torch::Tensor& x) { return encoder->forward(x); }

torch::Tensor BackboneImpl::group(std::size_t index, const torch::Tensor& x) {
  auto h = x;
  for (auto& block : groups_.at(index)) h = block.forward(h);
  return h;
}

torch::Tensor BackboneImpl::decode(const torch::Tensor& x) { return decoder->forward(x); }

WatermarkRemoverImpl::WatermarkRemoverImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  backbone = register_module("backbone", Backbone(cfg_));
  if (cfg_.use_wcc) {
    wcc = register_module("wcc", Branch(4, cfg_, true));
  }
  if (cfg_.use_bce) {
    bce = register_module("bce", Branch(cfg_.use_wcc ? 7 : 4, cfg_, false));
  }
  const std::int64_t branches = (cfg_.use_wcc ? 1 : 0) + (cfg_.use_bce ? 1 : 0);
  if (branches > 0) {
    for (int i = 0; i < 4; ++i) {
      const auto name = "fusion" + std::to_string(i);
      if (cfg_.fusion_kind == FusionKind::gfm) {
        gfm_.push_back(register_module(name, GatedFusion(cfg_.channels, branches)));
      } else {
        conv_fusion_.push_back(register_module(name, ConvFusion(cfg_.channels, branches)));
      }
    }
  }
  if (!cfg_.pretrained_backbone.empty()) {
    load_backbone(cfg_.pretrained_backbone, false);
  }
}

void WatermarkRemoverImpl::check_inputs(const torch::Tensor& x, const torch::Tensor& m) const {
  check_spatial(x, cfg_.downsample_factor(), "model input");
  if (x.size(1) != 3) {
    throw InputError("model input: expected 3-channel images");
  }
  if (!m.defined() || m.dim() != 4 || m.size(1) != 1 || m.size(0) != x.size(0) || m.size(2) != x.size(2) ||
      m.size(3) != x.size(3)) {
    throw InputError("model input: mask must be [N,1,H,W] matching the image");
  }
}

BranchOutput WatermarkRemoverImpl::wcc_forward(const torch::Tensor& x, const torch::Tensor& m) {
  if (!wcc) {
    throw InputError("WCC branch is disabled in this configuration");
  }
  check_inputs(x, m);
  return wcc->forward(torch::cat({x, m}, 1));
}

std::vector<torch::Tensor> WatermarkRemoverImpl::bce_forward(const torch::Tensor& x, const torch::Tensor& m,
                                                             const torch::Tensor& c_bkg) {
  if (!bce) {
    throw InputError("BCE branch is disabled in this configuration");
  }
  check_inputs(x, m);
  if (cfg_.use_wcc) {
    if (!c_bkg.defined() || c_bkg.sizes() != x.sizes()) {
      throw InputError("bce_forward: C_bkg must match the image shape");
    }
    return bce->forward(torch::cat({x, m, c_bkg}, 1)).features;
  }
  return bce->forward(torch::cat({x, m}, 1)).features;
}

torch::Tensor WatermarkRemoverImpl::fuse(std::size_t index, const torch::Tensor& inp,
                                         const std::vector<torch::Tensor>& branches) {
  if (!gfm_.empty()) return gfm_[index]->forward(inp, branches);
  if (!conv_fusion_.empty()) return conv_fusion_[index]->forward(inp, branches);
  return inp;
}

ForwardTrace WatermarkRemoverImpl::full_forward(const torch::Tensor& x, const torch::Tensor& m) {
  check_inputs(x, m);
  ForwardTrace t;
  t.x_una = (1.0 - m) * x;
  if (cfg_.use_wcc) {
    auto out = wcc_forward(x, m);
    t.c_bkg = out.image;
    t.f_wcc = std::move(out.features);
  }
  if (cfg_.use_bce) {
    t.f_bce = bce_forward(x, m, t.c_bkg);
  }
  t.f_inp.push_back(backbone->encode(torch::cat({t.x_una, m}, 1)));
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<torch::Tensor> branches;
    if (cfg_.use_wcc) branches.push_back(t.f_wcc[i]);
    if (cfg_.use_bce) branches.push_back(t.f_bce[i]);
    t.f_hat_inp.push_back(fuse(i, t.f_inp[i], branches));
    if (i < 3) {
      t.f_inp.push_back(backbone->group(i, t.f_hat_inp[i]));
    }
  }
  t.y = backbone->decode(t.f_hat_inp[3]);
  return t;
}

torch::Tensor WatermarkRemoverImpl::backbone_forward(const torch::Tensor& x, const torch::Tensor& m) {
  check_inputs(x, m);
  auto h = backbone->encode(torch::cat({(1.0 - m) * x, m}, 1));
  for (std::size_t i = 0; i < 3; ++i) h = backbone->group(i, h);
  return backbone->decode(h);
}

std::vector<torch::Tensor> WatermarkRemoverImpl::backbone_parameters() const { return backbone->parameters(); }

std::vector<torch::Tensor> WatermarkRemoverImpl::adapter_parameters() const {
  std::vector<torch::Tensor> out;
  if (wcc) {
    auto p = wcc->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  if (bce) {
    auto p = bce->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto f = fusion_parameters();
  out.insert(out.end(), f.begin(), f.end());
  return out;
}

std::vector<torch::Tensor> WatermarkRemoverImpl::fusion_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& g : gfm_) {
    auto p = g->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  for (const auto& c : conv_fusion_) {
    auto p = c->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void WatermarkRemoverImpl::set_backbone_trainable(bool trainable) {
  for (auto& p : backbone->parameters()) p.set_requires_grad(trainable);
}

checkpoint::LoadReport WatermarkRemoverImpl::load_backbone(const fs::path& archive, bool strict) {
  auto tensors = checkpoint::load(archive);
  return checkpoint::apply(*this, tensors, "backbone.", strict);
}

// ---------------------------------------------------------------------------

std::string config_hash(const ModelConfig& cfg) {
  const auto text = cfg.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_model_card(const fs::path& path, const ModelCard& card) {
  nlohmann::json j = {{"format", "wmr-model-card/1"},
                      {"model_id", card.model_id},
                      {"config", card.config.to_json()},
                      {"config_hash", config_hash(card.config)}};
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) {
    throw RuntimeFailure("cannot write model card " + path.string());
  }
}

ModelCard read_model_card(const fs::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw InputError("cannot read model card " + path.string());
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed model card " + path.string() + ": " + e.what());
  }
  ModelCard card;
  card.model_id = j.value("model_id", "");
  card.config = ModelConfig::from_json(j.at("config"));
  card.config_hash = j.value("config_hash", "");
  return card;
}

void save_model(const fs::path& dir, WatermarkRemover& model, const std::string& model_id) {
  fs::create_directories(dir);
  write_model_card(dir / kModelCardFile, {model_id, model->config(), config_hash(model->config())});
  checkpoint::save(dir / kGeneratorFile, checkpoint::state_of(*model));
}

LoadedModel load_model(const fs::path& dir) {
  LoadedModel out;
  out.card = read_model_card(dir / kModelCardFile);
  if (!out.card.config_hash.empty() && out.card.config_hash != config_hash(out.card.config)) {
    throw InputError("model card hash does not match its config: " + (dir / kModelCardFile).string());
  }
  auto cfg = out.card.config;
  cfg.pretrained_backbone.clear();  // parameters come from the archive below
  out.model = WatermarkRemover(cfg);
  checkpoint::apply(*out.model, checkpoint::load(dir / kGeneratorFile), "", true);
  out.model->eval();
  return out;
}

// ---------------------------------------------------------------------------

RemovalResult remove_watermark(WatermarkRemover& model, const torch::Tensor& image, const torch::Tensor& mask) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw InputError("remove_watermark: expected a [3,H,W] image");
  }
  const auto h = image.size(1);
  const auto w = image.size(2);
  auto m = image::resize_mask(mask, h, w);
  const auto factor = model->config().downsample_factor();
  const auto pad_h = (factor - h % factor) % factor;
  const auto pad_w = (factor - w % factor) % factor;

  auto dtype = model->backbone->encoder->parameters().front().scalar_type();
  auto x = image.unsqueeze(0).to(dtype);
  auto mm = m.unsqueeze(0).to(dtype);
  if (pad_h > 0 || pad_w > 0) {
    namespace F = torch::nn::functional;
    const bool can_reflect = pad_h < h && pad_w < w;
    auto opts = F::PadFuncOptions({0, pad_w, 0, pad_h});
    if (can_reflect) {
      opts.mode(torch::kReflect);
    } else {
      opts.mode(torch::kReplicate);
    }
    x = F::pad(x, opts);
    mm = F::pad(mm, opts);
  }

  torch::NoGradGuard guard;
  auto trace = model->full_forward(x, mm);
  using torch::indexing::Slice;
  RemovalResult r;
  r.y = trace.y.index({0, Slice(), Slice(0, h), Slice(0, w)}).to(torch::kFloat).contiguous();
  if (trace.c_bkg.defined()) {
    r.c_bkg = trace.c_bkg.index({0, Slice(), Slice(0, h), Slice(0, w)}).to(torch::kFloat).contiguous();
  }
  return r;
}

}  // namespace wmr
