#include "wmr/blocks.hpp"

#include "wmr/errors.hpp"

#include <cmath>

namespace wmr {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                std::int64_t padding = 0, bool bias = true, std::int64_t groups = 1, std::int64_t dilation = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel)
                        .stride(stride)
                        .padding(padding)
                        .bias(bias)
                        .groups(groups)
                        .dilation(dilation));
}

void zero_init(nn::Conv2d& c) {
  torch::NoGradGuard guard;
  c->weight.zero_();
  if (c->bias.defined()) {
    c->bias.zero_();
  }
}

}  // namespace

std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::transposed: return "transposed";
    case AttentionKind::conventional: return "conventional";
    case AttentionKind::conv3: return "conv3";
    case AttentionKind::conv7: return "conv7";
    case AttentionKind::dconv5d3: return "dconv5d3";
  }
  return "transposed";
}

std::string to_string(FusionKind k) { return k == FusionKind::gfm ? "gfm" : "conv"; }

std::string to_string(BackboneBlockKind k) { return k == BackboneBlockKind::ffc ? "ffc" : "transposed_attention"; }

AttentionKind attention_kind_from_string(const std::string& s) {
  for (auto k : {AttentionKind::transposed, AttentionKind::conventional, AttentionKind::conv3, AttentionKind::conv7,
                 AttentionKind::dconv5d3}) {
    if (to_string(k) == s) return k;
  }
  throw InputError("unknown attention_kind '" + s + "'");
}

FusionKind fusion_kind_from_string(const std::string& s) {
  if (s == "gfm") return FusionKind::gfm;
  if (s == "conv") return FusionKind::conv;
  throw InputError("unknown fusion_kind '" + s + "'");
}

BackboneBlockKind backbone_block_from_string(const std::string& s) {
  if (s == "ffc") return BackboneBlockKind::ffc;
  if (s == "transposed_attention") return BackboneBlockKind::transposed_attention;
  throw InputError("unknown backbone_block '" + s + "'");
}

std::int64_t ModelConfig::global_channels() const {
  return static_cast<std::int64_t>(std::llround(ffc_global_ratio * static_cast<double>(channels)));
}

void ModelConfig::validate() const {
  if (downsample_stages < 1 || downsample_stages > 8) {
    throw InputError("downsample_stages must lie in [1, 8]");
  }
  if (height <= 0 || width <= 0 || height % downsample_factor() != 0 || width % downsample_factor() != 0) {
    throw InputError("height and width must be positive multiples of " + std::to_string(downsample_factor()));
  }
  if (channels <= 0 || base_channels <= 0 || disc_channels <= 0) {
    throw InputError("channel counts must be positive");
  }
  if (ta_blocks_per_branch < 1) {
    throw InputError("ta_blocks_per_branch must be >= 1");
  }
  if (ffc_groups != 3) {
    throw InputError("ffc_groups must be 3 (one fusion point per group boundary)");
  }
  if (ffc_blocks < ffc_groups || ffc_blocks % ffc_groups != 0) {
    throw InputError("ffc_blocks must be a positive multiple of ffc_groups");
  }
  if (!(ffc_global_ratio >= 0.0 && ffc_global_ratio < 1.0)) {
    throw InputError("ffc_global_ratio must lie in [0, 1)");
  }
  if (std::abs(ffc_global_ratio * static_cast<double>(channels) - static_cast<double>(global_channels())) > 1e-9) {
    throw InputError("ffc_global_ratio * channels must be integral");
  }
  if (attention_heads < 1 || channels % attention_heads != 0) {
    throw InputError("attention_heads must divide channels");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"downsample_stages", downsample_stages},
          {"channels", channels},
          {"base_channels", base_channels},
          {"ta_blocks_per_branch", ta_blocks_per_branch},
          {"ffc_blocks", ffc_blocks},
          {"ffc_groups", ffc_groups},
          {"ffc_global_ratio", ffc_global_ratio},
          {"attention_heads", attention_heads},
          {"learnable_temperature", learnable_temperature},
          {"use_wcc", use_wcc},
          {"use_bce", use_bce},
          {"fusion_kind", to_string(fusion_kind)},
          {"attention_kind", to_string(attention_kind)},
          {"backbone_block", to_string(backbone_block)},
          {"pretrained_backbone", pretrained_backbone},
          {"disc_channels", disc_channels}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.downsample_stages = j.value("downsample_stages", c.downsample_stages);
    c.channels = j.value("channels", c.channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.ta_blocks_per_branch = j.value("ta_blocks_per_branch", c.ta_blocks_per_branch);
    c.ffc_blocks = j.value("ffc_blocks", c.ffc_blocks);
    c.ffc_groups = j.value("ffc_groups", c.ffc_groups);
    c.ffc_global_ratio = j.value("ffc_global_ratio", c.ffc_global_ratio);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.learnable_temperature = j.value("learnable_temperature", c.learnable_temperature);
    c.use_wcc = j.value("use_wcc", c.use_wcc);
    c.use_bce = j.value("use_bce", c.use_bce);
    c.fusion_kind = fusion_kind_from_string(j.value("fusion_kind", to_string(c.fusion_kind)));
    c.attention_kind = attention_kind_from_string(j.value("attention_kind", to_string(c.attention_kind)));
    c.backbone_block = backbone_block_from_string(j.value("backbone_block", to_string(c.backbone_block)));
    c.pretrained_backbone = j.value("pretrained_backbone", c.pretrained_backbone);
    c.disc_channels = j.value("disc_channels", c.disc_channels);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::full_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.height = 64;
  c.width = 64;
  c.channels = 32;
  c.base_channels = 16;
  c.ta_blocks_per_branch = 2;
  c.ffc_blocks = 6;
  c.disc_channels = 32;
  return c;
}

void check_spatial(const torch::Tensor& x, std::int64_t factor, const char* what) {
  if (!x.defined() || x.dim() != 4) {
    throw InputError(std::string(what) + ": expected an [N,C,H,W] tensor");
  }
  if (x.size(2) % factor != 0 || x.size(3) % factor != 0 || x.size(2) == 0 || x.size(3) == 0) {
    throw InputError(std::string(what) + ": spatial size " + std::to_string(x.size(2)) + "x" +
                     std::to_string(x.size(3)) + " is not divisible by " + std::to_string(factor));
  }
}

nn::GroupNorm make_norm(std::int64_t channels) { return nn::GroupNorm(nn::GroupNormOptions(1, channels).affine(true)); }

std::vector<std::int64_t> channel_schedule(const ModelConfig& cfg) {
  const auto stages = cfg.downsample_stages;
  const auto floor_ch = std::min(cfg.base_channels, cfg.channels);
  std::vector<std::int64_t> out;
  for (std::int64_t k = 0; k <= stages; ++k) {
    out.push_back(k == stages ? cfg.channels : std::max(floor_ch, cfg.channels >> (stages - k)));
  }
  return out;
}

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(std::int64_t in_channels, const ModelConfig& cfg) : factor_(cfg.downsample_factor()) {
  const auto ch = channel_schedule(cfg);
  nn::Sequential body;
  body->push_back(nn::ReflectionPad2d(3));
  body->push_back(conv(in_channels, ch[0], 7, 1, 0, true));
  body->push_back(make_norm(ch[0]));
  body->push_back(nn::ReLU());
  for (std::size_t k = 1; k < ch.size(); ++k) {
    body->push_back(conv(ch[k - 1], ch[k], 3, 2, 1, true));
    body->push_back(make_norm(ch[k]));
    body->push_back(nn::ReLU());
  }
  body_ = register_module("body", body);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
  check_spatial(x, factor_, "encoder");
  return body_->forward(x);
}

DecoderImpl::DecoderImpl(const ModelConfig& cfg, std::int64_t out_channels) {
  const auto ch = channel_schedule(cfg);
  nn::Sequential body;
  for (std::size_t k = ch.size() - 1; k >= 1; --k) {
    body->push_back(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    body->push_back(conv(ch[k], ch[k - 1], 3, 1, 1, true));
    body->push_back(make_norm(ch[k - 1]));
    body->push_back(nn::ReLU());
  }
  body->push_back(nn::ReflectionPad2d(3));
  body->push_back(conv(ch[0], out_channels, 7, 1, 0, true));
  body->push_back(nn::Sigmoid());
  body_ = register_module("body", body);
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

// ---------------------------------------------------------------------------

TransposedAttentionImpl::TransposedAttentionImpl(std::int64_t channels, std::int64_t heads, bool learnable_temperature)
    : channels_(channels), heads_(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw InputError("attention heads must divide channels");
  }
  qkv_proj = register_module("qkv_proj", conv(channels, 3 * channels, 1));
  qkv_dwconv = register_module("qkv_dwconv", conv(3 * channels, 3 * channels, 3, 1, 1, true, 3 * channels));
  out_proj = register_module("out_proj", conv(channels, channels, 1));
  zero_init(out_proj);
  if (learnable_temperature) {
    const double per_head = static_cast<double>(channels / heads);
    log_temperature = register_parameter("log_temperature", torch::full({1}, 0.5 * std::log(per_head)));
  }
}

std::pair<torch::Tensor, AttentionInternals> TransposedAttentionImpl::forward_with_internals(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != channels_) {
    throw InputError("transposed attention: expected [N," + std::to_string(channels_) + ",H,W]");
  }
  const auto n = x.size(0);
  const auto h = x.size(2);
  const auto w = x.size(3);
  const auto c = channels_ / heads_;

  auto qkv = qkv_dwconv->forward(qkv_proj->forward(x)).chunk(3, 1);
  AttentionInternals in;
  in.q_map = qkv[0];
  in.k_map = qkv[1];
  in.v_map = qkv[2];
  in.q = in.q_map.flatten(2).transpose(1, 2);
  in.k = in.k_map.flatten(2).transpose(1, 2);

  auto q = in.q_map.reshape({n, heads_, c, h * w});
  auto k = in.k_map.reshape({n, heads_, c, h * w});
  auto v = in.v_map.reshape({n, heads_, c, h * w});

  torch::Tensor alpha;
  if (log_temperature.defined()) {
    alpha = log_temperature.exp();
    in.temperature = alpha.item<double>();
  } else {
    in.temperature = std::sqrt(static_cast<double>(c));
    alpha = torch::full({1}, in.temperature, x.options());
  }
  // S[i][j] = softmax_j(sum_p Q[i,p] K[j,p] / alpha); d x d per head.
  in.correlation = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) / alpha, -1);
  // unfold(V) S in the (h'w' x d) layout equals S^T V in channels-first layout.
  auto mixed = torch::matmul(in.correlation.transpose(-1, -2), v).reshape({n, channels_, h, w});
  return {x + out_proj->forward(mixed), std::move(in)};
}

torch::Tensor TransposedAttentionImpl::forward(const torch::Tensor& x) { return forward_with_internals(x).first; }

ConventionalAttentionImpl::ConventionalAttentionImpl(std::int64_t channels) : channels_(channels) {
  qkv_proj = register_module("qkv_proj", conv(channels, 3 * channels, 1));
  qkv_dwconv = register_module("qkv_dwconv", conv(3 * channels, 3 * channels, 3, 1, 1, true, 3 * channels));
  out_proj = register_module("out_proj", conv(channels, channels, 1));
  zero_init(out_proj);
}

torch::Tensor ConventionalAttentionImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0);
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto qkv = qkv_dwconv->forward(qkv_proj->forward(x)).chunk(3, 1);
  auto q = qkv[0].flatten(2).transpose(1, 2);  // [N, hw, d]
  auto k = qkv[1].flatten(2).transpose(1, 2);
  auto v = qkv[2].flatten(2).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(channels_)), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({n, channels_, h, w});
  return x + out_proj->forward(out);
}

ConvFeatureBlockImpl::ConvFeatureBlockImpl(std::int64_t channels, std::int64_t kernel, std::int64_t dilation) {
  conv = register_module("conv", wmr::conv(channels, channels, kernel, 1, dilation * (kernel - 1) / 2, true, 1, dilation));
  out_proj = register_module("out_proj", wmr::conv(channels, channels, 1));
  zero_init(out_proj);
}

torch::Tensor ConvFeatureBlockImpl::forward(const torch::Tensor& x) {
  return x + out_proj->forward(torch::gelu(conv->forward(x)));
}

nn::AnyModule make_feature_block(AttentionKind kind, std::int64_t channels, std::int64_t heads, bool learnable_temperature) {
  switch (kind) {
    case AttentionKind::transposed: return nn::AnyModule(TransposedAttention(channels, heads, learnable_temperature));
    case AttentionKind::conventional: return nn::AnyModule(ConventionalAttention(channels));
    case AttentionKind::conv3: return nn::AnyModule(ConvFeatureBlock(channels, 3));
    case AttentionKind::conv7: return nn::AnyModule(ConvFeatureBlock(channels, 7));
    case AttentionKind::dconv5d3: return nn::AnyModule(ConvFeatureBlock(channels, 5, 3));
  }
  throw InputError("unknown attention kind");
}

// ---------------------------------------------------------------------------

namespace {

torch::Tensor concat_inputs(const torch::Tensor& inp, const std::vector<torch::Tensor>& branches,
                            std::int64_t expected_branches, const char* what) {
  if (static_cast<std::int64_t>(branches.size()) != expected_branches) {
    throw InputError(std::string(what) + ": expected " + std::to_string(expected_branches) + " branch features");
  }
  std::vector<torch::Tensor> parts;
  for (const auto& b : branches) {
    if (!b.defined() || b.sizes() != inp.sizes()) {
      throw InputError(std::string(what) + ": branch feature shape does not match backbone feature");
    }
    parts.push_back(b);
  }
  parts.push_back(inp);
  return torch::cat(parts, 1);
}

}  // namespace

GatedFusionImpl::GatedFusionImpl(std::int64_t channels, std::int64_t branch_count)
    : channels_(channels), branch_count_(branch_count) {
  in_proj = register_module("in_proj", conv((branch_count + 1) * channels, 2 * channels, 1));
  dwconv = register_module("dwconv", conv(2 * channels, 2 * channels, 3, 1, 1, true, 2 * channels));
  out_proj = register_module("out_proj", conv(channels, channels, 1));
  zero_init(out_proj);
}

std::pair<torch::Tensor, GateInternals> GatedFusionImpl::forward_with_internals(
    const torch::Tensor& inp, const std::vector<torch::Tensor>& branches) {
  if (inp.dim() != 4 || inp.size(1) != channels_) {
    throw InputError("gated fusion: expected [N," + std::to_string(channels_) + ",H,W]");
  }
  auto gt = dwconv->forward(in_proj->forward(concat_inputs(inp, branches, branch_count_, "gated fusion"))).chunk(2, 1);
  GateInternals internals{gt[0], gt[1]};
  auto out = inp + out_proj->forward(torch::gelu(internals.gate) * internals.candidate);
  return {out, std::move(internals)};
}

torch::Tensor GatedFusionImpl::forward(const torch::Tensor& inp, const std::vector<torch::Tensor>& branches) {
  return forward_with_internals(inp, branches).first;
}

ConvFusionImpl::ConvFusionImpl(std::int64_t channels, std::int64_t branch_count) : branch_count_(branch_count) {
  conv = register_module("conv", wmr::conv((branch_count + 1) * channels, channels, 3, 1, 1));
  out_proj = register_module("out_proj", wmr::conv(channels, channels, 1));
  zero_init(out_proj);
}

torch::Tensor ConvFusionImpl::forward(const torch::Tensor& inp, const std::vector<torch::Tensor>& branches) {
  auto x = concat_inputs(inp, branches, branch_count_, "conv fusion");
  return inp + out_proj->forward(torch::gelu(conv->forward(x)));
}

// ---------------------------------------------------------------------------

FourierUnitImpl::FourierUnitImpl(std::int64_t channels) {
  conv = register_module("conv", wmr::conv(2 * channels, 2 * channels, 1, 1, 0, false));
  norm = register_module("norm", make_norm(2 * channels));
}

torch::Tensor FourierUnitImpl::forward(const torch::Tensor& x) {
  const auto c = x.size(1);
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto spectrum = torch::fft::rfft2(x, c10::nullopt, {-2, -1}, "ortho");
  auto stacked = torch::cat({torch::real(spectrum), torch::imag(spectrum)}, 1);
  auto y = torch::relu(norm->forward(conv->forward(stacked)));
  auto mixed = torch::complex(y.narrow(1, 0, c).contiguous(), y.narrow(1, c, c).contiguous());
  return torch::fft::irfft2(mixed, std::vector<int64_t>{h, w}, {-2, -1}, "ortho");
}

SpectralTransformImpl::SpectralTransformImpl(std::int64_t channels) {
  const auto half = std::max<std::int64_t>(1, channels / 2);
  nn::Sequential r;
  r->push_back(wmr::conv(channels, half, 1, 1, 0, false));
  r->push_back(make_norm(half));
  r->push_back(nn::ReLU());
  reduce = register_module("reduce", r);
  fourier = register_module("fourier", FourierUnit(half));
  expand = register_module("expand", wmr::conv(half, channels, 1, 1, 0, false));
}

torch::Tensor SpectralTransformImpl::forward(const torch::Tensor& x) {
  auto r = reduce->forward(x);
  return expand->forward(r + fourier->forward(r));
}

FFCLayerImpl::FFCLayerImpl(std::int64_t channels, std::int64_t global_channels)
    : local_(channels - global_channels), global_(global_channels) {
  if (local_ > 0) {
    l2l_ = register_module("l2l", wmr::conv(local_, local_, 3, 1, 1, false));
    norm_l_ = register_module("norm_l", make_norm(local_));
  }
  if (global_ > 0) {
    g2g_ = register_module("g2g", SpectralTransform(global_));
    norm_g_ = register_module("norm_g", make_norm(global_));
  }
  if (local_ > 0 && global_ > 0) {
    l2g_ = register_module("l2g", wmr::conv(local_, global_, 3, 1, 1, false));
    g2l_ = register_module("g2l", wmr::conv(global_, local_, 3, 1, 1, false));
  }
}

torch::Tensor FFCLayerImpl::forward(const torch::Tensor& x) {
  if (global_ == 0) {
    return torch::relu(norm_l_->forward(l2l_->forward(x)));
  }
  if (local_ == 0) {
    return torch::relu(norm_g_->forward(g2g_->forward(x)));
  }
  auto xl = x.narrow(1, 0, local_);
  auto xg = x.narrow(1, local_, global_);
  auto out_l = l2l_->forward(xl) + g2l_->forward(xg);
  auto out_g = l2g_->forward(xl) + g2g_->forward(xg);
  return torch::cat({torch::relu(norm_l_->forward(out_l)), torch::relu(norm_g_->forward(out_g))}, 1);
}

FFCBlockImpl::FFCBlockImpl(std::int64_t channels, double global_ratio) {
  const auto g = static_cast<std::int64_t>(std::llround(global_ratio * static_cast<double>(channels)));
  layer1 = register_module("layer1", FFCLayer(channels, g));
  layer2 = register_module("layer2", FFCLayer(channels, g));
}

torch::Tensor FFCBlockImpl::forward(const torch::Tensor& x) { return x + layer2->forward(layer1->forward(x)); }

// ---------------------------------------------------------------------------

PatchDiscriminatorImpl::PatchDiscriminatorImpl(std::int64_t base_channels, std::int64_t in_channels) {
  std::int64_t in = in_channels;
  for (int s = 0; s < 4; ++s) {
    const auto out = base_channels << s;
    nn::Sequential stage;
    stage->push_back(conv(in, out, 4, 2, 1, s == 0));
    if (s > 0) {
      stage->push_back(make_norm(out));
    }
    stage->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    stages_.push_back(register_module("stage" + std::to_string(s), stage));
    in = out;
  }
  score = register_module("score", conv(in, 1, 3, 1, 1));
}

DiscriminatorOutput PatchDiscriminatorImpl::forward_features(const torch::Tensor& img) {
  check_spatial(img, kFactor, "discriminator");
  DiscriminatorOutput out;
  auto h = img;
  for (auto& stage : stages_) {
    h = stage->forward(h);
    out.features.push_back(h);
  }
  out.scores = torch::sigmoid(score->forward(h)).clamp(kScoreEpsilon, 1.0 - kScoreEpsilon);
  return out;
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& img) { return forward_features(img).scores; }

}  // namespace wmr
