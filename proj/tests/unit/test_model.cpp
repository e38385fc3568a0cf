#include "support.hpp"
#include "wmr/errors.hpp"
#include "wmr/model.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace wmr;

namespace {

std::set<const void*> ids(const std::vector<torch::Tensor>& ts) {
  std::set<const void*> s;
  for (const auto& t : ts) s.insert(t.unsafeGetTensorImpl());
  return s;
}

}  // namespace

TEST(TapIndices, SpreadEvenlyOverTheStack) {
  EXPECT_EQ(tap_indices(3), (std::vector<std::int64_t>{1, 2, 3}));
  EXPECT_EQ(tap_indices(6), (std::vector<std::int64_t>{2, 4, 6}));
  EXPECT_EQ(tap_indices(2), (std::vector<std::int64_t>{1, 2, 2}));
  for (std::int64_t n = 1; n <= 12; ++n) {
    auto t = tap_indices(n);
    EXPECT_EQ(t.back(), n);
    EXPECT_GE(t.front(), 1);
    EXPECT_TRUE(std::is_sorted(t.begin(), t.end()));
  }
}

TEST(ModelConfig, JsonRoundTripAndValidation) {
  auto c = ModelConfig::desk();
  c.attention_kind = AttentionKind::conv7;
  c.fusion_kind = FusionKind::conv;
  auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(ModelConfig::desk()));
  EXPECT_EQ(config_hash(c).size(), 16u);

  auto bad = ModelConfig::desk();
  bad.height = 65;
  EXPECT_THROW(bad.validate(), InputError);
  bad = ModelConfig::desk();
  bad.ffc_blocks = 7;
  EXPECT_THROW(bad.validate(), InputError);
  EXPECT_THROW(ModelConfig::from_json({{"channels", "many"}}), InputError);
}

TEST(ModelConfig, FullScaleArchitecture) {
  auto p = ModelConfig::full_scale();
  EXPECT_EQ(p.height, 256);
  EXPECT_EQ(p.feature_height(), 8);
  EXPECT_EQ(p.channels, 128);
  EXPECT_EQ(p.ffc_blocks, 18);
  EXPECT_EQ(p.ta_blocks_per_branch, 3);
}

TEST(Model, ZeroInitializedFusionReducesToBackbone) {
  torch::NoGradGuard g;
  torch::manual_seed(3);
  WatermarkRemover model(ModelConfig::desk());
  for (int i = 0; i < 3; ++i) {
    auto x = torch::rand({2, 3, 64, 64});
    auto m = test::random_binary_mask(2, 64, 64, 100 + i);
    EXPECT_TRUE(torch::equal(model->full_forward(x, m).y, model->backbone_forward(x, m)));
  }
}

TEST(Model, TraceIsComplete) {
  torch::NoGradGuard g;
  auto cfg = test::tiny_config();
  WatermarkRemover model(cfg);
  auto x = torch::rand({2, 3, 32, 32});
  auto m = test::random_binary_mask(2, 32, 32, 1);
  auto t = model->full_forward(x, m);
  const std::vector<std::int64_t> feat{2, 4, 8, 8};
  ASSERT_EQ(t.f_wcc.size(), 4u);
  ASSERT_EQ(t.f_bce.size(), 4u);
  ASSERT_EQ(t.f_inp.size(), 4u);
  ASSERT_EQ(t.f_hat_inp.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(t.f_wcc[i].sizes(), feat);
    EXPECT_EQ(t.f_bce[i].sizes(), feat);
    EXPECT_EQ(t.f_inp[i].sizes(), feat);
    EXPECT_EQ(t.f_hat_inp[i].sizes(), feat);
  }
  EXPECT_EQ(t.c_bkg.sizes(), x.sizes());
  EXPECT_EQ(t.y.sizes(), x.sizes());
  EXPECT_TRUE(torch::equal(t.x_una, (1 - m) * x));
  EXPECT_GE(t.y.min().item<float>(), 0.0f);
  EXPECT_LE(t.y.max().item<float>(), 1.0f);
}

TEST(Model, BlindAndEmptyMasksAreTotal) {
  torch::NoGradGuard g;
  WatermarkRemover model(test::tiny_config());
  test::randomize(*model, 2);
  auto x = torch::rand({1, 3, 32, 32});
  for (auto m : {torch::ones({1, 1, 32, 32}), torch::zeros({1, 1, 32, 32}), torch::rand({1, 1, 32, 32})}) {
    auto t = model->full_forward(x, m);
    EXPECT_TRUE(t.y.isfinite().all().item<bool>());
    EXPECT_TRUE(t.c_bkg.isfinite().all().item<bool>());
  }
}

TEST(Model, RejectsMalformedInputs) {
  WatermarkRemover model(test::tiny_config());
  auto m = torch::zeros({1, 1, 32, 32});
  EXPECT_THROW(model->full_forward(torch::rand({1, 4, 32, 32}), m), InputError);
  EXPECT_THROW(model->full_forward(torch::rand({1, 3, 30, 32}), torch::zeros({1, 1, 30, 32})), InputError);
  EXPECT_THROW(model->full_forward(torch::rand({1, 3, 32, 32}), torch::zeros({1, 1, 16, 16})), InputError);
  EXPECT_THROW(model->full_forward(torch::rand({2, 3, 32, 32}), m), InputError);
}

TEST(Model, ParameterGroupsPartitionTheModel) {
  WatermarkRemover model(test::tiny_config());
  auto all = ids(model->parameters());
  auto bb = ids(model->backbone_parameters());
  auto ad = ids(model->adapter_parameters());
  EXPECT_EQ(bb.size() + ad.size(), all.size());
  for (auto p : bb) EXPECT_EQ(ad.count(p), 0u);
  for (auto p : ids(model->fusion_parameters())) EXPECT_EQ(ad.count(p), 1u);
  model->set_backbone_trainable(false);
  for (auto& p : model->backbone_parameters()) EXPECT_FALSE(p.requires_grad());
  for (auto& p : model->adapter_parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Model, BackboneOnlyAblationHasNoAdapters) {
  torch::NoGradGuard g;
  auto cfg = test::tiny_config();
  cfg.use_wcc = cfg.use_bce = false;
  WatermarkRemover model(cfg);
  test::randomize(*model, 4);
  EXPECT_TRUE(model->adapter_parameters().empty());
  auto x = torch::rand({1, 3, 32, 32});
  auto m = test::random_binary_mask(1, 32, 32, 5);
  auto t = model->full_forward(x, m);
  EXPECT_FALSE(t.c_bkg.defined());
  EXPECT_TRUE(torch::equal(t.y, model->backbone_forward(x, m)));
}

TEST(Model, BceOnlyAblationTakesImageAndMask) {
  torch::NoGradGuard g;
  auto cfg = test::tiny_config();
  cfg.use_wcc = false;
  WatermarkRemover model(cfg);
  EXPECT_FALSE(model->wcc);
  EXPECT_EQ(model->bce->encoder->parameters().front().size(1), 4);
  auto t = model->full_forward(torch::rand({1, 3, 32, 32}), torch::ones({1, 1, 32, 32}));
  EXPECT_FALSE(t.c_bkg.defined());
  EXPECT_EQ(t.f_bce.size(), 4u);
  EXPECT_THROW(model->wcc_forward(torch::rand({1, 3, 32, 32}), torch::ones({1, 1, 32, 32})), InputError);
}

TEST(Model, FullModelBceSeesBackgroundEstimate) {
  WatermarkRemover model(test::tiny_config());
  EXPECT_EQ(model->bce->encoder->parameters().front().size(1), 7);
  EXPECT_EQ(model->wcc->encoder->parameters().front().size(1), 4);
  EXPECT_EQ(model->backbone->encoder->parameters().front().size(1), 4);
}

TEST(Model, VariantsRunAndStartAtBackbone) {
  torch::NoGradGuard g;
  auto x = torch::rand({1, 3, 32, 32});
  auto m = test::random_binary_mask(1, 32, 32, 6);
  std::vector<ModelConfig> variants;
  for (auto kind : {AttentionKind::conventional, AttentionKind::conv3, AttentionKind::conv7, AttentionKind::dconv5d3}) {
    auto c = test::tiny_config();
    c.attention_kind = kind;
    variants.push_back(c);
  }
  auto c = test::tiny_config();
  c.fusion_kind = FusionKind::conv;
  variants.push_back(c);
  c = test::tiny_config();
  c.use_wcc = false;
  c.backbone_block = BackboneBlockKind::transposed_attention;
  variants.push_back(c);
  c = test::tiny_config();
  c.ta_blocks_per_branch = 6;
  variants.push_back(c);
  for (const auto& cfg : variants) {
    WatermarkRemover model(cfg);
    EXPECT_TRUE(torch::equal(model->full_forward(x, m).y, model->backbone_forward(x, m)));
  }
}

TEST(Model, GradientMatchesFiniteDifferences) {
  WatermarkRemover model(test::tiny_config());
  model->to(torch::kDouble);
  test::randomize(*model, 7, 0.2);
  auto x = torch::rand({1, 3, 32, 32}, torch::kDouble);
  auto m = test::random_binary_mask(1, 32, 32, 8).to(torch::kDouble);
  auto f = [&] {
    auto t = model->full_forward(x, m);
    return test::project(t.y, 9) + test::project(t.c_bkg, 10);
  };
  EXPECT_LT(test::directional_fd_error(model->parameters(), f, 11), 1e-3);
}

TEST(Model, EveryParameterReceivesGradient) {
  WatermarkRemover model(test::tiny_config());
  test::randomize(*model, 12, 0.2);
  auto t = model->full_forward(torch::rand({1, 3, 32, 32}), test::random_binary_mask(1, 32, 32, 13));
  (t.y.sum() + t.c_bkg.sum()).backward();
  for (const auto& p : model->named_parameters()) {
    ASSERT_TRUE(p.value().grad().defined()) << p.key();
    EXPECT_TRUE(p.value().grad().isfinite().all().item<bool>()) << p.key();
  }
}

TEST(RemoveWatermark, PadsAndCropsArbitrarySizes) {
  WatermarkRemover model(test::tiny_config());
  model->eval();
  for (auto [h, w] : {std::pair<int64_t, int64_t>{32, 32}, {45, 70}, {5, 3}, {1, 1}}) {
    auto r = remove_watermark(model, torch::rand({3, h, w}), torch::ones({1, h, w}));
    EXPECT_EQ(r.y.sizes(), (std::vector<std::int64_t>{3, h, w}));
    EXPECT_EQ(r.c_bkg.sizes(), (std::vector<std::int64_t>{3, h, w}));
    EXPECT_TRUE(r.y.isfinite().all().item<bool>());
  }
  EXPECT_THROW(remove_watermark(model, torch::rand({1, 8, 8}), torch::ones({1, 8, 8})), InputError);
}

TEST(RemoveWatermark, MatchesBatchedForwardAtNativeSize) {
  WatermarkRemover model(test::tiny_config());
  test::randomize(*model, 14, 0.2);
  model->eval();
  auto x = torch::rand({3, 32, 32});
  auto m = test::random_binary_mask(1, 32, 32, 15)[0];
  auto r = remove_watermark(model, x, m);
  torch::NoGradGuard g;
  auto t = model->full_forward(x.unsqueeze(0), m.unsqueeze(0));
  EXPECT_TRUE(torch::allclose(r.y, t.y[0]));
}
