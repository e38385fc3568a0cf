#include "support.hpp"
#include "wmr/errors.hpp"
#include "wmr/losses.hpp"
#include "wmr/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace wmr;
using namespace wmr::losses;

namespace {

torch::Tensor dt(std::vector<std::int64_t> shape, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand(shape, gen, torch::kDouble);
}

double loop_abs_mean(const torch::Tensor& a, const torch::Tensor& b, bool sum) {
  auto x = a.contiguous(), y = b.contiguous();
  const double* pa = x.data_ptr<double>();
  const double* pb = y.data_ptr<double>();
  double acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += std::abs(pa[i] - pb[i]);
  return sum ? acc : acc / static_cast<double>(x.numel());
}

/// Per-sample L2 over one feature stage, normalized or summed.
double loop_feature_distance(const torch::Tensor& a, const torch::Tensor& b, bool sum) {
  const auto n = a.size(0);
  const auto per = a.numel() / n;
  auto x = a.contiguous(), y = b.contiguous();
  const double* pa = x.data_ptr<double>();
  const double* pb = y.data_ptr<double>();
  double total = 0;
  for (std::int64_t s = 0; s < n; ++s) {
    double sq = 0;
    for (std::int64_t i = 0; i < per; ++i) sq += (pa[s * per + i] - pb[s * per + i]) * (pa[s * per + i] - pb[s * per + i]);
    total += sum ? std::sqrt(sq) : std::sqrt(sq) / std::sqrt(static_cast<double>(per));
  }
  return sum ? total : total / static_cast<double>(n);
}

}  // namespace

TEST(Enums, StringRoundTrips) {
  for (auto r : {Reduction::mean, Reduction::sum}) EXPECT_EQ(reduction_from_string(to_string(r)), r);
  for (auto m : {PenaltyMode::off, PenaltyMode::detached, PenaltyMode::second_order}) {
    EXPECT_EQ(penalty_mode_from_string(to_string(m)), m);
  }
  for (auto s : {PenaltyScope::adapters, PenaltyScope::all}) EXPECT_EQ(penalty_scope_from_string(to_string(s)), s);
  EXPECT_THROW(reduction_from_string("median"), InputError);
}

TEST(LossWeights, DefaultsAndJson) {
  LossWeights w;
  EXPECT_EQ(w.pixel, 10.0);
  EXPECT_EQ(w.perceptual, 30.0);
  EXPECT_EQ(w.adversarial, 1.0);
  EXPECT_EQ(w.disc_perceptual, 100.0);
  EXPECT_EQ(w.penalty, 0.001);
  EXPECT_EQ(LossWeights::from_json(w.to_json()).to_json(), w.to_json());
  EXPECT_THROW(LossWeights::from_json({{"pixel", -1.0}}), InputError);
  LossConfig c;
  c.reduction = Reduction::sum;
  c.penalty = PenaltyMode::detached;
  EXPECT_EQ(LossConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(PixelLoss, WorkedExamples) {
  auto y = torch::full({1, 3, 4, 4}, 0.5, torch::kDouble);
  auto z = torch::zeros_like(y);
  EXPECT_DOUBLE_EQ(pixel_loss(y, torch::Tensor(), z, z, Reduction::mean).item<double>(), 0.5);
  EXPECT_DOUBLE_EQ(pixel_loss(y, torch::Tensor(), z, z, Reduction::sum).item<double>(), 24.0);
  EXPECT_DOUBLE_EQ(pixel_loss(y, y, z, z, Reduction::mean).item<double>(), 1.0);
  EXPECT_DOUBLE_EQ(pixel_loss(y, y, y, y, Reduction::mean).item<double>(), 0.0);
  EXPECT_THROW(pixel_loss(y, torch::Tensor(), torch::zeros({1, 3, 2, 2}), z, Reduction::mean), InputError);
}

TEST(PixelLoss, MatchesLoopOracle) {
  auto y = dt({2, 3, 5, 7}, 1), c = dt({2, 3, 5, 7}, 2), g = dt({2, 3, 5, 7}, 3), b = dt({2, 3, 5, 7}, 4);
  for (bool sum : {false, true}) {
    const auto r = sum ? Reduction::sum : Reduction::mean;
    EXPECT_NEAR(pixel_loss(y, c, g, b, r).item<double>(), loop_abs_mean(y, g, sum) + loop_abs_mean(c, b, sum), 1e-10);
  }
}

TEST(FeatureDistance, MatchesLoopOracle) {
  std::vector<torch::Tensor> a{dt({3, 4, 5, 5}, 5), dt({3, 8, 2, 2}, 6)};
  std::vector<torch::Tensor> b{dt({3, 4, 5, 5}, 7), dt({3, 8, 2, 2}, 8)};
  for (bool sum : {false, true}) {
    const double want = loop_feature_distance(a[0], b[0], sum) + loop_feature_distance(a[1], b[1], sum);
    EXPECT_NEAR(feature_distance(a, b, sum ? Reduction::sum : Reduction::mean).item<double>(), want, 1e-10);
  }
}

TEST(PerceptualLoss, ZeroOnIdenticalAndSymmetric) {
  FeatureExtractor fx;
  auto a = torch::rand({2, 3, 16, 16}), b = torch::rand({2, 3, 16, 16});
  EXPECT_EQ(perceptual_loss(a, a, a, a, fx, Reduction::mean).item<float>(), 0.0f);
  EXPECT_NEAR(perceptual_loss(a, torch::Tensor(), b, torch::Tensor(), fx, Reduction::mean).item<float>(),
              perceptual_loss(b, torch::Tensor(), a, torch::Tensor(), fx, Reduction::mean).item<float>(), 1e-6);
  EXPECT_GT(perceptual_loss(a, torch::Tensor(), b, torch::Tensor(), fx, Reduction::mean).item<float>(), 0.0f);
}

TEST(PerceptualLoss, HandExtractorOracle) {
  // One stage: channel sum through a ReLU, stride 1.
  FeatureExtractor fx(std::vector<torch::Tensor>{torch::ones({1, 3, 1, 1}, torch::kDouble)},
                      std::vector<std::int64_t>{1});
  ASSERT_EQ(fx->stages(), 1);
  auto y = dt({2, 3, 4, 4}, 9) - 0.5, g = dt({2, 3, 4, 4}, 10) - 0.5;
  auto c = dt({2, 3, 4, 4}, 11), b = dt({2, 3, 4, 4}, 12);
  auto feat = [](const torch::Tensor& t) {
    auto out = torch::zeros({t.size(0), 1, 4, 4}, torch::kDouble);
    for (int n = 0; n < t.size(0); ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double s = 0;
          for (int ch = 0; ch < 3; ++ch) s += t[n][ch][i][j].item<double>();
          out[n][0][i][j] = std::max(s, 0.0);
        }
    return out;
  };
  const double want = loop_feature_distance(feat(y), feat(g), false) + loop_feature_distance(feat(c), feat(b), false);
  EXPECT_NEAR(perceptual_loss(y, c, g, b, fx, Reduction::mean).item<double>(), want, 1e-12);
}

TEST(FeatureExtractor, SeededAndFrozen) {
  FeatureExtractor a, b, c(123);
  EXPECT_TRUE(a->parameters().empty());
  EXPECT_EQ(a->stages(), 3);
  auto x = torch::rand({1, 3, 16, 16});
  auto fa = a->forward(x), fb = b->forward(x), fc = c->forward(x);
  ASSERT_EQ(fa.size(), 3u);
  EXPECT_EQ(fa[2].sizes(), (std::vector<std::int64_t>{1, 64, 4, 4}));
  EXPECT_TRUE(torch::equal(fa[2], fb[2]));
  EXPECT_FALSE(torch::equal(fa[2], fc[2]));
}

TEST(PatchMask, AveragesThenThresholds) {
  auto m = torch::zeros({1, 1, 4, 4});
  m[0][0][0][0] = 1;
  m[0][0][0][1] = 1;  // top-left patch exactly half covered
  m[0][0][2][2] = 1;  // bottom-right patch a quarter covered
  auto p = patch_mask(m, 2, 2);
  EXPECT_EQ(p.sizes(), (std::vector<std::int64_t>{1, 1, 2, 2}));
  EXPECT_EQ(p[0][0][0][0].item<float>(), 1.0f);
  EXPECT_EQ(p[0][0][1][1].item<float>(), 0.0f);
  EXPECT_EQ(p.sum().item<float>(), 1.0f);
  EXPECT_TRUE(torch::equal(patch_mask(torch::ones({2, 1, 64, 64}), 4, 4), torch::ones({2, 1, 4, 4})));
  EXPECT_THROW(patch_mask(m, 3, 3), InputError);
}

TEST(Adversarial, GeneratorTermAtHalfScores) {
  auto s = torch::full({2, 1, 4, 4}, 0.5, torch::kDouble);
  EXPECT_NEAR(generator_adversarial(s, torch::ones_like(s), Reduction::mean).item<double>(), std::log(2.0), 1e-12);
  EXPECT_NEAR(generator_adversarial(s, torch::ones_like(s), Reduction::sum).item<double>(), 32 * std::log(2.0), 1e-10);
  EXPECT_EQ(generator_adversarial(s, torch::zeros_like(s), Reduction::mean).item<double>(), 0.0);
}

TEST(Adversarial, MatchLoopOracles) {
  auto real = dt({2, 1, 3, 3}, 13) * 0.98 + 0.01, fake = dt({2, 1, 3, 3}, 14) * 0.98 + 0.01;
  auto mp = (dt({2, 1, 3, 3}, 15) > 0.5).to(torch::kDouble);
  double lg = 0, t1 = 0, t2 = 0, t3 = 0;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const double r = real[n][0][i][j].item<double>(), f = fake[n][0][i][j].item<double>();
        const double m = mp[n][0][i][j].item<double>();
        lg += std::log(f) * m;
        t1 += std::log(r);
        t2 += std::log(f) * (1 - m);
        t3 += std::log(1 - f) * m;
      }
  EXPECT_NEAR(generator_adversarial(fake, mp, Reduction::mean).item<double>(), -lg / 18, 1e-12);
  EXPECT_NEAR(generator_adversarial(fake, mp, Reduction::sum).item<double>(), -lg, 1e-12);
  EXPECT_NEAR(discriminator_adversarial(real, fake, mp, Reduction::mean).item<double>(), -(t1 + t2 + t3) / 18, 1e-12);
  EXPECT_NEAR(discriminator_adversarial(real, fake, mp, Reduction::sum).item<double>(), -(t1 + t2 + t3), 1e-12);
}

TEST(Adversarial, ScoresAreClampedAndChecked) {
  auto s = torch::tensor({0.0, 1.0}, torch::kDouble).reshape({1, 1, 1, 2});
  auto c = checked_scores(s);
  EXPECT_DOUBLE_EQ(c[0][0][0][0].item<double>(), kScoreEpsilon);
  EXPECT_DOUBLE_EQ(c[0][0][0][1].item<double>(), 1 - kScoreEpsilon);
  EXPECT_TRUE(std::isfinite(discriminator_adversarial(s, s, torch::ones_like(s), Reduction::mean).item<double>()));
  s[0][0][0][0] = std::nan("");
  EXPECT_THROW(checked_scores(s), RuntimeFailure);
}

TEST(Penalty, ZeroWhenLossIgnoresParams) {
  auto theta = torch::randn({3}, torch::kDouble).requires_grad_();
  auto other = torch::randn({2}, torch::kDouble).requires_grad_();
  auto l = other.pow(2).sum();
  EXPECT_EQ(gradient_penalty(l, {theta}, true).item<double>(), 0.0);
  EXPECT_THROW(gradient_penalty(torch::ones({}), {theta}, true), RuntimeFailure);
}

TEST(Penalty, QuadraticToyHasClosedForm) {
  const double a = 1.7, t0 = -0.6;
  auto theta = torch::tensor({t0}, torch::kDouble).requires_grad_();
  auto l = a * theta.pow(2).sum();
  auto p = gradient_penalty(l, {theta}, true);
  EXPECT_NEAR(p.item<double>(), std::pow(2 * a * t0, 2), 1e-12);
  // d/dtheta (2 a theta)^2 = 8 a^2 theta.
  auto g = torch::autograd::grad({p}, {theta})[0];
  EXPECT_NEAR(g.item<double>(), 8 * a * a * t0, 1e-12);

  auto detached = gradient_penalty(a * theta.pow(2).sum(), {theta}, false);
  EXPECT_FALSE(detached.requires_grad());
  EXPECT_NEAR(detached.item<double>(), p.item<double>(), 1e-12);
}

TEST(Penalty, SecondOrderGradientMatchesFiniteDifferences) {
  auto w = torch::randn({4, 3}, torch::kDouble).requires_grad_();
  auto x = torch::randn({5, 3}, torch::kDouble);
  auto f = [&] {
    auto l = torch::sigmoid(torch::matmul(x, w.t())).log().sum();
    return gradient_penalty(l, {w}, true);
  };
  EXPECT_LT(test::directional_fd_error({w}, f, 16), 1e-4);
}

TEST(DiscriminatorPerceptual, DetachesRealSide) {
  auto fake = torch::randn({2, 4, 3, 3}, torch::kDouble).requires_grad_();
  auto real = torch::randn({2, 4, 3, 3}, torch::kDouble).requires_grad_();
  EXPECT_EQ(discriminator_feature_perceptual({real}, {real}, Reduction::mean).item<double>(), 0.0);
  auto l = discriminator_feature_perceptual({fake}, {real}, Reduction::mean);
  EXPECT_NEAR(l.item<double>(), loop_feature_distance(fake.detach(), real.detach(), false), 1e-12);
  l.backward();
  EXPECT_TRUE(fake.grad().defined());
  EXPECT_FALSE(real.grad().defined());
}

namespace {

struct Fixture {
  WatermarkRemover model{nullptr};
  PatchDiscriminator disc{nullptr};
  FeatureExtractor fx;
  GeneratorInputs in;
  ForwardTrace trace;

  explicit Fixture(torch::Dtype dtype = torch::kFloat) {
    auto cfg = test::tiny_config();
    model = WatermarkRemover(cfg);
    disc = PatchDiscriminator(cfg.disc_channels);
    model->to(dtype);
    disc->to(dtype);
    test::randomize(*model, 20, 0.2);
    auto x = torch::rand({2, 3, 32, 32}, torch::TensorOptions(dtype));
    in.m = test::random_binary_mask(2, 32, 32, 21, 0.5).to(dtype);
    in.g_wf = torch::rand({2, 3, 32, 32}, torch::TensorOptions(dtype));
    in.g_bkg = torch::rand({2, 3, 32, 32}, torch::TensorOptions(dtype));
    trace = model->full_forward(x, in.m);
    in.y = trace.y;
    in.c_bkg = trace.c_bkg;
  }
};

}  // namespace

TEST(GeneratorObjective, TotalIsWeightedSumOfTerms) {
  Fixture f;
  for (auto mode : {PenaltyMode::off, PenaltyMode::detached, PenaltyMode::second_order}) {
    LossConfig cfg;
    cfg.penalty = mode;
    auto t = generator_objective(f.in, f.disc, f.fx, f.model->adapter_parameters(), cfg);
    const auto& w = cfg.weights;
    const double want = w.pixel * t.pixel.item<double>() + w.perceptual * t.perceptual.item<double>() +
                        w.adversarial * t.gen_adv.item<double>() +
                        w.disc_perceptual * t.disc_perceptual.item<double>() + w.penalty * t.penalty.item<double>();
    EXPECT_NEAR(t.total.item<double>(), want, 1e-4 * std::abs(want));
    EXPECT_NEAR(t.pixel.item<double>(),
                pixel_loss(f.in.y, f.in.c_bkg, f.in.g_wf, f.in.g_bkg, Reduction::mean).item<double>(), 1e-7);
    if (mode == PenaltyMode::off) EXPECT_EQ(t.penalty.item<double>(), 0.0);
    if (mode == PenaltyMode::second_order) {
      EXPECT_GT(t.penalty.item<double>(), 0.0);
      EXPECT_TRUE(t.penalty.requires_grad());
    }
    if (mode == PenaltyMode::detached) EXPECT_FALSE(t.penalty.requires_grad());
  }
}

TEST(GeneratorObjective, DiscriminatorPerceptualUsesDiscriminatorFeatures) {
  Fixture f;
  LossConfig cfg;
  cfg.penalty = PenaltyMode::off;
  auto t = generator_objective(f.in, f.disc, f.fx, {}, cfg);
  torch::NoGradGuard g;
  auto a = f.disc->forward_features(f.in.y).features;
  auto b = f.disc->forward_features(f.in.g_wf).features;
  EXPECT_NEAR(t.disc_perceptual.item<double>(), feature_distance(a, b, Reduction::mean).item<double>(), 1e-6);
}

TEST(GeneratorObjective, FullPipelineGradientMatchesFiniteDifferences) {
  Fixture f(torch::kDouble);
  LossConfig cfg;
  auto x = torch::rand({2, 3, 32, 32}, torch::kDouble);
  auto params = f.model->adapter_parameters();
  auto fn = [&] {
    auto trace = f.model->full_forward(x, f.in.m);
    GeneratorInputs in = f.in;
    in.y = trace.y;
    in.c_bkg = trace.c_bkg;
    return generator_objective(in, f.disc, f.fx, params, cfg).total;
  };
  EXPECT_LT(test::directional_fd_error(f.model->parameters(), fn, 22), 1e-3);
}

TEST(DiscriminatorObjective, TreatsGeneratorOutputAsConstant) {
  Fixture f;
  auto l = discriminator_objective(f.in.y, f.in.g_wf, f.in.m, f.disc, Reduction::mean);
  EXPECT_TRUE(std::isfinite(l.item<double>()));
  l.backward();
  for (const auto& p : f.model->parameters()) EXPECT_FALSE(p.grad().defined());
  for (const auto& p : f.disc->parameters()) EXPECT_TRUE(p.grad().defined());
}

TEST(LossBreakdown, JsonRoundTrip) {
  LossBreakdown b;
  b.pixel = 1.5;
  b.total = 9;
  b.n_feature_stages = 4;
  b.reduction = Reduction::sum;
  auto back = LossBreakdown::from_json(b.to_json());
  EXPECT_EQ(back.to_json(), b.to_json());
  EXPECT_TRUE(b.finite());
  b.penalty = std::nan("");
  EXPECT_FALSE(b.finite());
}
