#include "support.hpp"
#include "wmr/errors.hpp"
#include "wmr/image.hpp"
#include "wmr/synth.hpp"

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <fstream>

using namespace wmr;
using namespace wmr::synth;

namespace {

SourcePair constant_pair(std::int64_t h, std::int64_t w, float i, float wm, float a) {
  return {torch::full({3, h, w}, i), torch::full({3, h, w}, wm), torch::full({1, h, w}, a)};
}

torch::Tensor pixel_mask(std::int64_t h, std::int64_t w, std::vector<std::pair<int, int>> on) {
  auto m = torch::zeros({1, h, w});
  for (auto [y, x] : on) m[0][y][x] = 1.0f;
  return m;
}

}  // namespace

TEST(Composite, ZeroAlphaIdentityReturnsBackground) {
  auto bg = image::quantize8(torch::rand({3, 8, 8}));
  SourcePair p{bg, torch::rand({3, 8, 8}), torch::zeros({1, 8, 8})};
  auto c = composite(p, DistortionParams::identity_mode());
  EXPECT_TRUE(torch::equal(c.x, bg));
  EXPECT_TRUE(torch::equal(c.g_bkg, bg));
  EXPECT_TRUE(torch::equal(c.g_wf, bg));
}

TEST(Composite, SinglePixelBlend) {
  auto c = composite(constant_pair(1, 1, 0.8f, 0.2f, 0.5f), DistortionParams::identity_mode());
  EXPECT_NEAR(c.x[0][0][0].item<float>(), 0.5f, 1e-7);
  EXPECT_NEAR(c.g_bkg[0][0][0].item<float>(), 0.4f, 1e-7);
}

TEST(Composite, RejectsDimensionMismatch) {
  SourcePair p{torch::zeros({3, 8, 8}), torch::zeros({3, 8, 9}), torch::zeros({1, 8, 8})};
  EXPECT_THROW(composite(p, DistortionParams::identity_mode()), InputError);
}

TEST(Composite, AlphaIsClamped) {
  auto c = composite(constant_pair(2, 2, 0.2f, 0.6f, 1.7f), DistortionParams::identity_mode());
  EXPECT_NEAR(c.x[0][0][0].item<float>(), 0.6f, 1e-7);
}

TEST(Composite, DistortionMatchesReferenceCodecStepByStep) {
  const int n = 32;
  auto bg = torch::zeros({3, n, n});
  auto wm = torch::full({3, n, n}, 200.0f / 255.0f);
  auto alpha = torch::zeros({1, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      bg[0][y][x] = (8 * x) / 255.0f;
      bg[1][y][x] = (8 * y) / 255.0f;
      bg[2][y][x] = (4 * (x + y)) / 255.0f;
      if (x >= 10 && x < 22 && y >= 8 && y < 20) alpha[0][y][x] = 1.0f;
    }
  }
  DistortionParams params;
  params.codec_quality = 75;
  params.resample_scale = 0.5;
  params.resample_filter = ResampleFilter::bilinear;
  auto c = composite(SourcePair{bg, wm, alpha}, params);

  // Oracle: blend per pixel into an 8-bit BGR image, then resize down, resize
  // up and JPEG-encode with OpenCV directly.
  cv::Mat blended(n, n, CV_8UC3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const bool on = alpha[0][y][x].item<float>() > 0;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = on ? 200.0 : bg[ch][y][x].item<float>() * 255.0;
        blended.at<cv::Vec3b>(y, x)[2 - ch] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  cv::Mat small, back;
  cv::resize(blended, small, cv::Size(16, 16), 0, 0, cv::INTER_LINEAR);
  cv::resize(small, back, cv::Size(n, n), 0, 0, cv::INTER_LINEAR);
  std::vector<std::uint8_t> jpg;
  cv::imencode(".jpg", back, jpg, {cv::IMWRITE_JPEG_QUALITY, 75});
  cv::Mat oracle = cv::imdecode(jpg, cv::IMREAD_COLOR);

  cv::Mat got = image::to_mat8(c.x);
  ASSERT_EQ(got.size(), oracle.size());
  EXPECT_EQ(cv::norm(got, oracle, cv::NORM_INF), 0.0);
}

TEST(Composite, SameParamsForAllThreeOutputs) {
  auto bg = image::quantize8(torch::rand({3, 16, 16}));
  SourcePair p{bg, torch::rand({3, 16, 16}), torch::zeros({1, 16, 16})};
  DistortionParams params;
  params.codec_quality = 40;
  params.resample_scale = 0.7;
  auto c = composite(p, params);
  // With A = 0 all three arguments of T coincide.
  EXPECT_TRUE(torch::equal(c.x, c.g_wf));
  EXPECT_TRUE(torch::equal(c.x, c.g_bkg));
  EXPECT_TRUE(torch::equal(distort(bg, params), c.g_wf));
}

TEST(Distortion, ValidatesRanges) {
  DistortionParams p;
  p.codec_quality = 10;
  EXPECT_THROW(p.validate(), InputError);
  p.codec_quality = 50;
  p.resample_scale = 0.2;
  EXPECT_THROW(p.validate(), InputError);
}

TEST(Distortion, SampledParamsStayInRange) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    auto p = DistortionParams::sample(rng);
    EXPECT_GE(p.codec_quality, 30);
    EXPECT_LE(p.codec_quality, 95);
    EXPECT_GE(p.resample_scale, 0.5);
    EXPECT_LE(p.resample_scale, 1.0);
  }
}

TEST(PreciseMask, ZeroAlphaGivesEmptyMask) {
  EXPECT_EQ(make_precise_mask(torch::zeros({1, 5, 5})).sum().item<float>(), 0.0f);
}

TEST(PreciseMask, ThresholdsAtZero) {
  auto a = torch::tensor({0.0f, 0.5f, 1.0f}).view({1, 1, 3});
  auto m = make_precise_mask(a);
  EXPECT_TRUE(torch::equal(m, torch::tensor({0.0f, 1.0f, 1.0f}).view({1, 1, 3})));
}

TEST(PreciseMask, MatchesPerPixelLoop) {
  auto a = torch::rand({1, 16, 16});
  a.masked_fill_(a < 0.4, 0.0);
  auto m = make_precise_mask(a);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      EXPECT_EQ(m[0][y][x].item<float>(), a[0][y][x].item<float>() > 0 ? 1.0f : 0.0f);
    }
  }
}

TEST(PreciseMask, Idempotent) {
  auto m = make_precise_mask(torch::rand({1, 8, 8}) - 0.5);
  EXPECT_TRUE(torch::equal(make_precise_mask(m), m));
}

TEST(Morphology, DiscKernelRadiusOneIsCross) {
  auto k = disc_kernel(1);
  auto expected = torch::tensor({0, 1, 0, 1, 1, 1, 0, 1, 0}, torch::kUInt8).view({3, 3});
  EXPECT_TRUE(torch::equal(k, expected));
}

TEST(Morphology, DilateSinglePixel) {
  auto m = pixel_mask(7, 7, {{3, 3}});
  auto d = morph(m, MorphOp::dilate, 1);
  auto expected = pixel_mask(7, 7, {{3, 3}, {2, 3}, {4, 3}, {3, 2}, {3, 4}});
  EXPECT_TRUE(torch::equal(d, expected));
}

TEST(Morphology, ErodeSolidBlockToCentre) {
  auto m = torch::zeros({1, 7, 7});
  m.index_put_({0, torch::indexing::Slice(2, 5), torch::indexing::Slice(2, 5)}, 1.0f);
  auto e = morph(m, MorphOp::erode, 1);
  EXPECT_TRUE(torch::equal(e, pixel_mask(7, 7, {{3, 3}})));
}

TEST(Morphology, DilationIsExtensiveAndErosionAntiExtensive) {
  auto m = test::random_binary_mask(1, 24, 24, 5).squeeze(0);
  for (int r = 1; r <= 7; ++r) {
    auto d = morph(m, MorphOp::dilate, r);
    auto e = morph(m, MorphOp::erode, r);
    EXPECT_TRUE((d >= m).all().item<bool>());
    EXPECT_TRUE((e <= m).all().item<bool>());
  }
}

TEST(Polygonalize, FilledConvexHullContainsSupport) {
  auto m = pixel_mask(20, 20, {{3, 3}, {3, 15}, {15, 9}});
  auto p = polygonalize(m, 8);
  EXPECT_TRUE((p >= m).all().item<bool>());
  EXPECT_EQ(p[0][8][9].item<float>(), 1.0f);
  EXPECT_EQ(p[0][18][1].item<float>(), 0.0f);
  EXPECT_EQ(polygonalize(torch::zeros({1, 5, 5}), 4).sum().item<float>(), 0.0f);
}

TEST(Polygonalize, RespectsVertexBudgetAndStaysConvex) {
  auto m = torch::zeros({1, 40, 40});
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      if ((x - 20) * (x - 20) + (y - 20) * (y - 20) <= 144) m[0][y][x] = 1.0f;
    }
  }
  auto p4 = polygonalize(m, 4);
  auto p12 = polygonalize(m, 12);
  // Fewer corners cut away more of the disc.
  EXPECT_LE(p4.sum().item<float>(), p12.sum().item<float>());
  EXPECT_LE(p12.sum().item<float>(), polygonalize(m, 64).sum().item<float>() + 1);
}

TEST(ResampleMask, ExtensiveAndIdempotent) {
  auto m = test::random_binary_mask(1, 32, 32, 9, 0.1).squeeze(0);
  for (double s : {0.5, 0.63, 0.8, 0.97}) {
    auto r = resample_mask(m, s);
    EXPECT_TRUE((r >= m).all().item<bool>()) << s;
    EXPECT_TRUE(torch::equal(resample_mask(r, s), r)) << s;
  }
}

TEST(CoarsenMask, DeterministicForFixedParams) {
  auto m0 = test::random_binary_mask(1, 64, 64, 11, 0.05).squeeze(0);
  Rng a(42), b(42);
  auto pa = MaskAugParams::sample(a);
  auto pb = MaskAugParams::sample(b);
  DistortionParams d;
  d.resample_scale = 0.75;
  EXPECT_TRUE(torch::equal(coarsen_mask(m0, pa, d), coarsen_mask(m0, pb, d)));
}

TEST(CoarsenMask, DilationContainsPreciseMask) {
  auto m0 = test::random_binary_mask(1, 48, 48, 13, 0.05).squeeze(0);
  MaskAugParams aug;
  aug.op = MorphOp::dilate;
  aug.kernel_radius = 3;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    auto d = DistortionParams::sample(rng);
    EXPECT_TRUE((coarsen_mask(m0, aug, d) >= m0).all().item<bool>());
  }
}

TEST(CoarsenMask, EmptyingErosionFallsBackToPrecise) {
  auto m0 = pixel_mask(9, 9, {{4, 4}, {1, 1}});
  MaskAugParams aug;
  aug.op = MorphOp::erode;
  aug.kernel_radius = 2;
  auto m = coarsen_mask(m0, aug, DistortionParams::identity_mode());
  EXPECT_TRUE(torch::equal(m, m0));
}

TEST(CoarsenMask, OutputIsBinary) {
  Rng rng(77);
  auto m0 = test::random_binary_mask(1, 32, 32, 17, 0.08).squeeze(0);
  for (int i = 0; i < 20; ++i) {
    auto m = coarsen_mask(m0, MaskAugParams::sample(rng), DistortionParams::sample(rng));
    EXPECT_TRUE(((m == 0) | (m == 1)).all().item<bool>());
  }
}

// ---------------------------------------------------------------------------

namespace {

GenerateOptions small_options(std::int64_t n, std::uint64_t seed) {
  GenerateOptions o;
  o.n = n;
  o.master_seed = seed;
  o.image_size = 32;
  return o;
}

const SourceCollection& bgs() {
  static auto c = SourceCollection::procedural(SourceCollection::Kind::backgrounds, 8);
  return c;
}
const SourceCollection& wms() {
  static auto c = SourceCollection::procedural(SourceCollection::Kind::watermarks, 8);
  return c;
}

}  // namespace

TEST(Dataset, ZeroSamplesWritesEmptyManifest) {
  test::TempDir dir;
  auto m = generate_dataset(bgs(), wms(), small_options(0, 1), dir.path());
  EXPECT_TRUE(m.entries.empty());
  auto back = read_manifest(dir / "manifest.jsonl");
  EXPECT_TRUE(back.entries.empty());
  std::size_t dirs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) dirs += e.is_directory();
  EXPECT_EQ(dirs, 0u);
}

TEST(Dataset, RerunIsBitwiseIdentical) {
  test::TempDir a, b;
  generate_dataset(bgs(), wms(), small_options(4, 7), a.path());
  generate_dataset(bgs(), wms(), small_options(4, 7), b.path());
  EXPECT_TRUE(test::trees_identical(a.path(), b.path()));
}

TEST(Dataset, ParallelScheduleMatchesSequential) {
  test::TempDir a, b;
  auto o = small_options(5, 3);
  generate_dataset(bgs(), wms(), o, a.path());
  o.jobs = 3;
  generate_dataset(bgs(), wms(), o, b.path());
  EXPECT_TRUE(test::trees_identical(a.path(), b.path()));
}

TEST(Dataset, DifferentSeedsDiffer) {
  auto o = small_options(1, 1);
  auto s1 = generate_sample(bgs(), wms(), o, 0);
  o.master_seed = 2;
  auto s2 = generate_sample(bgs(), wms(), o, 0);
  EXPECT_FALSE(torch::equal(s1.x, s2.x));
}

TEST(Dataset, RecordsRoundTrip) {
  test::TempDir dir;
  auto o = small_options(2, 5);
  generate_dataset(bgs(), wms(), o, dir.path());
  auto ds = Dataset::open(dir.path());
  ASSERT_EQ(ds.size(), 2u);
  auto direct = generate_sample(bgs(), wms(), o, 1);
  auto loaded = ds.load(1);
  EXPECT_EQ(loaded.id, direct.id);
  EXPECT_EQ(loaded.seed, direct.seed);
  for (auto [a, b] : {std::pair{loaded.x, direct.x}, {loaded.m, direct.m}, {loaded.m0, direct.m0},
                      {loaded.g_wf, direct.g_wf}, {loaded.g_bkg, direct.g_bkg}}) {
    EXPECT_TRUE(torch::equal(a, image::quantize8(b)));
  }
  EXPECT_EQ(loaded.distortion.codec_quality, direct.distortion.codec_quality);
  EXPECT_EQ(loaded.mask_aug.kernel_radius, direct.mask_aug.kernel_radius);
}

TEST(Dataset, SampleInvariants) {
  auto o = small_options(6, 21);
  for (std::int64_t i = 0; i < o.n; ++i) {
    auto s = generate_sample(bgs(), wms(), o, i);
    EXPECT_TRUE(torch::equal(s.m0, make_precise_mask(s.alpha)));
    for (const auto& t : {s.x, s.g_wf, s.g_bkg}) {
      EXPECT_GE(t.min().item<float>(), 0.0f);
      EXPECT_LE(t.max().item<float>(), 1.0f);
    }
    if (s.mask_aug.op == MorphOp::dilate && !s.mask_aug.polygonalize) {
      EXPECT_TRUE((s.m >= s.m0).all().item<bool>());
    }
    // Outside M_0 only codec error separates X from G_wf.
    auto outside = 1.0 - s.m0;
    auto diff = ((s.x - s.g_wf).abs() * outside).sum() / (3 * outside.sum() + 1e-9);
    EXPECT_LT(diff.item<float>(), 0.08f);
  }
}

TEST(Dataset, IdentityModeOutsideMaskIsBitwiseEqual) {
  auto o = small_options(4, 8);
  o.identity_distortion = true;
  for (std::int64_t i = 0; i < o.n; ++i) {
    auto s = generate_sample(bgs(), wms(), o, i);
    auto outside = s.m0 == 0;
    EXPECT_TRUE(torch::equal(s.x.masked_select(outside.expand_as(s.x)), s.g_wf.masked_select(outside.expand_as(s.x))));
  }
}

TEST(Dataset, ForcedOpacityReplacesRegion) {
  auto o = small_options(4, 9);
  o.identity_distortion = true;
  o.force_opacity = 1.0;
  for (std::int64_t i = 0; i < o.n; ++i) {
    auto s = generate_sample(bgs(), wms(), o, i);
    auto inside = (s.m0 > 0).expand_as(s.x);
    EXPECT_TRUE((s.alpha.masked_select(s.m0 > 0) == 1.0f).all().item<bool>());
    EXPECT_TRUE((s.g_bkg.masked_select(inside) == 0.0f).all().item<bool>());
    EXPECT_GT(s.m0.sum().item<float>(), 0.0f);
  }
}

TEST(Dataset, MissingSourceDirectoryIsInputError) {
  EXPECT_THROW(SourceCollection::from_directory("/nonexistent/wm", SourceCollection::Kind::watermarks), InputError);
}

TEST(Dataset, UnreadableSourcesAreSkipped) {
  test::TempDir src, out;
  std::filesystem::create_directories(src / "bg");
  std::filesystem::create_directories(src / "wm");
  image::write_png(src / "bg" / "good.png", procedural_background(1, 48));
  { std::ofstream(src / "bg" / "broken.png") << "not an image"; }
  image::write_png(src / "wm" / "logo.png", procedural_watermark(2, 48));
  auto b = SourceCollection::from_directory(src / "bg", SourceCollection::Kind::backgrounds);
  auto w = SourceCollection::from_directory(src / "wm", SourceCollection::Kind::watermarks);
  auto m = generate_dataset(b, w, small_options(6, 4), out.path());
  ASSERT_EQ(m.entries.size(), 6u);
  for (const auto& e : m.entries) EXPECT_EQ(e.background, "good.png");
}

TEST(Dataset, OpenMissingDatasetIsInputError) { EXPECT_THROW(Dataset::open("/nonexistent/ds"), InputError); }
