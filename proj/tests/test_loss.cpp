#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "relight/loss.hpp"
#include "relight/trainer.hpp"
#include "test_util.hpp"

using namespace relight;

namespace {

Image random_image(int side, Rng& rng) {
  Image im(side, side);
  for (auto& v : im.data) v = uniform01(rng);
  return im;
}

LightProbe random_probe(int side, Rng& rng) {
  LightProbe p;
  p.pixels = random_image(side, rng);
  return p;
}

ModelConfig mini_config() {
  ModelConfig c;
  c.input_size = 32;
  c.base_channels = 4;
  c.stages = 2;
  c.bottleneck_channels = 16;
  c.lighting_channels = 8;
  c.res_blocks = 1;
  c.probe_size = 16;
  return c;
}

double mean_abs_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

TEST(ProbeLoss, IdentityOffsetAndOracle) {
  Rng rng(1);
  const auto P = random_probe(16, rng);
  EXPECT_EQ(probe_loss(P, P), 0.0);
  // Constant offset applied to raw arrays, no clamping.
  LightProbe Q = P;
  for (auto& v : Q.pixels.data) v += 0.1;
  EXPECT_NEAR(probe_loss(P, Q), 0.1, 1e-15);
  for (int k = 0; k < 10; ++k) {
    const auto A = random_probe(16, rng), B = random_probe(16, rng);
    EXPECT_NEAR(probe_loss(A, B), mean_abs_oracle(A.pixels.data, B.pixels.data), 1e-12);
    EXPECT_EQ(probe_loss(A, B), probe_loss(B, A));
  }
  EXPECT_THROW(probe_loss(P, random_probe(8, rng)), ShapeError);
}

TEST(ProbeLoss, TriangleInequality) {
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const auto A = random_probe(8, rng), B = random_probe(8, rng), C = random_probe(8, rng);
    EXPECT_LE(probe_loss(A, C), probe_loss(A, B) + probe_loss(B, C) + 1e-9);
  }
}

TEST(Extractor, ZeroLayersAndDeterminism) {
  Rng rng(3);
  const auto im = random_image(32, rng);
  FeatureExtractor<double> none(FeatureExtractorSpec::frozen_random(0));
  EXPECT_TRUE(perceptual_features(none, im).empty());
  const auto other = random_image(32, rng);
  const auto [l1, perc] = image_loss(im, other, none);
  EXPECT_EQ(perc, 0.0);
  EXPECT_NEAR(l1, mean_abs_oracle(im.data, other.data), 1e-12);

  FeatureExtractor<double> a(FeatureExtractorSpec::frozen_random(4, 9)), b(FeatureExtractorSpec::frozen_random(4, 9));
  const auto fa = perceptual_features(a, im), fb = perceptual_features(b, im);
  ASSERT_EQ(fa.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(fa[j].data, fb[j].data);
    EXPECT_EQ(fa[j].dim(1), 32 >> j);
    EXPECT_EQ(fa[j].dim(2), 32 >> j);
  }
}

TEST(Extractor, MissingPretrainedWeightsAdviseFallback) {
  FeatureExtractorSpec s;
  s.weights_path = "/nonexistent/vgg.rlt";
  try {
    FeatureExtractor<double> fx(s);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("frozen-random"), std::string::npos);
  }
}

TEST(Extractor, PretrainedLayoutFromArchive) {
  // A synthetic archive with VGG-16 shapes exercises the loading and tap layout.
  testutil::TempDir dir("vgg");
  TensorArchive a;
  a.meta = nlohmann::json::object();
  const int convs[][3] = {{0, 64, 3}, {2, 64, 64}, {5, 128, 64}, {7, 128, 128}};
  Rng rng(4);
  for (const auto& [idx, cout, cin] : convs) {
    Tensor<float> w({cout, cin, 3, 3}), b({cout});
    for (auto& v : w.data) v = static_cast<float>(uniform(rng, -0.05, 0.05));
    a.tensors.emplace_back("features." + std::to_string(idx) + ".weight", w);
    a.tensors.emplace_back("features." + std::to_string(idx) + ".bias", b);
  }
  save_archive(a, dir / "vgg.rlt");
  FeatureExtractorSpec s;
  s.layer_count = 2;
  s.weights_path = (dir / "vgg.rlt").string();
  FeatureExtractor<double> fx(s);
  const auto f = perceptual_features(fx, random_image(16, rng));
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].shape, (Shape{64, 16, 16}));
  EXPECT_EQ(f[1].shape, (Shape{128, 8, 8}));
  s.layer_count = 3;  // relu3_3 weights absent
  EXPECT_THROW(FeatureExtractor<double>{s}, FormatError);
}

TEST(Extractor, SpecValidation) {
  auto s = FeatureExtractorSpec::frozen_random(2);
  s.layer_weights = {1.0};
  EXPECT_THROW(s.validate(), ValidationError);
  s.layer_weights = {1.0, -1.0};
  EXPECT_THROW(s.validate(), ValidationError);
  s = FeatureExtractorSpec::frozen_random(6);
  EXPECT_THROW(s.validate(), ValidationError);
  nlohmann::json j = FeatureExtractorSpec::frozen_random(3, 5);
  const auto back = j.get<FeatureExtractorSpec>();
  EXPECT_EQ(back.kind, ExtractorKind::FrozenRandom);
  EXPECT_EQ(back.layer_count, 3);
  EXPECT_EQ(back.seed, 5u);
}

TEST(ImageLoss, PerceptualIsWeightedFeatureMse) {
  Rng rng(5);
  const auto I = random_image(32, rng), J = random_image(32, rng);
  auto spec = FeatureExtractorSpec::frozen_random(3, 2);
  spec.layer_weights = {0.5, 2.0, 0.0};
  FeatureExtractor<double> fx(spec);
  const auto fi = perceptual_features(fx, I), fj = perceptual_features(fx, J);
  double ref = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    double s = 0;
    for (std::size_t k = 0; k < fi[l].size(); ++k) s += (fi[l][k] - fj[l][k]) * (fi[l][k] - fj[l][k]);
    ref += spec.layer_weights[l] * s / static_cast<double>(fi[l].size());
  }
  EXPECT_NEAR(image_loss(I, J, fx).second, ref, 1e-12 * std::max(1.0, ref));
  EXPECT_EQ(image_loss(I, I, fx), std::make_pair(0.0, 0.0));
}

TEST(ImageLoss, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const auto I = random_image(16, rng);
  FeatureExtractor<double> fx(FeatureExtractorSpec::frozen_random(3, 1));
  auto pred = ag::leaf(to_tensor<double>(random_image(16, rng)), true);
  auto target = ag::constant(to_tensor<double>(I));
  auto f = [&] {
    return ag::weighted_sum<double>({ag::mean_abs_diff(target, pred), perceptual_graph(target, pred, fx)}, {1.0, 1.0});
  };
  ag::backward(f());
  const double h = 1e-6;
  for (int k = 0; k < 30; ++k) {
    const auto i = uniform_index(rng, pred->value.size());
    const double orig = pred->value[i];
    pred->value[i] = orig + h;
    const double fp = f()->value[0];
    pred->value[i] = orig - h;
    const double fm = f()->value[0];
    pred->value[i] = orig;
    const double num = (fp - fm) / (2 * h), ana = pred->grad[i];
    EXPECT_LE(std::abs(num - ana), 1e-3 * std::max({std::abs(num), std::abs(ana), 1e-8})) << i;
  }
}

TEST(TotalLoss, AdditivityAndZero) {
  Rng rng(7);
  FeatureExtractor<double> fx(FeatureExtractorSpec::frozen_random(2, 3));
  const auto P = random_probe(8, rng);
  const auto I = random_image(16, rng);
  const auto z = total_loss(P, P, I, I, fx);
  EXPECT_EQ(z.probe, 0.0);
  EXPECT_EQ(z.image_l1, 0.0);
  EXPECT_EQ(z.perceptual, 0.0);
  EXPECT_EQ(z.total, 0.0);
  for (int k = 0; k < 100; ++k) {
    const auto Q = random_probe(8, rng);
    const auto J = random_image(16, rng);
    const auto b = total_loss(P, Q, I, J, fx);
    const auto [l1, perc] = image_loss(I, J, fx);
    EXPECT_EQ(b.probe, probe_loss(P, Q));
    EXPECT_EQ(b.image_l1, l1);
    EXPECT_EQ(b.perceptual, perc);
    EXPECT_EQ(b.total, b.probe + b.image_l1 + b.perceptual);
    EXPECT_GE(b.total, std::max({b.probe, b.image_l1, b.perceptual}));
  }
}

TEST(TotalLoss, GraphMatchesImageLevelApi) {
  Rng rng(8);
  FeatureExtractor<double> fx(FeatureExtractorSpec::frozen_random(2, 4));
  const auto P = random_probe(8, rng), Q = random_probe(8, rng);
  const auto I = random_image(16, rng), J = random_image(16, rng);
  ag::NoGradGuard ng;
  const auto g = loss_graph(ag::constant(to_tensor<double>(P.pixels)), ag::constant(to_tensor<double>(Q.pixels)),
                            ag::constant(to_tensor<double>(I)), ag::constant(to_tensor<double>(J)), fx)
                     .breakdown();
  const auto b = total_loss(P, Q, I, J, fx);
  EXPECT_NEAR(g.probe, b.probe, 1e-14);
  EXPECT_NEAR(g.image_l1, b.image_l1, 1e-14);
  EXPECT_NEAR(g.perceptual, b.perceptual, 1e-12);
}

TEST(TotalLoss, MiniNetworkGradientMatchesFiniteDifferences) {
  auto net = init_model<double>(mini_config(), 21);
  FeatureExtractor<double> fx(FeatureExtractorSpec::frozen_random(2, 5));
  Rng rng(22);
  TrainingSample s;
  s.input = random_image(32, rng);
  s.guide = random_probe(16, rng);
  // Targets on {0, 1}: sigmoid outputs never reach them, so the L1 terms keep
  // a fixed sign under the finite-difference step and stay differentiable.
  s.target = Image(32, 32);
  for (auto& v : s.target.data) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
  s.probe.pixels = Image(16, 16);
  for (auto& v : s.probe.pixels.data) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;

  net.params.zero_grad();
  ag::backward(sample_loss_graph(net, s, fx).total);
  auto loss = [&] {
    ag::NoGradGuard ng;
    return sample_loss_graph(net, s, fx).total->value[0];
  };
  const double h = 1e-3;
  for (int k = 0; k < 50; ++k) {
    const auto p = uniform_index(rng, net.params.size());
    auto& var = net.params.vars()[p];
    const auto i = uniform_index(rng, var->value.size());
    const double orig = var->value[i];
    var->value[i] = orig + h;
    const double fp = loss();
    var->value[i] = orig - h;
    const double fm = loss();
    var->value[i] = orig;
    const double num = (fp - fm) / (2 * h), ana = var->grad[i];
    EXPECT_LE(std::abs(num - ana), 1e-3 * std::max({std::abs(num), std::abs(ana), 1e-6}))
        << net.params.names()[p] << "[" << i << "] analytic " << ana << " numeric " << num;
  }
}
