#include <gtest/gtest.h>

#include <cmath>

#include "relight/vae.hpp"
#include "test_util.hpp"

using namespace relight;

namespace {

bool strictly_inside(const Image& im) {
  for (double v : im.data)
    if (!(v > 0.0 && v < 1.0)) return false;
  return true;
}

VaeConfig small_config() {
  VaeConfig c;
  c.probe_size = 16;
  c.channels = 8;
  c.latent_dim = 4;
  c.epochs = 30;
  c.lr = 2e-3;
  c.seed = 1;
  return c;
}

std::vector<LightProbe> corpus(int n, int size, std::uint64_t seed) {
  std::vector<LightProbe> out;
  for (const auto& s : random_probe_specs(n, seed, size)) out.push_back(render_probe(s));
  return out;
}

}  // namespace

TEST(Kl, ClosedFormCases) {
  EXPECT_EQ(kl_divergence({0, 0, 0}, {0, 0, 0}), 0.0);
  EXPECT_EQ(kl_divergence({1}, {0}), 0.5);
  EXPECT_EQ(kl_divergence(std::vector<double>(8, 1.0), std::vector<double>(8, 0.0)), 4.0);
  Rng rng(1);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> mu(5), lv(5);
    double ref = 0;
    for (int d = 0; d < 5; ++d) {
      mu[d] = uniform(rng, -3, 3);
      lv[d] = uniform(rng, -4, 2);
      const double var = std::exp(lv[d]);
      ref += 0.5 * (var + mu[d] * mu[d] - 1.0 - std::log(var));
    }
    const double kl = kl_divergence(mu, lv);
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(kl, ref, 1e-12);
  }
  EXPECT_THROW(kl_divergence({0}, {0, 0}), ShapeError);
}

TEST(Kl, GraphNodeMatchesClosedForm) {
  Rng rng(2);
  Tensor<double> mu({6}), lv({6});
  for (auto& v : mu.data) v = uniform(rng, -1, 1);
  for (auto& v : lv.data) v = uniform(rng, -1, 1);
  const auto node = ag::kl_standard_normal(ag::constant(mu), ag::constant(lv));
  EXPECT_NEAR(node->value[0], kl_divergence(mu.data, lv.data), 1e-14);
}

TEST(VaeLoss, Reductions) {
  Rng rng(3);
  LightProbe a, b;
  a.pixels = Image(8, 8);
  b.pixels = Image(8, 8);
  for (auto& v : a.pixels.data) v = uniform01(rng);
  for (auto& v : b.pixels.data) v = uniform01(rng);
  const std::vector<double> mu{0.3, -0.2}, lv{0.1, -0.5};
  EXPECT_EQ(vae_loss(a, b, mu, lv, 0.0), mean_abs_error(a.pixels, b.pixels));
  EXPECT_EQ(vae_loss(a, b, {0, 0}, {0, 0}, 4.0), mean_abs_error(a.pixels, b.pixels));
  EXPECT_NEAR(vae_loss(a, b, mu, lv, 4.0), mean_abs_error(a.pixels, b.pixels) + 4.0 * kl_divergence(mu, lv), 1e-15);
  EXPECT_GE(vae_loss(a, a, mu, lv, 4.0), 0.0);
  EXPECT_THROW(vae_loss(a, b, mu, lv, -1.0), ValidationError);
}

TEST(Vae, ShapesRangeAndDeterminism) {
  const auto st = init_vae<float>(VaeConfig{});
  const auto p = render_probe(ProbeSpec{});
  const auto a = vae_forward(st, p), b = vae_forward(st, p);
  EXPECT_EQ(a.mu.size(), 8u);
  EXPECT_EQ(a.logvar.size(), 8u);
  EXPECT_EQ(a.recon.size(), 64);
  EXPECT_TRUE(strictly_inside(a.recon.pixels));
  EXPECT_EQ(a.recon.pixels, b.recon.pixels);
  Rng r1(5), r2(5), r3(6);
  const auto s1 = vae_forward(st, p, &r1), s2 = vae_forward(st, p, &r2), s3 = vae_forward(st, p, &r3);
  EXPECT_EQ(s1.recon.pixels, s2.recon.pixels);
  EXPECT_NE(s1.recon.pixels, s3.recon.pixels);
  ProbeSpec small;
  small.size = 32;
  EXPECT_THROW(vae_forward(st, render_probe(small)), ShapeError);
}

TEST(SampleProbe, ZeroLatentMatchesStoredReference) {
  const auto st = init_vae<float>(VaeConfig{});
  const auto ref = load_archive(std::string(RELIGHT_FIXTURES) + "/vae_z0_probe.rlt").get("probe");
  const auto p = sample_probe(st, std::vector<double>(8, 0.0));
  ASSERT_EQ(to_tensor<float>(p.pixels).shape, ref.shape);
  const auto got = to_tensor<double>(p.pixels);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-6);
  EXPECT_TRUE(strictly_inside(p.pixels));
}

TEST(SampleProbe, DeterministicAndValidated) {
  const auto st = init_vae<float>(VaeConfig{});
  const std::vector<double> z{0.5, -1, 2, 0, 0, 1, -0.3, 0.1};
  EXPECT_EQ(sample_probe(st, z).pixels, sample_probe(st, z).pixels);
  EXPECT_THROW(sample_probe(st, {0.0, 1.0}), ShapeError);
  auto bad = z;
  bad[2] = INFINITY;
  EXPECT_THROW(sample_probe(st, bad), ValidationError);
  // Even extreme latents stay inside (0, 1).
  EXPECT_TRUE(strictly_inside(sample_probe(st, std::vector<double>(8, 50.0)).pixels));
}

TEST(LatentTraverse, CountsEndpointsAndErrors) {
  const auto st = init_vae<float>(small_config());
  const auto t = latent_traverse(st, 2, -3.0, 3.0, 5);
  ASSERT_EQ(t.size(), 5u);
  EXPECT_EQ(t.front().pixels, sample_probe(st, {0, 0, -3.0, 0}).pixels);
  EXPECT_EQ(t.back().pixels, sample_probe(st, {0, 0, 3.0, 0}).pixels);
  EXPECT_EQ(t[2].pixels, sample_probe(st, {0, 0, 0, 0}).pixels);
  const auto flat = latent_traverse(st, 0, 1.5, 1.5, 4);
  for (const auto& p : flat) EXPECT_EQ(p.pixels, flat.front().pixels);
  EXPECT_THROW(latent_traverse(st, 4, 0, 1, 3), ValidationError);
  EXPECT_THROW(latent_traverse(st, -1, 0, 1, 3), ValidationError);
  EXPECT_THROW(latent_traverse(st, 0, 0, 1, 1), ValidationError);
  EXPECT_THROW(latent_traverse(st, 0, 1, 0, 3), ValidationError);
  EXPECT_THROW(latent_traverse(st, 0, 0, NAN, 3), ValidationError);
}

TEST(HighlightCentroid, FollowsAzimuth) {
  double prev = -1;
  for (double az : {-80.0, -40.0, 0.0, 40.0, 80.0}) {
    ProbeSpec s;
    s.azimuth_deg = az;
    s.intensity = 0.8;
    const double x = highlight_centroid(render_probe(s))[0];
    EXPECT_GT(x, prev) << az;
    prev = x;
  }
}

TEST(RandomProbeSpecs, SeededAndInRange) {
  const auto a = random_probe_specs(50, 3, 32), b = random_probe_specs(50, 3, 32);
  EXPECT_EQ(a, b);
  for (const auto& s : a) {
    s.validate();
    EXPECT_GE(s.azimuth_deg, -90.0);
    EXPECT_LE(s.azimuth_deg, 90.0);
    EXPECT_GE(s.elevation_deg, -20.0);
    EXPECT_LE(s.elevation_deg, 60.0);
    EXPECT_EQ(s.size, 32);
  }
}

TEST(TrainVae, LearnsBetterThanMeanProbe) {
  const auto data = corpus(40, 16, 9);
  const auto res = train_vae(data, small_config());
  ASSERT_EQ(res.epoch_loss.size(), 30u);
  EXPECT_LT(res.epoch_loss.back(), res.epoch_loss.front());
  std::vector<LightProbe> copy = data;
  const auto mean = average_probes(copy);
  int wins = 0;
  for (const auto& p : data)
    if (mean_abs_error(vae_forward(res.state, p).recon.pixels, p.pixels) < mean_abs_error(mean.pixels, p.pixels)) ++wins;
  EXPECT_GE(wins, 36) << wins << "/40";
  // Two distant latents decode to visibly different probes.
  const auto lo = sample_probe(res.state, {-2, -2, -2, -2}), hi = sample_probe(res.state, {2, 2, 2, 2});
  EXPECT_GT(mean_abs_error(lo.pixels, hi.pixels), 0.01);
}

TEST(TrainVae, SeededTrainingIsReproducible) {
  auto cfg = small_config();
  cfg.epochs = 2;
  const auto data = corpus(8, 16, 4);
  const auto a = train_vae(data, cfg), b = train_vae(data, cfg);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  for (std::size_t i = 0; i < a.state.params.size(); ++i)
    EXPECT_EQ(a.state.params.vars()[i]->value.data, b.state.params.vars()[i]->value.data);
  EXPECT_THROW(train_vae({}, cfg), ValidationError);
}

TEST(VaePersistence, RoundTripAndErrors) {
  testutil::TempDir dir("vae_io");
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto st = train_vae(corpus(4, 16, 2), cfg).state;
  save_vae(st, dir / "v.rlt");
  const auto back = load_vae(dir / "v.rlt");
  EXPECT_EQ(back.config, st.config);
  for (std::size_t i = 0; i < st.params.size(); ++i) EXPECT_EQ(back.params.vars()[i]->value.data, st.params.vars()[i]->value.data);
  EXPECT_EQ(sample_probe(back, {1, 0, 0, 0}).pixels, sample_probe(st, {1, 0, 0, 0}).pixels);

  TensorArchive a = load_archive(dir / "v.rlt");
  a.meta["kind"] = "relight-model";
  save_archive(a, dir / "k.rlt");
  EXPECT_THROW(load_vae(dir / "k.rlt"), FormatError);
  a.meta["kind"] = "probe-vae";
  a.meta["vae_version"] = 7;
  save_archive(a, dir / "w.rlt");
  EXPECT_THROW(load_vae(dir / "w.rlt"), FormatError);
}
