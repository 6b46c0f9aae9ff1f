#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "relight/model.hpp"
#include "relight/scene.hpp"

using namespace relight;

namespace {

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

Image random_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  Image im(side, side);
  for (auto& v : im.data) v = uniform01(rng);
  return im;
}

LightProbe probe_of(int size, double az) {
  ProbeSpec s;
  s.size = size;
  s.azimuth_deg = az;
  return render_probe(s);
}

bool strictly_inside(const Image& im) {
  for (double v : im.data)
    if (!(v > 0.0 && v < 1.0)) return false;
  return true;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.validate();
  c.input_size = 250;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig{};
  c.lighting_channels = c.bottleneck_channels;
  EXPECT_THROW(c.validate(), ValidationError);
  c = ModelConfig{};
  c.probe_size = 48;
  EXPECT_THROW(init_model<float>(c, 0), ValidationError);
}

TEST(ModelConfig, BottleneckSide) {
  ModelConfig c;
  c.stages = 2;
  EXPECT_EQ(c.bottleneck_side(), 64);
  EXPECT_EQ(ModelConfig{}.bottleneck_side(), 16);
  EXPECT_EQ(ModelConfig{}.geometry_channels(), 128);
}

TEST(InitModel, ParameterCountMatchesLayerArithmetic) {
  // Frozen from tests/oracles/param_count.py.
  EXPECT_EQ(init_model<float>(ModelConfig{}, 0).params.count(), 20016326u);
  ModelConfig toy;
  toy.input_size = 128;
  toy.base_channels = 8;
  toy.stages = 3;
  toy.bottleneck_channels = 64;
  toy.lighting_channels = 16;
  toy.res_blocks = 2;
  EXPECT_EQ(init_model<float>(toy, 0).params.count(), 519462u);
  EXPECT_EQ(init_model<float>(mini_config(), 0).params.count(), 29286u);
}

TEST(InitModel, SameSeedIsByteIdentical) {
  const auto a = init_model<float>(mini_config(), 5), b = init_model<float>(mini_config(), 5);
  const auto c = init_model<float>(mini_config(), 6);
  ASSERT_EQ(a.params.names(), b.params.names());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto& x = a.params.vars()[i]->value.data;
    const auto& y = b.params.vars()[i]->value.data;
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * sizeof(float)), 0) << a.params.names()[i];
    if (x != c.params.vars()[i]->value.data) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
  EXPECT_TRUE(a.params.all_finite());
}

TEST(Model, DefaultConfigShapeContract) {
  const auto st = init_model<float>(ModelConfig{}, 1);
  const auto im = random_image(256, 2);
  const auto e = encode(st, im);
  EXPECT_EQ(e.geometry.shape, (Shape{128, 16, 16}));
  EXPECT_EQ(e.code.dim(), 128u);
  const auto r = relight_forward(st, im, probe_of(64, 30));
  EXPECT_EQ(r.predicted_probe.size(), 64);
  EXPECT_EQ(r.relit.height, 256);
  EXPECT_EQ(r.relit.width, 256);
  EXPECT_TRUE(r.relit.in_unit_range());
  EXPECT_TRUE(r.predicted_probe.pixels.in_unit_range());
  EXPECT_EQ(encode_probe(st, probe_of(64, 0)).dim(), 128u);
}

TEST(Model, BlackImageGivesFiniteCode) {
  const auto st = init_model<double>(mini_config(), 3);
  const auto e = encode(st, Image(32, 32));
  for (double v : e.code.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ForwardIsDeterministic) {
  const auto st = init_model<float>(mini_config(), 4);
  const auto im = random_image(32, 5);
  const auto g = probe_of(16, -45);
  const auto a = relight_forward(st, im, g), b = relight_forward(st, im, g);
  EXPECT_EQ(a.relit, b.relit);
  EXPECT_EQ(a.predicted_probe.pixels, b.predicted_probe.pixels);
  EXPECT_EQ(encode_probe(st, g).values, encode_probe(st, g).values);
}

TEST(Model, PredictedProbeIsDecodedImageCode) {
  const auto st = init_model<double>(mini_config(), 6);
  const auto im = random_image(32, 7);
  const auto r = relight_forward(st, im, probe_of(16, 10));
  EXPECT_EQ(r.predicted_probe.pixels, decode_probe(st, encode(st, im).code).pixels);
}

TEST(DecodeProbe, RangeZeroCodeAndSmoothness) {
  const auto st = init_model<double>(mini_config(), 8);
  LightingCode zero{std::vector<double>(8, 0.0)};
  const auto p0 = decode_probe(st, zero);
  EXPECT_EQ(p0.size(), 16);
  EXPECT_TRUE(strictly_inside(p0.pixels));
  EXPECT_EQ(decode_probe(st, zero).pixels, p0.pixels);

  Rng rng(9);
  for (int k = 0; k < 5; ++k) {
    LightingCode c{std::vector<double>(8)}, d;
    for (auto& v : c.values) v = uniform(rng, -2, 2);
    d = c;
    for (auto& v : d.values) v += uniform(rng, -1e-6, 1e-6);
    EXPECT_LT(max_abs_error(decode_probe(st, c).pixels, decode_probe(st, d).pixels), 1e-3);
  }
  EXPECT_THROW(decode_probe(st, LightingCode{std::vector<double>(7, 0.0)}), ShapeError);
}

TEST(Model, ShapeErrorsBeforeCompute) {
  const auto st = init_model<float>(mini_config(), 10);
  EXPECT_THROW(relight_forward(st, random_image(64, 1), probe_of(16, 0)), ShapeError);
  EXPECT_THROW(relight_forward(st, random_image(32, 1), probe_of(32, 0)), ShapeError);
  EXPECT_THROW(encode_probe(st, probe_of(32, 0)), ShapeError);
  EXPECT_THROW(encode(st, random_image(16, 1)), ShapeError);
}

TEST(Model, CodeSwapChangesImageButNotShapeOrRange) {
  const auto st = init_model<double>(mini_config(), 11);
  const auto im = random_image(32, 12);
  const auto a = relight_with_code(st, im, encode_probe(st, probe_of(16, -90)));
  const auto b = relight_with_code(st, im, encode_probe(st, probe_of(16, 90)));
  EXPECT_TRUE(a.same_shape(im));
  EXPECT_TRUE(b.same_shape(im));
  EXPECT_TRUE(strictly_inside(a));
  EXPECT_TRUE(strictly_inside(b));
  EXPECT_GT(max_abs_error(a, b), 0.0);
  // relight_forward is relight_with_code on the guide's code.
  EXPECT_EQ(relight_forward(st, im, probe_of(16, 90)).relit, b);
}

TEST(Model, CastPreservesStructure) {
  const auto st = init_model<float>(mini_config(), 13);
  const auto d = st.cast<double>();
  EXPECT_EQ(d.params.names(), st.params.names());
  EXPECT_EQ(d.params.count(), st.params.count());
  EXPECT_EQ(d.config, st.config);
}
