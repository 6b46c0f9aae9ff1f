#pragma once

// Encoder-decoder relighting network.
//
//   image ─ DualConv ─ DownProj ─ ... ─ DualConv ─ DownProj ─ conv ─┬─ geometry (B-D ch)
//             │skip0                       │skip(n-1)                └─ lighting (D ch) ─ GAP ─ code
//
//   guide probe ─ probe encoder ─ code'                        code ─ probe decoder ─ predicted probe
//
//   [geometry ‖ broadcast(code')] ─ ResBlocks ─ UpProj ─ ‖skip ─ DualConv ─ ... ─ conv ─ sigmoid ─ relit
//
// DualConv: two 3x3 conv + ELU, with instance normalization in the encoder
// only. Down/up projection follow the iterative back-projection pattern with
// 4x4 stride-2 (de)convolutions.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/archive.hpp"
#include "relight/autograd.hpp"
#include "relight/image.hpp"
#include "relight/params.hpp"
#include "relight/probe.hpp"

namespace relight {

struct ModelConfig {
  int input_size = 256;
  int base_channels = 32;
  int stages = 4;
  int bottleneck_channels = 256;
  int lighting_channels = 128;
  int res_blocks = 4;
  int probe_size = 64;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    if (input_size <= 0 || base_channels <= 0 || stages <= 0 || bottleneck_channels <= 0 || lighting_channels <= 0 ||
        res_blocks < 0 || probe_size <= 0)
      throw ValidationError("ModelConfig: sizes must be positive");
    if (input_size % (1 << stages) != 0) throw ValidationError("ModelConfig: input_size must be divisible by 2^stages");
    if (lighting_channels >= bottleneck_channels)
      throw ValidationError("ModelConfig: lighting_channels must be smaller than bottleneck_channels");
    if (probe_size < 8 || probe_size % 8 != 0 || ((probe_size / 8) & (probe_size / 8 - 1)) != 0)
      throw ValidationError("ModelConfig: probe_size must be 8 * 2^k");
  }

  /// Encoder width at stage k (k = stages means the bottleneck).
  int channels(int k) const { return k >= stages ? bottleneck_channels : base_channels << k; }
  int bottleneck_side() const { return input_size >> stages; }
  int geometry_channels() const { return bottleneck_channels - lighting_channels; }
  int probe_levels() const {
    int n = 0;
    for (int s = probe_size; s > 8; s /= 2) ++n;
    return n;
  }
  /// Probe branch width.
  int probe_channels() const { return base_channels; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_size", c.input_size},   {"base_channels", c.base_channels},
       {"stages", c.stages},           {"bottleneck_channels", c.bottleneck_channels},
       {"lighting_channels", c.lighting_channels}, {"res_blocks", c.res_blocks},
       {"probe_size", c.probe_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.stages = j.value("stages", d.stages);
  c.bottleneck_channels = j.value("bottleneck_channels", d.bottleneck_channels);
  c.lighting_channels = j.value("lighting_channels", d.lighting_channels);
  c.res_blocks = j.value("res_blocks", d.res_blocks);
  c.probe_size = j.value("probe_size", d.probe_size);
}

struct LightingCode {
  std::vector<double> values;
  std::size_t dim() const { return values.size(); }
  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <class T>
struct NetworkState {
  ModelConfig config;
  ParamStore<T> params;
  long long train_steps = 0;

  template <class U>
  NetworkState<U> cast() const {
    return {config, params.template cast<U>(), train_steps};
  }
};

namespace model_detail {

// Plain mode draws weights from U(+-1/sqrt(fan_in)). He mode uses
// U(+-sqrt(6/fan_in)) with the effective fan-in of a stride-2 transposed conv
// (cin * k^2 / 4); without it a deep decoder attenuates the bottleneck signal
// by orders of magnitude and the guide code has no effect on the output.
template <class T>
struct Builder {
  ParamStore<T>& p;
  Rng& rng;
  bool he = false;

  void weight(const std::string& n, Shape shape, int fan_in) {
    if (he)
      p.add_uniform_bound(n, std::move(shape), std::sqrt(6.0 / fan_in), rng);
    else
      p.add_uniform(n, std::move(shape), fan_in, rng);
  }
  void conv(const std::string& n, int cin, int cout, int k) {
    weight(n + ".w", {cout, cin, k, k}, cin * k * k);
    p.add_uniform(n + ".b", {cout}, cin * k * k, rng);
  }
  void deconv(const std::string& n, int cin, int cout, int k) {
    weight(n + ".w", {cin, cout, k, k}, he ? std::max(1, cin * k * k / 4) : cout * k * k);
    p.add_uniform(n + ".b", {cout}, he ? std::max(1, cin * k * k / 4) : cout * k * k, rng);
  }
  void linear(const std::string& n, int in, int out) {
    weight(n + ".w", {out, in}, in);
    p.add_uniform(n + ".b", {out}, in, rng);
  }
  void norm(const std::string& n, int c) {
    p.add_constant(n + ".g", {c}, T(1));
    p.add_constant(n + ".b", {c}, T(0));
  }
  void dual_conv(const std::string& n, int cin, int cout, bool normalized) {
    conv(n + ".conv1", cin, cout, 3);
    if (normalized) norm(n + ".norm1", cout);
    conv(n + ".conv2", cout, cout, 3);
    if (normalized) norm(n + ".norm2", cout);
  }
  void down_proj(const std::string& n, int cin, int cout) {
    conv(n + ".down1", cin, cout, 4);
    deconv(n + ".up", cout, cin, 4);
    conv(n + ".down2", cin, cout, 4);
  }
  void up_proj(const std::string& n, int cin, int cout) {
    deconv(n + ".up1", cin, cout, 4);
    conv(n + ".down", cout, cin, 4);
    deconv(n + ".up2", cin, cout, 4);
  }
  void res_block(const std::string& n, int c) {
    conv(n + ".conv1", c, c, 3);
    conv(n + ".conv2", c, c, 3);
  }
};

template <class T>
struct Graph {
  const ParamStore<T>& p;
  using V = ag::Var<T>;

  V conv(const V& x, const std::string& n, int stride, int pad) const {
    return ag::conv2d(x, p[n + ".w"], p[n + ".b"], stride, pad);
  }
  V deconv(const V& x, const std::string& n) const { return ag::conv_transpose2d(x, p[n + ".w"], p[n + ".b"], 2, 1); }
  V down(const V& x, const std::string& n) const { return conv(x, n, 2, 1); }

  V dual_conv(V x, const std::string& n, bool normalized) const {
    for (int i = 1; i <= 2; ++i) {
      const std::string k = std::to_string(i);
      x = conv(x, n + ".conv" + k, 1, 1);
      if (normalized) x = ag::instance_norm(x, p[n + ".norm" + k + ".g"], p[n + ".norm" + k + ".b"]);
      x = ag::elu(x);
    }
    return x;
  }
  V down_proj(const V& h, const std::string& n) const {
    V l0 = ag::elu(down(h, n + ".down1"));
    V h0 = ag::elu(deconv(l0, n + ".up"));
    V l1 = ag::elu(down(ag::sub(h0, h), n + ".down2"));
    return ag::add(l0, l1);
  }
  V up_proj(const V& l, const std::string& n) const {
    V h0 = ag::elu(deconv(l, n + ".up1"));
    V l0 = ag::elu(down(h0, n + ".down"));
    V h1 = ag::elu(deconv(ag::sub(l0, l), n + ".up2"));
    return ag::add(h0, h1);
  }
  V res_block(const V& x, const std::string& n) const {
    return ag::add(x, conv(ag::elu(conv(x, n + ".conv1", 1, 1)), n + ".conv2", 1, 1));
  }
};

}  // namespace model_detail

/// Fan-in scaled (He) uniform initialization; instance-norm scales start at 1.
template <class T>
NetworkState<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetworkState<T> st;
  st.config = cfg;
  Rng rng(derive_seed(seed, "relight-model"));
  model_detail::Builder<T> b{st.params, rng, true};
  const int n = cfg.stages;
  for (int k = 0; k < n; ++k) {
    const std::string s = std::to_string(k);
    b.dual_conv("enc" + s, k == 0 ? 3 : cfg.channels(k), cfg.channels(k), true);
    b.down_proj("enc" + s + ".proj", cfg.channels(k), cfg.channels(k + 1));
  }
  b.conv("bottleneck", cfg.bottleneck_channels, cfg.bottleneck_channels, 3);
  for (int r = 0; r < cfg.res_blocks; ++r) b.res_block("res" + std::to_string(r), cfg.bottleneck_channels);
  for (int k = n - 1; k >= 0; --k) {
    const std::string s = std::to_string(k);
    b.up_proj("dec" + s + ".proj", cfg.channels(k + 1), cfg.channels(k));
    b.dual_conv("dec" + s, 2 * cfg.channels(k), cfg.channels(k), false);
  }
  b.conv("out", cfg.channels(0), 3, 3);

  const int pc = cfg.probe_channels(), D = cfg.lighting_channels;
  b.conv("penc.in", 3, pc, 3);
  for (int k = 0; k < cfg.probe_levels(); ++k) b.conv("penc.down" + std::to_string(k), pc, pc, 4);
  b.conv("penc.code", pc, D, 1);

  b.linear("pdec.fc", D, pc * 8 * 8);
  for (int k = 0; k < cfg.probe_levels(); ++k) b.deconv("pdec.up" + std::to_string(k), pc, pc, 4);
  b.conv("pdec.out", pc, 3, 3);
  return st;
}

template <class T>
struct Encoded {
  ag::Var<T> geometry;
  ag::Var<T> code;
  std::vector<ag::Var<T>> skips;
};

template <class T>
Encoded<T> encode_graph(const NetworkState<T>& st, const ag::Var<T>& image) {
  const auto& cfg = st.config;
  const auto& s = image->value.shape;
  if (s.size() != 3 || s[0] != 3 || s[1] != cfg.input_size || s[2] != cfg.input_size)
    throw ShapeError("encode: expected image {3," + std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                     "}, got " + shape_str(s));
  model_detail::Graph<T> g{st.params};
  Encoded<T> e;
  ag::Var<T> x = image;
  for (int k = 0; k < cfg.stages; ++k) {
    const std::string n = "enc" + std::to_string(k);
    x = g.dual_conv(x, n, true);
    e.skips.push_back(x);
    x = g.down_proj(x, n + ".proj");
  }
  ag::Var<T> b = g.conv(x, "bottleneck", 1, 1);
  e.geometry = ag::elu(ag::slice(b, 0, cfg.geometry_channels()));
  e.code = ag::global_avg_pool(ag::slice(b, cfg.geometry_channels(), cfg.bottleneck_channels));
  return e;
}

template <class T>
ag::Var<T> decode_probe_graph(const NetworkState<T>& st, const ag::Var<T>& code) {
  const auto& cfg = st.config;
  if (code->value.size() != static_cast<std::size_t>(cfg.lighting_channels))
    throw ShapeError("decode_probe: code dimension " + std::to_string(code->value.size()) + " != " +
                     std::to_string(cfg.lighting_channels));
  model_detail::Graph<T> g{st.params};
  const int pc = cfg.probe_channels();
  ag::Var<T> x = ag::linear(code, st.params["pdec.fc.w"], st.params["pdec.fc.b"]);
  x = ag::elu(ag::reshape(x, {pc, 8, 8}));
  for (int k = 0; k < cfg.probe_levels(); ++k) x = ag::elu(g.deconv(x, "pdec.up" + std::to_string(k)));
  return ag::sigmoid(g.conv(x, "pdec.out", 1, 1));
}

template <class T>
ag::Var<T> encode_probe_graph(const NetworkState<T>& st, const ag::Var<T>& probe) {
  const auto& cfg = st.config;
  const auto& s = probe->value.shape;
  if (s.size() != 3 || s[0] != 3 || s[1] != cfg.probe_size || s[2] != cfg.probe_size)
    throw ShapeError("encode_probe: expected probe {3," + std::to_string(cfg.probe_size) + "," +
                     std::to_string(cfg.probe_size) + "}, got " + shape_str(s));
  model_detail::Graph<T> g{st.params};
  ag::Var<T> x = ag::elu(g.conv(probe, "penc.in", 1, 1));
  for (int k = 0; k < cfg.probe_levels(); ++k) x = ag::elu(g.down(x, "penc.down" + std::to_string(k)));
  return ag::global_avg_pool(g.conv(x, "penc.code", 1, 0));
}

/// Image decoder on [geometry ‖ broadcast(code)] with encoder skips.
template <class T>
ag::Var<T> decode_image_graph(const NetworkState<T>& st, const ag::Var<T>& geometry, const ag::Var<T>& code,
                              const std::vector<ag::Var<T>>& skips) {
  const auto& cfg = st.config;
  if (code->value.size() != static_cast<std::size_t>(cfg.lighting_channels))
    throw ShapeError("decode_image: code dimension mismatch");
  if (static_cast<int>(skips.size()) != cfg.stages) throw ShapeError("decode_image: skip count mismatch");
  model_detail::Graph<T> g{st.params};
  const int side = cfg.bottleneck_side();
  ag::Var<T> x = ag::concat(geometry, ag::broadcast_hw(code, side, side));
  for (int r = 0; r < cfg.res_blocks; ++r) x = g.res_block(x, "res" + std::to_string(r));
  for (int k = cfg.stages - 1; k >= 0; --k) {
    const std::string n = "dec" + std::to_string(k);
    x = g.up_proj(x, n + ".proj");
    x = ag::concat(x, skips[static_cast<std::size_t>(k)]);
    x = g.dual_conv(x, n, false);
  }
  return ag::sigmoid(g.conv(x, "out", 1, 1));
}

template <class T>
struct RelightGraph {
  Encoded<T> encoded;
  ag::Var<T> predicted_probe;
  ag::Var<T> guide_code;
  ag::Var<T> relit;
};

template <class T>
RelightGraph<T> relight_graph(const NetworkState<T>& st, const ag::Var<T>& image, const ag::Var<T>& guide) {
  RelightGraph<T> r;
  r.encoded = encode_graph(st, image);
  r.guide_code = encode_probe_graph(st, guide);
  r.predicted_probe = decode_probe_graph(st, r.encoded.code);
  r.relit = decode_image_graph(st, r.encoded.geometry, r.guide_code, r.encoded.skips);
  return r;
}

// ---------------------------------------------------------------------------
// Inference API on images and probes
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> code_tensor(const LightingCode& c) {
  Tensor<T> t({static_cast<int>(c.dim())});
  for (std::size_t i = 0; i < c.dim(); ++i) t[i] = static_cast<T>(c.values[i]);
  return t;
}

template <class T>
LightingCode to_code(const Tensor<T>& t) {
  return {std::vector<double>(t.data.begin(), t.data.end())};
}

template <class T>
LightProbe to_probe(const Tensor<T>& t) {
  LightProbe p;
  p.pixels = from_tensor(t);
  return p;
}

struct EncodeResult {
  Tensor<double> geometry;
  LightingCode code;
};

template <class T>
EncodeResult encode(const NetworkState<T>& st, const Image& image) {
  ag::NoGradGuard ng;
  auto e = encode_graph(st, ag::constant(to_tensor<T>(image)));
  return {e.geometry->value.template cast<double>(), to_code(e.code->value)};
}

template <class T>
LightProbe decode_probe(const NetworkState<T>& st, const LightingCode& code) {
  ag::NoGradGuard ng;
  return to_probe(decode_probe_graph(st, ag::constant(code_tensor<T>(code)))->value);
}

template <class T>
LightingCode encode_probe(const NetworkState<T>& st, const LightProbe& probe) {
  ag::NoGradGuard ng;
  return to_code(encode_probe_graph(st, ag::constant(to_tensor<T>(probe.pixels)))->value);
}

struct RelightResult {
  LightProbe predicted_probe;
  Image relit;
};

template <class T>
RelightResult relight_forward(const NetworkState<T>& st, const Image& image, const LightProbe& guide) {
  const auto& cfg = st.config;
  if (image.height != cfg.input_size || image.width != cfg.input_size)
    throw ShapeError("relight_forward: image " + dims_str(image) + " does not match input_size " + std::to_string(cfg.input_size));
  if (guide.pixels.height != cfg.probe_size || guide.pixels.width != cfg.probe_size)
    throw ShapeError("relight_forward: guide probe " + dims_str(guide.pixels) + " does not match probe_size " +
                     std::to_string(cfg.probe_size));
  ag::NoGradGuard ng;
  auto r = relight_graph(st, ag::constant(to_tensor<T>(image)), ag::constant(to_tensor<T>(guide.pixels)));
  return {to_probe(r.predicted_probe->value), from_tensor(r.relit->value)};
}

/// Relights with an explicit lighting code while keeping the image's
/// geometry features and skips.
template <class T>
Image relight_with_code(const NetworkState<T>& st, const Image& image, const LightingCode& code) {
  ag::NoGradGuard ng;
  auto e = encode_graph(st, ag::constant(to_tensor<T>(image)));
  return from_tensor(decode_image_graph(st, e.geometry, ag::constant(code_tensor<T>(code)), e.skips)->value);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

template <class T>
void append_params(TensorArchive& a, const ParamStore<T>& params, const std::string& prefix = "") {
  for (std::size_t i = 0; i < params.size(); ++i)
    a.tensors.emplace_back(prefix + params.names()[i], params.vars()[i]->value.template cast<float>());
}

/// Overwrites values of every parameter from the archive; shapes must match.
template <class T>
void read_params(const TensorArchive& a, ParamStore<T>& params, const std::string& prefix = "") {
  std::vector<Tensor<T>> staged;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = a.get(prefix + params.names()[i]);
    if (t.shape != params.vars()[i]->value.shape)
      throw FormatError("tensor '" + params.names()[i] + "' has shape " + shape_str(t.shape) + ", expected " +
                        shape_str(params.vars()[i]->value.shape));
    staged.push_back(t.template cast<T>());
  }
  for (std::size_t i = 0; i < params.size(); ++i) params.vars()[i]->value = std::move(staged[i]);
}

}  // namespace relight
