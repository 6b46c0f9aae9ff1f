#pragma once

// Beta-VAE over light probes: the decoder generates probes from latent vectors.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/archive.hpp"
#include "relight/autograd.hpp"
#include "relight/model.hpp"
#include "relight/params.hpp"
#include "relight/probe.hpp"
#include "relight/random.hpp"

namespace relight {

struct VaeConfig {
  int latent_dim = 8;
  double beta = 4.0;
  int probe_size = 64;
  int channels = 16;
  double lr = 3e-4;
  int epochs = 40;
  std::uint64_t seed = 0;

  bool operator==(const VaeConfig&) const = default;

  void validate() const {
    if (latent_dim < 1) throw ValidationError("VaeConfig: latent_dim must be >= 1");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ValidationError("VaeConfig: beta must be finite and >= 0");
    if (probe_size < 8 || probe_size % 8 != 0 || ((probe_size / 8) & (probe_size / 8 - 1)) != 0)
      throw ValidationError("VaeConfig: probe_size must be 8 * 2^k");
    if (channels <= 0) throw ValidationError("VaeConfig: channels must be positive");
    if (!(lr > 0.0)) throw ValidationError("VaeConfig: lr must be positive");
    if (epochs < 0) throw ValidationError("VaeConfig: epochs must be >= 0");
  }

  int levels() const {
    int n = 0;
    for (int s = probe_size; s > 8; s /= 2) ++n;
    return n;
  }
  /// Width after k stride-2 levels, capped at 4x the base width.
  int width(int k) const { return channels << std::min(k, 2); }
  /// Elements in one probe; the training objective expresses beta per element.
  double elements() const { return 3.0 * probe_size * probe_size; }
};

inline void to_json(nlohmann::json& j, const VaeConfig& c) {
  j = {{"latent_dim", c.latent_dim}, {"beta", c.beta},     {"probe_size", c.probe_size}, {"channels", c.channels},
       {"lr", c.lr},                 {"epochs", c.epochs}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, VaeConfig& c) {
  const VaeConfig d;
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.beta = j.value("beta", d.beta);
  c.probe_size = j.value("probe_size", d.probe_size);
  c.channels = j.value("channels", d.channels);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
}

template <class T>
struct VaeState {
  VaeConfig config;
  ParamStore<T> params;

  template <class U>
  VaeState<U> cast() const {
    return {config, params.template cast<U>()};
  }
};

template <class T>
VaeState<T> init_vae(const VaeConfig& cfg) {
  cfg.validate();
  VaeState<T> st;
  st.config = cfg;
  Rng rng(derive_seed(cfg.seed, "probe-vae"));
  model_detail::Builder<T> b{st.params, rng};
  const int L = cfg.levels(), top = cfg.width(L);
  b.conv("venc.in", 3, cfg.width(0), 3);
  for (int k = 0; k < L; ++k) b.conv("venc.down" + std::to_string(k), cfg.width(k), cfg.width(k + 1), 4);
  b.linear("venc.fc", top * 64, 2 * cfg.latent_dim);
  b.linear("vdec.fc", cfg.latent_dim, top * 64);
  for (int k = L; k > 0; --k) b.deconv("vdec.up" + std::to_string(k - 1), cfg.width(k), cfg.width(k - 1), 4);
  b.conv("vdec.out", cfg.width(0), 3, 3);
  return st;
}

template <class T>
struct VaeGraph {
  ag::Var<T> mu, logvar, z, recon;
};

template <class T>
std::pair<ag::Var<T>, ag::Var<T>> vae_encode_graph(const VaeState<T>& st, const ag::Var<T>& probe) {
  const auto& cfg = st.config;
  const auto& s = probe->value.shape;
  if (s.size() != 3 || s[0] != 3 || s[1] != cfg.probe_size || s[2] != cfg.probe_size)
    throw ShapeError("vae: expected probe {3," + std::to_string(cfg.probe_size) + "," + std::to_string(cfg.probe_size) +
                     "}, got " + shape_str(s));
  model_detail::Graph<T> g{st.params};
  ag::Var<T> x = ag::elu(g.conv(probe, "venc.in", 1, 1));
  for (int k = 0; k < cfg.levels(); ++k) x = ag::elu(g.down(x, "venc.down" + std::to_string(k)));
  x = ag::reshape(x, {static_cast<int>(x->value.size())});
  ag::Var<T> h = ag::linear(x, st.params["venc.fc.w"], st.params["venc.fc.b"]);
  return {ag::slice(h, 0, cfg.latent_dim), ag::slice(h, cfg.latent_dim, 2 * cfg.latent_dim)};
}

template <class T>
ag::Var<T> vae_decode_graph(const VaeState<T>& st, const ag::Var<T>& z) {
  const auto& cfg = st.config;
  if (z->value.size() != static_cast<std::size_t>(cfg.latent_dim))
    throw ShapeError("vae: latent dimension " + std::to_string(z->value.size()) + " != " + std::to_string(cfg.latent_dim));
  model_detail::Graph<T> g{st.params};
  const int L = cfg.levels();
  ag::Var<T> x = ag::linear(z, st.params["vdec.fc.w"], st.params["vdec.fc.b"]);
  x = ag::elu(ag::reshape(x, {cfg.width(L), 8, 8}));
  for (int k = L; k > 0; --k) x = ag::elu(g.deconv(x, "vdec.up" + std::to_string(k - 1)));
  return ag::sigmoid(g.conv(x, "vdec.out", 1, 1));
}

/// Sampled mode when `rng` is given (z = mu + exp(logvar/2) * eps), else z = mu.
template <class T>
VaeGraph<T> vae_graph(const VaeState<T>& st, const ag::Var<T>& probe, Rng* rng) {
  VaeGraph<T> g;
  std::tie(g.mu, g.logvar) = vae_encode_graph(st, probe);
  if (rng) {
    Tensor<T> eps({st.config.latent_dim});
    for (auto& e : eps.data) e = static_cast<T>(standard_normal(*rng));
    g.z = ag::reparameterize(g.mu, g.logvar, eps);
  } else {
    g.z = g.mu;
  }
  g.recon = vae_decode_graph(st, g.z);
  return g;
}

struct VaeOutput {
  LightProbe recon;
  std::vector<double> mu, logvar;
};

/// Inference runs in double precision so the sigmoid output stays strictly
/// inside (0, 1).
template <class T>
VaeOutput vae_forward(const VaeState<T>& st, const LightProbe& probe, Rng* rng = nullptr) {
  ag::NoGradGuard ng;
  const auto d = st.template cast<double>();
  auto g = vae_graph(d, ag::constant(to_tensor<double>(probe.pixels)), rng);
  VaeOutput out;
  out.recon = to_probe(g.recon->value);
  out.mu = g.mu->value.data;
  out.logvar = g.logvar->value.data;
  return out;
}

/// 1/2 sum_d (mu_d^2 + exp(logvar_d) - 1 - logvar_d)
inline double kl_divergence(const std::vector<double>& mu, const std::vector<double>& logvar) {
  if (mu.size() != logvar.size()) throw ShapeError("kl_divergence: mu and logvar differ in length");
  double s = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) s += mu[d] * mu[d] + std::exp(logvar[d]) - 1.0 - logvar[d];
  return 0.5 * s;
}

/// mean |recon - probe| + beta * KL
inline double vae_loss(const LightProbe& recon, const LightProbe& probe, const std::vector<double>& mu,
                       const std::vector<double>& logvar, double beta) {
  if (!recon.pixels.same_shape(probe.pixels))
    throw ShapeError("vae_loss: " + dims_str(recon.pixels) + " vs " + dims_str(probe.pixels));
  if (!(beta >= 0.0)) throw ValidationError("vae_loss: beta must be >= 0");
  const double recon_term = mean_abs_error(recon.pixels, probe.pixels);
  return beta == 0.0 ? recon_term : recon_term + beta * kl_divergence(mu, logvar);
}

template <class T>
LightProbe sample_probe(const VaeState<T>& st, const std::vector<double>& z) {
  if (z.size() != static_cast<std::size_t>(st.config.latent_dim))
    throw ShapeError("sample_probe: z has " + std::to_string(z.size()) + " entries, expected " +
                     std::to_string(st.config.latent_dim));
  for (double v : z)
    if (!std::isfinite(v)) throw ValidationError("sample_probe: z must be finite");
  ag::NoGradGuard ng;
  const auto d = st.template cast<double>();
  return to_probe(vae_decode_graph(d, ag::constant(Tensor<double>({static_cast<int>(z.size())}, z)))->value);
}

/// Decodes z with z_dim swept over `steps` evenly spaced values in [lo, hi]
/// and every other coordinate 0.
template <class T>
std::vector<LightProbe> latent_traverse(const VaeState<T>& st, int dim, double lo, double hi, int steps) {
  if (dim < 0 || dim >= st.config.latent_dim)
    throw ValidationError("latent_traverse: dim " + std::to_string(dim) + " outside [0, " +
                          std::to_string(st.config.latent_dim) + ")");
  if (steps < 2) throw ValidationError("latent_traverse: steps must be >= 2");
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) throw ValidationError("latent_traverse: need finite lo <= hi");
  std::vector<LightProbe> out;
  for (int s = 0; s < steps; ++s) {
    std::vector<double> z(static_cast<std::size_t>(st.config.latent_dim), 0.0);
    z[static_cast<std::size_t>(dim)] = s == steps - 1 ? hi : lo + (hi - lo) * s / (steps - 1);
    out.push_back(sample_probe(st, z));
  }
  return out;
}

/// Luminance-weighted centroid of the brightest 10% of pixels, (x, y) in pixels.
inline std::array<double, 2> highlight_centroid(const LightProbe& p) {
  const Image& im = p.pixels;
  std::vector<double> lum(static_cast<std::size_t>(im.height) * im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      lum[static_cast<std::size_t>(y) * im.width + x] = (im.at(y, x, 0) + im.at(y, x, 1) + im.at(y, x, 2)) / 3.0;
  auto sorted = lum;
  const std::size_t q = sorted.size() * 9 / 10;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q), sorted.end());
  const double thr = sorted[q];
  double sw = 0, sx = 0, sy = 0;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const double w = std::max(0.0, lum[static_cast<std::size_t>(y) * im.width + x] - thr) + 1e-12;
      sw += w;
      sx += w * x;
      sy += w * y;
    }
  return {sx / sw, sy / sw};
}

/// Random lighting specs used to widen the training corpus.
inline std::vector<ProbeSpec> random_probe_specs(int n, std::uint64_t seed, int size) {
  Rng rng(derive_seed(seed, "random-probe-specs"));
  std::vector<ProbeSpec> out;
  for (int k = 0; k < n; ++k) {
    ProbeSpec s;
    s.azimuth_deg = uniform(rng, -90.0, 90.0);
    s.elevation_deg = uniform(rng, -20.0, 60.0);
    s.intensity = uniform(rng, 0.5, 1.0);
    s.ambient = uniform(rng, 0.05, 0.2);
    s.specular_strength = uniform(rng, 0.0, 0.4);
    s.specular_exponent = uniform(rng, 8.0, 64.0);
    s.size = size;
    out.push_back(s);
  }
  return out;
}

struct VaeTrainResult {
  VaeState<float> state;
  std::vector<double> epoch_loss;  // mean training objective per epoch
};

/// Per-probe Adam steps over a seeded shuffle of the corpus each epoch. The
/// objective is mean-L1 + (beta / elements) * KL, i.e. beta is applied to the
/// per-element reconstruction error.
inline VaeTrainResult train_vae(const std::vector<LightProbe>& corpus, const VaeConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ValidationError("train_vae: empty corpus");
  std::vector<Tensor<float>> data;
  for (const auto& p : corpus) {
    const Image im = p.size() == cfg.probe_size ? p.pixels : resize_bilinear(p.pixels, cfg.probe_size, cfg.probe_size);
    data.push_back(to_tensor<float>(im));
  }
  VaeTrainResult res;
  res.state = init_vae<float>(cfg);
  AdamState<float> adam;
  adam.init(res.state.params);
  Rng rng(derive_seed(cfg.seed, "vae-train"));
  const float kl_w = static_cast<float>(cfg.beta / cfg.elements());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);
    double sum = 0.0;
    for (std::size_t idx : order) {
      res.state.params.zero_grad();
      auto x = ag::constant(data[idx]);
      auto g = vae_graph(res.state, x, &rng);
      auto loss = ag::weighted_sum<float>({ag::mean_abs_diff(x, g.recon), ag::kl_standard_normal(g.mu, g.logvar)}, {1.0f, kl_w});
      if (!std::isfinite(loss->value[0])) throw std::runtime_error("train_vae: non-finite loss at epoch " + std::to_string(e));
      sum += loss->value[0];
      ag::backward(loss);
      adam.update(res.state.params, cfg.lr);
    }
    res.epoch_loss.push_back(sum / static_cast<double>(order.size()));
  }
  return res;
}

inline constexpr int kVaeVersion = 1;

inline void save_vae(const VaeState<float>& st, const fs::path& path) {
  TensorArchive a;
  a.meta = {{"kind", "probe-vae"}, {"vae_version", kVaeVersion}, {"config", st.config}};
  append_params(a, st.params);
  save_archive(a, path);
}

inline VaeState<float> load_vae(const fs::path& path) {
  const auto a = load_archive(path);
  if (a.meta.value("kind", std::string()) != "probe-vae") throw FormatError(path.string() + ": not a probe VAE archive");
  const int v = a.meta.value("vae_version", -1);
  if (v != kVaeVersion)
    throw FormatError(path.string() + ": VAE version " + std::to_string(v) + " is not supported (expected " +
                      std::to_string(kVaeVersion) + ")");
  VaeConfig cfg;
  try {
    cfg = a.meta.at("config").get<VaeConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto st = init_vae<float>(cfg);
  read_params(a, st.params);
  return st;
}

}  // namespace relight
