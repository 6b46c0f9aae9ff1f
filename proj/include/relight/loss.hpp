#pragma once

// Training objective: probe L1 + image L1 + weighted perceptual distance.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/archive.hpp"
#include "relight/autograd.hpp"
#include "relight/image.hpp"
#include "relight/params.hpp"
#include "relight/probe.hpp"

namespace relight {

enum class ExtractorKind { PretrainedClassifier, FrozenRandom };

struct FeatureExtractorSpec {
  ExtractorKind kind = ExtractorKind::PretrainedClassifier;
  int layer_count = 4;
  std::vector<double> layer_weights;  // empty: all 1.0
  std::uint64_t seed = 0;
  /// Tensor archive holding VGG-16 `features.<i>.weight/bias` tensors.
  std::string weights_path = "weights/vgg16_features.rlt";

  static FeatureExtractorSpec frozen_random(int layers = 4, std::uint64_t seed = 0) {
    FeatureExtractorSpec s;
    s.kind = ExtractorKind::FrozenRandom;
    s.layer_count = layers;
    s.seed = seed;
    return s;
  }

  static constexpr int max_layers() { return 5; }

  std::vector<double> weights() const {
    return layer_weights.empty() ? std::vector<double>(static_cast<std::size_t>(layer_count), 1.0) : layer_weights;
  }

  void validate() const {
    if (layer_count < 0 || layer_count > max_layers())
      throw ValidationError("FeatureExtractorSpec: layer_count must lie in [0, " + std::to_string(max_layers()) + "]");
    if (!layer_weights.empty() && static_cast<int>(layer_weights.size()) != layer_count)
      throw ValidationError("FeatureExtractorSpec: layer_weights must have layer_count entries");
    for (double w : layer_weights)
      if (!std::isfinite(w) || w < 0.0) throw ValidationError("FeatureExtractorSpec: layer weights must be finite and >= 0");
  }
};

inline void to_json(nlohmann::json& j, const FeatureExtractorSpec& s) {
  j = {{"kind", s.kind == ExtractorKind::FrozenRandom ? "frozen-random" : "pretrained-classifier"},
       {"layer_count", s.layer_count},
       {"layer_weights", s.weights()},
       {"seed", s.seed},
       {"weights_path", s.weights_path}};
}

inline void from_json(const nlohmann::json& j, FeatureExtractorSpec& s) {
  const FeatureExtractorSpec d;
  const std::string kind = j.value("kind", std::string("pretrained-classifier"));
  if (kind == "frozen-random")
    s.kind = ExtractorKind::FrozenRandom;
  else if (kind == "pretrained-classifier")
    s.kind = ExtractorKind::PretrainedClassifier;
  else
    throw ValidationError("FeatureExtractorSpec: unknown kind '" + kind + "'");
  s.layer_count = j.value("layer_count", d.layer_count);
  s.layer_weights = j.value("layer_weights", std::vector<double>{});
  s.seed = j.value("seed", d.seed);
  s.weights_path = j.value("weights_path", d.weights_path);
}

/// Fixed (non-trainable) feature network. Layer j has spatial side
/// input_side / 2^j for both layouts:
///   frozen-random: 3x3 conv (8 ch) then 4x4 stride-2 convs doubling width, ELU.
///   pretrained-classifier: VGG-16 taps relu1_2, relu2_2, relu3_3, relu4_3, relu5_3.
template <class T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureExtractorSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    weights_ = spec_.weights();
    if (spec_.layer_count == 0) return;
    if (spec_.kind == ExtractorKind::FrozenRandom)
      build_random();
    else
      load_vgg();
    for (const auto& v : params_.vars()) v->requires_grad = false;
  }

  const FeatureExtractorSpec& spec() const { return spec_; }
  const std::vector<double>& layer_weights() const { return weights_; }
  int layer_count() const { return spec_.layer_count; }

  std::vector<ag::Var<T>> features(const ag::Var<T>& image) const {
    std::vector<ag::Var<T>> out;
    if (spec_.layer_count == 0) return out;
    return spec_.kind == ExtractorKind::FrozenRandom ? random_features(image) : vgg_features(image);
  }

 private:
  static constexpr int kVggConvs[5][3] = {{0, 2, -1}, {5, 7, -1}, {10, 12, 14}, {17, 19, 21}, {24, 26, 28}};
  static constexpr int kVggWidth[5] = {64, 128, 256, 512, 512};

  void build_random() {
    Rng rng(derive_seed(spec_.seed, "frozen-random-extractor"));
    for (int j = 0; j < spec_.layer_count; ++j) {
      const int cin = j == 0 ? 3 : 8 << (j - 1), cout = 8 << j, k = j == 0 ? 3 : 4;
      const int fan_in = cin * k * k;
      const double bound = std::sqrt(6.0 / fan_in);
      Tensor<T> w({cout, cin, k, k});
      for (auto& v : w.data) v = static_cast<T>(uniform(rng, -bound, bound));
      params_.add("layer" + std::to_string(j) + ".w", std::move(w));
      params_.add("layer" + std::to_string(j) + ".b", Tensor<T>({cout}));
    }
  }

  std::vector<ag::Var<T>> random_features(ag::Var<T> x) const {
    std::vector<ag::Var<T>> out;
    for (int j = 0; j < spec_.layer_count; ++j) {
      const std::string n = "layer" + std::to_string(j);
      x = ag::elu(ag::conv2d(x, params_[n + ".w"], params_[n + ".b"], j == 0 ? 1 : 2, 1));
      out.push_back(x);
    }
    return out;
  }

  void load_vgg() {
    if (!std::filesystem::exists(spec_.weights_path))
      throw IoError("pretrained classifier weights not found at '" + spec_.weights_path +
                    "'; export VGG-16 features to a tensor archive there, or use the \"frozen-random\" extractor kind");
    const auto a = load_archive(spec_.weights_path);
    int cin = 3;
    for (int blk = 0; blk < spec_.layer_count; ++blk)
      for (int idx : kVggConvs[blk]) {
        if (idx < 0) continue;
        const std::string n = "features." + std::to_string(idx);
        const auto& w = a.get(n + ".weight");
        const auto& b = a.get(n + ".bias");
        const Shape expect{kVggWidth[blk], cin, 3, 3};
        if (w.shape != expect || b.shape != Shape{kVggWidth[blk]})
          throw FormatError("pretrained weights: '" + n + "' has shape " + shape_str(w.shape) + ", expected " + shape_str(expect));
        params_.add(n + ".weight", w.template cast<T>());
        params_.add(n + ".bias", b.template cast<T>());
        cin = kVggWidth[blk];
      }
  }

  std::vector<ag::Var<T>> vgg_features(const ag::Var<T>& image) const {
    static constexpr double mean[3] = {0.485, 0.456, 0.406}, stdev[3] = {0.229, 0.224, 0.225};
    // ImageNet normalization as a fixed diagonal 1x1 conv.
    Tensor<T> nw({3, 3, 1, 1}), nb({3});
    for (int c = 0; c < 3; ++c) {
      nw[static_cast<std::size_t>(c * 3 + c)] = static_cast<T>(1.0 / stdev[c]);
      nb[c] = static_cast<T>(-mean[c] / stdev[c]);
    }
    ag::Var<T> x = ag::conv2d(image, ag::constant(std::move(nw)), ag::constant(std::move(nb)), 1, 0);
    std::vector<ag::Var<T>> out;
    for (int blk = 0; blk < spec_.layer_count; ++blk) {
      if (blk > 0) x = ag::max_pool2(x);
      for (int idx : kVggConvs[blk]) {
        if (idx < 0) continue;
        const std::string n = "features." + std::to_string(idx);
        x = ag::relu(ag::conv2d(x, params_[n + ".weight"], params_[n + ".bias"], 1, 1));
      }
      out.push_back(x);
    }
    return out;
  }

  FeatureExtractorSpec spec_;
  std::vector<double> weights_;
  ParamStore<T> params_;
};

struct LossBreakdown {
  double probe = 0.0;
  double image_l1 = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

template <class T>
struct LossTerms {
  ag::Var<T> probe, image_l1, perceptual, total;

  LossBreakdown breakdown() const {
    LossBreakdown b;
    b.probe = static_cast<double>(probe->value[0]);
    b.image_l1 = static_cast<double>(image_l1->value[0]);
    b.perceptual = static_cast<double>(perceptual->value[0]);
    b.total = b.probe + b.image_l1 + b.perceptual;
    return b;
  }
};

/// sum_j w_j * mean((l_j(target) - l_j(pred))^2)
template <class T>
ag::Var<T> perceptual_graph(const ag::Var<T>& target, const ag::Var<T>& pred, const FeatureExtractor<T>& fx) {
  if (fx.layer_count() == 0) return ag::constant(Tensor<T>({1}));
  const auto ft = fx.features(target);
  const auto fp = fx.features(pred);
  std::vector<ag::Var<T>> terms;
  std::vector<T> w;
  for (std::size_t j = 0; j < ft.size(); ++j) {
    terms.push_back(ag::mean_sq_diff(ft[j], fp[j]));
    w.push_back(static_cast<T>(fx.layer_weights()[j]));
  }
  return ag::weighted_sum(terms, w);
}

/// L_total = L_probe + (L1 + perceptual) on graph nodes.
template <class T>
LossTerms<T> loss_graph(const ag::Var<T>& P, const ag::Var<T>& P_hat, const ag::Var<T>& I, const ag::Var<T>& I_hat,
                        const FeatureExtractor<T>& fx) {
  LossTerms<T> t;
  t.probe = ag::mean_abs_diff(P, P_hat);
  t.image_l1 = ag::mean_abs_diff(I, I_hat);
  t.perceptual = perceptual_graph(I, I_hat, fx);
  t.total = ag::weighted_sum<T>({t.probe, t.image_l1, t.perceptual}, {T(1), T(1), T(1)});
  return t;
}

inline double probe_loss(const LightProbe& P, const LightProbe& P_hat) {
  if (!P.pixels.same_shape(P_hat.pixels))
    throw ShapeError("probe_loss: " + dims_str(P.pixels) + " vs " + dims_str(P_hat.pixels));
  return mean_abs_error(P.pixels, P_hat.pixels);
}

inline std::vector<Tensor<double>> perceptual_features(const FeatureExtractor<double>& fx, const Image& image) {
  ag::NoGradGuard ng;
  std::vector<Tensor<double>> out;
  for (const auto& f : fx.features(ag::constant(to_tensor<double>(image)))) out.push_back(f->value);
  return out;
}

/// (mean |I - I_hat|, sum_j w_j * MSE of layer-j features)
inline std::pair<double, double> image_loss(const Image& I, const Image& I_hat, const FeatureExtractor<double>& fx) {
  if (!I.same_shape(I_hat)) throw ShapeError("image_loss: " + dims_str(I) + " vs " + dims_str(I_hat));
  ag::NoGradGuard ng;
  auto perc = perceptual_graph(ag::constant(to_tensor<double>(I)), ag::constant(to_tensor<double>(I_hat)), fx);
  return {mean_abs_error(I, I_hat), perc->value[0]};
}

inline LossBreakdown total_loss(const LightProbe& P, const LightProbe& P_hat, const Image& I_i, const Image& I_hat_i,
                                const FeatureExtractor<double>& fx) {
  LossBreakdown b;
  b.probe = probe_loss(P, P_hat);
  std::tie(b.image_l1, b.perceptual) = image_loss(I_i, I_hat_i, fx);
  b.total = b.probe + b.image_l1 + b.perceptual;
  return b;
}

}  // namespace relight
