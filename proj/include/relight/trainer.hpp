#pragma once

// Training loop: swapped-lighting samples, Adam, plateau scheduler,
// per-epoch validation, JSONL metrics and resumable checkpoints.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/archive.hpp"
#include "relight/loss.hpp"
#include "relight/manifest.hpp"
#include "relight/model.hpp"
#include "relight/params.hpp"
#include "relight/probe.hpp"
#include "relight/random.hpp"

namespace relight {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 45;
  int samples_per_epoch = 10000;
  int batch_size = 1;
  double lr = 2e-4;
  double plateau_factor = 0.1;
  int plateau_patience = 5;
  double plateau_threshold = 1e-4;  // relative
  double min_lr = 1e-6;
  int image_size = 256;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;

  void validate() const {
    if (epochs < 0) throw ValidationError("TrainConfig: epochs must be >= 0");
    if (samples_per_epoch <= 0) throw ValidationError("TrainConfig: samples_per_epoch must be positive");
    if (batch_size <= 0) throw ValidationError("TrainConfig: batch_size must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("TrainConfig: lr must be finite and >= 0");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ValidationError("TrainConfig: plateau_factor must lie in (0,1)");
    if (plateau_patience <= 0) throw ValidationError("TrainConfig: plateau_patience must be positive");
    if (!(plateau_threshold >= 0.0)) throw ValidationError("TrainConfig: plateau_threshold must be >= 0");
    if (!(min_lr >= 0.0)) throw ValidationError("TrainConfig: min_lr must be >= 0");
    if (image_size <= 0) throw ValidationError("TrainConfig: image_size must be positive");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ValidationError("TrainConfig: validation_fraction must lie in (0,1)");
  }

  int steps_per_epoch() const { return (samples_per_epoch + batch_size - 1) / batch_size; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"samples_per_epoch", c.samples_per_epoch},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"plateau_factor", c.plateau_factor},
       {"plateau_patience", c.plateau_patience},
       {"plateau_threshold", c.plateau_threshold},
       {"min_lr", c.min_lr},
       {"image_size", c.image_size},
       {"seed", c.seed},
       {"validation_fraction", c.validation_fraction}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.samples_per_epoch = j.value("samples_per_epoch", d.samples_per_epoch);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.plateau_factor = j.value("plateau_factor", d.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", d.plateau_patience);
  c.plateau_threshold = j.value("plateau_threshold", d.plateau_threshold);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.image_size = j.value("image_size", d.image_size);
  c.seed = j.value("seed", d.seed);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct TrainingSample {
  std::string scene;
  int source_id = 0;  // j
  int target_id = 0;  // i
  Image input;        // I, lit by j
  LightProbe probe;   // P_j
  LightProbe guide;   // P_i
  Image target;       // I_i
};

struct SceneSplit {
  std::vector<std::string> train, validation;
};

/// Seeded shuffle of scene ids; round(fraction * n) scenes (at least one when
/// n >= 2) are held out. A single scene is never held out.
inline SceneSplit split_scenes(const DatasetManifest& m, double fraction, std::uint64_t seed) {
  auto ids = m.scene_ids();
  if (ids.empty()) throw ValidationError("split_scenes: manifest has no scenes");
  Rng rng(derive_seed(seed, "scene-split"));
  for (std::size_t k = ids.size(); k > 1; --k) std::swap(ids[k - 1], ids[uniform_index(rng, k)]);
  const auto n = ids.size();
  std::size_t n_val = n < 2 ? 0 : std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * n)), 1, n - 1);
  SceneSplit s;
  s.validation.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

/// Draws training samples from a subset of scenes. Images are decoded on
/// first use and cached at the requested size.
class SampleSource {
 public:
  SampleSource(DatasetManifest manifest, ProbeSet probes, std::vector<std::string> scenes, int image_size, int probe_size)
      : manifest_(std::move(manifest)), scenes_(std::move(scenes)), image_size_(image_size) {
    if (scenes_.empty()) throw ValidationError("SampleSource: empty scene split");
    ids_ = manifest_.illumination_ids();
    if (ids_.empty()) throw ValidationError("SampleSource: manifest has no illumination ids");
    for (const auto& s : scenes_)
      if (!manifest_.scenes.count(s)) throw ValidationError("SampleSource: unknown scene '" + s + "'");
    for (int id : ids_) {
      LightProbe p = probes.by_id(id);
      if (p.size() != probe_size) p.pixels = resize_bilinear(p.pixels, probe_size, probe_size);
      probes_[id] = std::move(p);
    }
  }

  const std::vector<std::string>& scenes() const { return scenes_; }
  const std::vector<int>& illumination_ids() const { return ids_; }
  const LightProbe& probe(int id) const { return probes_.at(id); }

  const Image& image(const std::string& scene, int id) {
    auto key = std::make_pair(scene, id);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Image im = load_png(manifest_.resolve(manifest_.scenes.at(scene).at(id)));
    if (im.height != image_size_ || im.width != image_size_) im = resize_bilinear(im, image_size_, image_size_);
    return cache_.emplace(key, std::move(im)).first->second;
  }

  TrainingSample make(const std::string& scene, int j, int i) {
    TrainingSample s;
    s.scene = scene;
    s.source_id = j;
    s.target_id = i;
    s.input = image(scene, j);
    s.target = image(scene, i);
    s.probe = probe(j);
    s.guide = probe(i);
    return s;
  }

  /// Draw order: scene, then j, then i, each uniform and independent.
  TrainingSample sample(Rng& rng) {
    const auto& scene = scenes_[uniform_index(rng, scenes_.size())];
    const int j = ids_[uniform_index(rng, ids_.size())];
    const int i = ids_[uniform_index(rng, ids_.size())];
    return make(scene, j, i);
  }

 private:
  DatasetManifest manifest_;
  std::vector<std::string> scenes_;
  std::vector<int> ids_;
  std::map<int, LightProbe> probes_;
  std::map<std::pair<std::string, int>, Image> cache_;
  int image_size_;
};

inline TrainingSample sample_batch(SampleSource& source, Rng& rng) { return source.sample(rng); }

// ---------------------------------------------------------------------------
// Scheduler
// ---------------------------------------------------------------------------

struct PlateauState {
  double lr = 0.0;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int reductions = 0;

  bool operator==(const PlateauState&) const = default;
};

inline PlateauState make_plateau(const TrainConfig& c) { return {c.lr}; }

/// Reduce-on-plateau. An epoch improves when val < best - threshold * |best|.
inline double plateau_step(PlateauState& s, double val_loss, const TrainConfig& c) {
  if (!std::isfinite(val_loss)) throw ValidationError("plateau_step: validation loss is not finite");
  const bool improved = std::isinf(s.best) ? val_loss < s.best : val_loss < s.best - c.plateau_threshold * std::abs(s.best);
  if (improved) {
    s.best = val_loss;
    s.bad_epochs = 0;
  } else if (++s.bad_epochs >= c.plateau_patience) {
    s.lr = std::max(s.lr * c.plateau_factor, c.min_lr);
    s.bad_epochs = 0;
    ++s.reductions;
  }
  return s.lr;
}

// ---------------------------------------------------------------------------
// Optimization step
// ---------------------------------------------------------------------------

inline void check_finite(const LossBreakdown& b) {
  const std::pair<const char*, double> terms[] = {
      {"probe", b.probe}, {"image_l1", b.image_l1}, {"perceptual", b.perceptual}, {"total", b.total}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw TrainingError(std::string("non-finite loss term '") + name + "' (" + std::to_string(v) + ")");
}

template <class T>
LossTerms<T> sample_loss_graph(const NetworkState<T>& net, const TrainingSample& s, const FeatureExtractor<T>& fx) {
  auto r = relight_graph(net, ag::constant(to_tensor<T>(s.input)), ag::constant(to_tensor<T>(s.guide.pixels)));
  return loss_graph(ag::constant(to_tensor<T>(s.probe.pixels)), r.predicted_probe, ag::constant(to_tensor<T>(s.target)), r.relit,
                    fx);
}

/// One optimizer step on the mean loss over `batch`. Returns the pre-step
/// loss averaged over the batch.
template <class T>
LossBreakdown train_step(NetworkState<T>& net, const std::vector<TrainingSample>& batch, AdamState<T>& adam,
                         const FeatureExtractor<T>& fx, double lr) {
  if (batch.empty()) throw ValidationError("train_step: empty batch");
  net.params.zero_grad();
  LossBreakdown mean;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    auto terms = sample_loss_graph(net, s, fx);
    const auto b = terms.breakdown();
    check_finite(b);
    mean.probe += b.probe * inv;
    mean.image_l1 += b.image_l1 * inv;
    mean.perceptual += b.perceptual * inv;
    mean.total += b.total * inv;
    ag::backward(batch.size() == 1 ? terms.total : ag::weighted_sum<T>({terms.total}, {static_cast<T>(inv)}));
  }
  adam.update(net.params, lr);
  ++net.train_steps;
  if (!net.params.all_finite()) throw TrainingError("train_step: parameters became non-finite after the update");
  return mean;
}

template <class T>
LossBreakdown train_step(NetworkState<T>& net, const TrainingSample& sample, AdamState<T>& adam, const FeatureExtractor<T>& fx,
                         double lr) {
  return train_step(net, std::vector<TrainingSample>{sample}, adam, fx, lr);
}

/// Fixed held-out pairs: every (scene, i) with source j half-way around the
/// illumination list.
inline std::vector<std::tuple<std::string, int, int>> validation_pairs(const SampleSource& src) {
  std::vector<std::tuple<std::string, int, int>> out;
  const auto& ids = src.illumination_ids();
  for (const auto& s : src.scenes())
    for (std::size_t k = 0; k < ids.size(); ++k) out.emplace_back(s, ids[(k + ids.size() / 2) % ids.size()], ids[k]);
  return out;
}

template <class T>
double validation_loss(const NetworkState<T>& net, SampleSource& src, const FeatureExtractor<T>& fx) {
  ag::NoGradGuard ng;
  double sum = 0.0;
  const auto pairs = validation_pairs(src);
  for (const auto& [scene, j, i] : pairs) sum += sample_loss_graph(net, src.make(scene, j, i), fx).breakdown().total;
  return sum / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct TrainProgress {
  int epoch = 0;
  long long step_in_epoch = 0;
  long long global_step = 0;
  std::string rng;
  double best_val = std::numeric_limits<double>::infinity();
};

struct Checkpoint {
  NetworkState<float> net;
  std::optional<AdamState<float>> adam;
  std::optional<PlateauState> scheduler;
  std::optional<TrainProgress> progress;
  std::optional<double> val_total;
  nlohmann::json train_config;  // informational
};

namespace trainer_detail {
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double num(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}
}  // namespace trainer_detail

inline TensorArchive checkpoint_archive(const Checkpoint& c) {
  using trainer_detail::num;
  TensorArchive a;
  a.meta = {{"kind", "relight-model"},
            {"checkpoint_version", kCheckpointVersion},
            {"model", c.net.config},
            {"train_steps", c.net.train_steps}};
  append_params(a, c.net.params, "model/");
  if (c.adam) {
    a.meta["adam"] = {{"step", c.adam->step},
                      {"beta1", c.adam->config.beta1},
                      {"beta2", c.adam->config.beta2},
                      {"eps", c.adam->config.eps}};
    const auto& names = c.net.params.names();
    if (c.adam->m.size() != names.size()) throw ValidationError("checkpoint: optimizer state does not match parameters");
    for (std::size_t k = 0; k < names.size(); ++k) {
      a.tensors.emplace_back("adam.m/" + names[k], c.adam->m[k]);
      a.tensors.emplace_back("adam.v/" + names[k], c.adam->v[k]);
    }
  }
  if (c.scheduler)
    a.meta["scheduler"] = {{"lr", c.scheduler->lr},
                           {"best", num(c.scheduler->best)},
                           {"bad_epochs", c.scheduler->bad_epochs},
                           {"reductions", c.scheduler->reductions}};
  if (c.progress)
    a.meta["progress"] = {{"epoch", c.progress->epoch},
                          {"step_in_epoch", c.progress->step_in_epoch},
                          {"global_step", c.progress->global_step},
                          {"rng", c.progress->rng},
                          {"best_val", num(c.progress->best_val)}};
  if (c.val_total) a.meta["val_total"] = *c.val_total;
  if (!c.train_config.is_null()) a.meta["train_config"] = c.train_config;
  return a;
}

inline void checkpoint_save(const fs::path& path, const Checkpoint& c) { save_archive(checkpoint_archive(c), path); }

/// Fully decodes and validates before returning; nothing is modified on error.
inline Checkpoint checkpoint_from_archive(const TensorArchive& a) {
  using trainer_detail::num;
  const auto& m = a.meta;
  if (m.value("kind", std::string()) != "relight-model") throw FormatError("checkpoint: not a relighting model archive");
  const int version = m.value("checkpoint_version", -1);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  try {
    const auto cfg = m.at("model").get<ModelConfig>();
    cfg.validate();
    c.net = init_model<float>(cfg, 0);
    c.net.train_steps = m.value("train_steps", 0LL);
    read_params(a, c.net.params, "model/");
    if (m.contains("adam")) {
      AdamState<float> ad;
      ad.step = m["adam"].at("step").get<long long>();
      ad.config.beta1 = m["adam"].at("beta1").get<double>();
      ad.config.beta2 = m["adam"].at("beta2").get<double>();
      ad.config.eps = m["adam"].at("eps").get<double>();
      for (std::size_t k = 0; k < c.net.params.size(); ++k) {
        const auto& n = c.net.params.names()[k];
        const auto& shape = c.net.params.vars()[k]->value.shape;
        const auto& mt = a.get("adam.m/" + n);
        const auto& vt = a.get("adam.v/" + n);
        if (mt.shape != shape || vt.shape != shape) throw FormatError("checkpoint: optimizer tensor shape mismatch for '" + n + "'");
        ad.m.push_back(mt);
        ad.v.push_back(vt);
      }
      c.adam = std::move(ad);
    }
    if (m.contains("scheduler")) {
      const auto& s = m["scheduler"];
      c.scheduler = PlateauState{s.at("lr").get<double>(), num(s.at("best")), s.at("bad_epochs").get<int>(),
                                 s.value("reductions", 0)};
    }
    if (m.contains("progress")) {
      const auto& p = m["progress"];
      c.progress = TrainProgress{p.at("epoch").get<int>(), p.at("step_in_epoch").get<long long>(),
                                 p.at("global_step").get<long long>(), p.at("rng").get<std::string>(),
                                 num(p.at("best_val"))};
    }
    if (m.contains("val_total")) c.val_total = m["val_total"].get<double>();
    if (m.contains("train_config")) c.train_config = m["train_config"];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

inline Checkpoint checkpoint_load(const fs::path& path) {
  const auto a = load_archive(path);
  try {
    return checkpoint_from_archive(a);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline NetworkState<float> load_model(const fs::path& path) { return checkpoint_load(path).net; }

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

struct FitOptions {
  fs::path out_dir;
  bool resume = false;
  /// Stops (after checkpointing) once this many global steps are done;
  /// negative runs to completion.
  long long stop_after_steps = -1;
  std::function<void(const nlohmann::json&)> on_record;
};

struct FitResult {
  NetworkState<float> net;
  std::vector<nlohmann::json> log;
  double best_val = std::numeric_limits<double>::infinity();
  bool interrupted = false;
  SceneSplit split;
};

inline fs::path metrics_path(const fs::path& out_dir) { return out_dir / "metrics.jsonl"; }
inline fs::path last_checkpoint_path(const fs::path& out_dir) { return out_dir / "last.rlt"; }
inline fs::path best_checkpoint_path(const fs::path& out_dir) { return out_dir / "best.rlt"; }

inline std::vector<nlohmann::json> read_metrics(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

/// Runs epochs x steps_per_epoch optimizer steps. The scene split, model
/// initialization and sample stream are all derived from train.seed. With
/// `resume`, training continues from out_dir/last.rlt and the metrics log is
/// cut back to the checkpointed step so the final log matches an
/// uninterrupted run.
inline FitResult fit(const DatasetManifest& manifest, const ProbeSet& probes, const ModelConfig& model_cfg,
                     const TrainConfig& train, const FeatureExtractorSpec& fx_spec, const FitOptions& opt) {
  model_cfg.validate();
  train.validate();
  if (train.image_size != model_cfg.input_size)
    throw ValidationError("fit: train.image_size (" + std::to_string(train.image_size) + ") != model input_size (" +
                          std::to_string(model_cfg.input_size) + ")");
  manifest.validate_structure();
  if (opt.out_dir.empty()) throw ValidationError("fit: out_dir is required");
  fs::create_directories(opt.out_dir);

  FitResult res;
  res.split = split_scenes(manifest, train.validation_fraction, train.seed);
  SampleSource train_src(manifest, probes, res.split.train, model_cfg.input_size, model_cfg.probe_size);
  SampleSource val_src(manifest, probes, res.split.validation.empty() ? res.split.train : res.split.validation,
                       model_cfg.input_size, model_cfg.probe_size);
  const FeatureExtractor<float> fx(fx_spec);

  Checkpoint state;
  state.net = init_model<float>(model_cfg, derive_seed(train.seed, "model-init"));
  state.adam = AdamState<float>{};
  state.adam->init(state.net.params);
  state.scheduler = make_plateau(train);
  Rng rng(derive_seed(train.seed, "sampling"));
  state.progress = TrainProgress{};
  state.train_config = train;

  const auto log_path = metrics_path(opt.out_dir);
  if (opt.resume && fs::exists(last_checkpoint_path(opt.out_dir))) {
    auto loaded = checkpoint_load(last_checkpoint_path(opt.out_dir));
    if (!(loaded.net.config == model_cfg)) throw ValidationError("fit: checkpoint model config differs from the requested one");
    if (!loaded.adam || !loaded.scheduler || !loaded.progress)
      throw FormatError("fit: checkpoint lacks optimizer/scheduler/progress state needed to resume");
    state = std::move(loaded);
    state.train_config = train;
    restore_rng_state(rng, state.progress->rng);
    for (auto& rec : read_metrics(log_path))
      if (rec.at("step").get<long long>() < state.progress->global_step) res.log.push_back(std::move(rec));
  }
  {
    std::ofstream out(log_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + log_path.string());
    for (const auto& r : res.log) out << r.dump() << '\n';
  }
  std::ofstream log(log_path, std::ios::app);

  auto& prog = *state.progress;
  auto& sched = *state.scheduler;
  const auto save_last = [&] {
    prog.rng = rng_state(rng);
    checkpoint_save(last_checkpoint_path(opt.out_dir), state);
  };
  const int steps = train.steps_per_epoch();

  while (prog.epoch < train.epochs) {
    for (; prog.step_in_epoch < steps; ++prog.step_in_epoch) {
      if (opt.stop_after_steps >= 0 && prog.global_step >= opt.stop_after_steps) {
        save_last();
        res.interrupted = true;
        res.best_val = prog.best_val;
        res.net = state.net;
        return res;
      }
      std::vector<TrainingSample> batch;
      for (int b = 0; b < train.batch_size; ++b) batch.push_back(train_src.sample(rng));
      const double lr = sched.lr;
      const auto loss = train_step(state.net, batch, *state.adam, fx, lr);
      nlohmann::json rec = {{"epoch", prog.epoch},     {"step", prog.global_step},         {"probe", loss.probe},
                            {"image_l1", loss.image_l1}, {"perceptual", loss.perceptual}, {"total", loss.total},
                            {"lr", lr},                 {"val_total", nullptr}};
      ++prog.global_step;
      if (prog.step_in_epoch == steps - 1) {
        const double val = validation_loss(state.net, val_src, fx);
        rec["val_total"] = val;
        plateau_step(sched, val, train);
        if (val < prog.best_val) {
          prog.best_val = val;
          Checkpoint best;
          best.net = state.net;
          best.val_total = val;
          best.train_config = train;
          checkpoint_save(best_checkpoint_path(opt.out_dir), best);
        }
      }
      log << rec.dump() << '\n';
      log.flush();
      if (opt.on_record) opt.on_record(rec);
      res.log.push_back(std::move(rec));
    }
    ++prog.epoch;
    prog.step_in_epoch = 0;
    save_last();
  }
  if (train.epochs == 0) save_last();
  res.best_val = prog.best_val;
  res.net = state.net;
  return res;
}

}  // namespace relight
