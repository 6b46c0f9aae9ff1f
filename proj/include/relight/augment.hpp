#pragma once

// Offline relit-variant generation and per-access variant selection.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/image.hpp"
#include "relight/model.hpp"
#include "relight/probe.hpp"
#include "relight/random.hpp"

namespace relight {

/// Image id -> variant paths (relative to base_dir), original at index 0.
struct VariantPool {
  fs::path base_dir;
  std::map<std::string, std::vector<std::string>> entries;

  bool operator==(const VariantPool& o) const { return entries == o.entries; }

  const std::vector<std::string>& variants(const std::string& id) const {
    auto it = entries.find(id);
    if (it == entries.end()) throw ValidationError("variant pool has no image '" + id + "'");
    return it->second;
  }
  fs::path resolve(const std::string& rel) const { return base_dir / rel; }

  void validate(bool check_files = true) const {
    std::string missing;
    for (const auto& [id, list] : entries) {
      if (list.empty()) throw ValidationError("variant pool: empty list for '" + id + "'");
      if (check_files)
        for (const auto& p : list)
          if (!fs::exists(resolve(p))) missing += "\n  " + id + ": " + p;
    }
    if (!missing.empty()) throw ValidationError("variant pool references missing files:" + missing);
  }
};

inline nlohmann::json pool_to_json(const VariantPool& p) {
  nlohmann::json images = nlohmann::json::object();
  for (const auto& [id, list] : p.entries) images[id] = list;
  return {{"version", 1}, {"images", images}};
}

inline VariantPool pool_from_json(const nlohmann::json& j, fs::path base_dir) {
  if (j.value("version", 0) != 1) throw FormatError("pool index: unsupported version");
  VariantPool p;
  p.base_dir = std::move(base_dir);
  try {
    for (const auto& [id, list] : j.at("images").items()) p.entries[id] = list.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pool index: ") + e.what());
  }
  return p;
}

inline void save_pool(const VariantPool& p, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << pool_to_json(p).dump(2) << '\n';
}

inline VariantPool load_pool(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return pool_from_json(j, path.parent_path());
}

inline std::string variant_filename(const std::string& stem, int k) { return stem + "__v" + std::to_string(k) + ".png"; }

struct AugmentOptions {
  bool overwrite = false;
};

struct AugmentReport {
  VariantPool pool;
  std::vector<std::pair<std::string, std::string>> failures;  // image file, reason
  std::size_t variants_written = 0;
};

/// PNG files directly inside `dir`, sorted by name. Files that look like
/// generated variants are skipped.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext != ".png" || e.path().stem().string().find("__v") != std::string::npos) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Relights one image with every probe; images whose size differs from the
/// model input are resized in and the result resized back.
template <class T>
std::vector<Image> relight_variants(const NetworkState<T>& net, const Image& image, const ProbeSet& probes) {
  const int S = net.config.input_size, P = net.config.probe_size;
  const bool resize = image.height != S || image.width != S;
  const Image in = resize ? resize_bilinear(image, S, S) : image;
  std::vector<Image> out;
  for (const auto& p : probes.probes) {
    LightProbe g = p;
    if (g.size() != P) g.pixels = resize_bilinear(g.pixels, P, P);
    Image r = relight_forward(net, in, g).relit;
    out.push_back(resize ? resize_bilinear(r, image.height, image.width) : std::move(r));
  }
  return out;
}

/// Writes <stem>__v<k>.png for k = 1..|probes| and out_dir/pool.json.
/// Per-image failures are collected and the run continues.
template <class T>
AugmentReport relight_dataset(const NetworkState<T>& net, const fs::path& images_dir, const ProbeSet& probes,
                              const fs::path& out_dir, const AugmentOptions& opt = {}) {
  if (probes.probes.empty()) throw ValidationError("relight_dataset: probe set is empty");
  const auto files = list_images(images_dir);
  const auto pool_path = out_dir / "pool.json";
  if (fs::exists(pool_path) && !opt.overwrite)
    throw IoError(pool_path.string() + " already exists; pass overwrite to replace it");
  fs::create_directories(out_dir);

  AugmentReport rep;
  rep.pool.base_dir = out_dir;
  const auto base = fs::weakly_canonical(out_dir);
  for (const auto& file : files) {
    const std::string stem = file.stem().string();
    try {
      const Image im = load_png(file);
      const auto variants = relight_variants(net, im, probes);
      std::vector<std::string> list{fs::weakly_canonical(file).lexically_relative(base).generic_string()};
      for (std::size_t k = 0; k < variants.size(); ++k) {
        const auto name = variant_filename(stem, static_cast<int>(k + 1));
        save_png(variants[k], out_dir / name);
        list.push_back(name);
        ++rep.variants_written;
      }
      rep.pool.entries[stem] = std::move(list);
    } catch (const std::exception& e) {
      rep.failures.emplace_back(file.string(), e.what());
    }
  }
  save_pool(rep.pool, pool_path);
  return rep;
}

/// Uniform over the image's variant list (original included).
inline fs::path select_variant(const VariantPool& pool, const std::string& image_id, Rng& rng) {
  const auto& list = pool.variants(image_id);
  return pool.resolve(list[uniform_index(rng, list.size())]);
}

/// One selected variant per original, in dataset order. The swap happens
/// before any downstream augmentation.
inline std::vector<fs::path> wrap_epoch(const VariantPool& pool, const std::vector<std::string>& order, Rng& rng) {
  std::vector<fs::path> out;
  out.reserve(order.size());
  for (const auto& id : order) out.push_back(select_variant(pool, id, rng));
  return out;
}

/// Generator for epoch `epoch` of a seeded augmentation stream.
inline Rng epoch_rng(std::uint64_t global_seed, std::uint64_t epoch) { return Rng(derive_seed(global_seed, epoch)); }

}  // namespace relight
