#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/image.hpp"
#include "relight/tensor.hpp"

namespace relight {

namespace fs = std::filesystem;

/// Declarative dataset index. Paths are stored relative to `base_dir`, the
/// directory holding manifest.json.
struct DatasetManifest {
  struct Meta {
    int image_size = 0;
    int probe_size = 0;
    long long seed = 0;
    bool operator==(const Meta&) const = default;
  };

  fs::path base_dir;
  Meta meta;
  std::map<std::string, std::map<int, std::string>> scenes;  // scene id -> illumination id -> image
  std::map<int, std::string> probes;                          // illumination id -> probe
  std::map<std::string, std::map<int, std::string>> scene_probes;  // optional per-scene probes

  fs::path resolve(const std::string& rel) const { return base_dir / rel; }

  std::vector<std::string> scene_ids() const {
    std::vector<std::string> ids;
    for (const auto& [k, _] : scenes) ids.push_back(k);
    return ids;
  }

  std::vector<int> illumination_ids() const {
    std::set<int> ids;
    for (const auto& [_, m] : scenes)
      for (const auto& [id, __] : m) ids.insert(id);
    return {ids.begin(), ids.end()};
  }

  /// Every scene covers the same illumination set.
  void validate_structure() const {
    if (scenes.empty()) throw ValidationError("manifest: no scenes");
    const auto ids = illumination_ids();
    for (const auto& [sid, m] : scenes)
      if (m.size() != ids.size())
        throw ValidationError("manifest: scene '" + sid + "' does not cover every illumination id");
  }

  /// Every referenced file exists; the error lists all missing entries.
  void validate_paths() const {
    std::string missing;
    auto check = [&](const std::string& what, const std::string& rel) {
      if (!fs::exists(resolve(rel))) missing += "\n  " + what + ": " + rel;
    };
    for (const auto& [sid, m] : scenes)
      for (const auto& [id, rel] : m) check("image (" + sid + ", " + std::to_string(id) + ")", rel);
    for (const auto& [id, rel] : probes) check("probe " + std::to_string(id), rel);
    for (const auto& [sid, m] : scene_probes)
      for (const auto& [id, rel] : m) check("probe (" + sid + ", " + std::to_string(id) + ")", rel);
    if (!missing.empty()) throw IoError("manifest references missing files:" + missing);
  }

  bool operator==(const DatasetManifest& o) const {
    return meta == o.meta && scenes == o.scenes && probes == o.probes && scene_probes == o.scene_probes;
  }
};

namespace detail {
inline nlohmann::json id_map_to_json(const std::map<int, std::string>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, p] : m) j[std::to_string(id)] = p;
  return j;
}
inline std::map<int, std::string> id_map_from_json(const nlohmann::json& j) {
  std::map<int, std::string> m;
  for (const auto& [k, v] : j.items()) {
    std::size_t pos = 0;
    int id = 0;
    try {
      id = std::stoi(k, &pos);
    } catch (const std::logic_error&) {
      pos = std::string::npos;
    }
    if (pos != k.size()) throw ValidationError("manifest: illumination id must be an integer, got '" + k + "'");
    m[id] = v.get<std::string>();
  }
  return m;
}
}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = 1;
  j["meta"] = {{"image_size", m.meta.image_size}, {"probe_size", m.meta.probe_size}, {"seed", m.meta.seed}};
  j["scenes"] = nlohmann::json::object();
  for (const auto& [sid, mm] : m.scenes) j["scenes"][sid] = detail::id_map_to_json(mm);
  j["probes"] = detail::id_map_to_json(m.probes);
  if (!m.scene_probes.empty()) {
    j["scene_probes"] = nlohmann::json::object();
    for (const auto& [sid, mm] : m.scene_probes) j["scene_probes"][sid] = detail::id_map_to_json(mm);
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, fs::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  try {
    if (j.value("version", 1) != 1) throw ValidationError("manifest: unsupported version");
    const auto& meta = j.at("meta");
    m.meta.image_size = meta.value("image_size", 0);
    m.meta.probe_size = meta.value("probe_size", 0);
    m.meta.seed = meta.value("seed", 0LL);
    for (const auto& [sid, mm] : j.at("scenes").items()) m.scenes[sid] = detail::id_map_from_json(mm);
    m.probes = detail::id_map_from_json(j.at("probes"));
    if (j.contains("scene_probes"))
      for (const auto& [sid, mm] : j.at("scene_probes").items()) m.scene_probes[sid] = detail::id_map_from_json(mm);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: malformed json: ") + e.what());
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const std::string text = manifest_to_json(m).dump(2) + "\n";
  write_file_bytes(path, text.data(), text.size());
}

inline DatasetManifest load_manifest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  m.validate_structure();
  return m;
}

}  // namespace relight
