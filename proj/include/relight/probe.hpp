#pragma once

// Light probes: closed-form shaded-sphere rendering, per-illumination
// averaging, and PNG + JSON sidecar persistence.
//
// Light direction convention (camera coordinates, y up, z toward viewer):
//   L = (cos(el) sin(az), sin(el), cos(el) cos(az))
// azimuth 0 points at the viewer, positive azimuth toward image right,
// positive elevation from above.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/image.hpp"
#include "relight/manifest.hpp"

namespace relight {

struct ProbeSpec {
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  double intensity = 1.0;
  double ambient = 0.1;
  double specular_strength = 0.0;
  double specular_exponent = 32.0;
  int size = 64;
  double background = 0.02;

  bool operator==(const ProbeSpec&) const = default;

  void validate() const {
    auto finite = [](double v, const char* name) {
      if (!std::isfinite(v)) throw ValidationError(std::string("ProbeSpec.") + name + " must be finite");
    };
    finite(azimuth_deg, "azimuth_deg");
    finite(elevation_deg, "elevation_deg");
    finite(intensity, "intensity");
    finite(ambient, "ambient");
    finite(specular_strength, "specular_strength");
    finite(specular_exponent, "specular_exponent");
    finite(background, "background");
    if (azimuth_deg < -180.0 || azimuth_deg >= 180.0) throw ValidationError("ProbeSpec.azimuth_deg must lie in [-180, 180)");
    if (elevation_deg < -90.0 || elevation_deg > 90.0) throw ValidationError("ProbeSpec.elevation_deg must lie in [-90, 90]");
    if (intensity < 0.0) throw ValidationError("ProbeSpec.intensity must be >= 0");
    if (ambient < 0.0 || ambient > 1.0) throw ValidationError("ProbeSpec.ambient must lie in [0, 1]");
    if (specular_strength < 0.0) throw ValidationError("ProbeSpec.specular_strength must be >= 0");
    if (specular_exponent <= 0.0) throw ValidationError("ProbeSpec.specular_exponent must be > 0");
    if (size < 8) throw ValidationError("ProbeSpec.size must be >= 8");
    if (background < 0.0 || background > 1.0) throw ValidationError("ProbeSpec.background must lie in [0, 1]");
  }

  /// Unit light direction in camera coordinates.
  std::array<double, 3> light_direction() const {
    const double az = azimuth_deg * M_PI / 180.0, el = elevation_deg * M_PI / 180.0;
    return {std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
  }
};

inline void to_json(nlohmann::json& j, const ProbeSpec& s) {
  j = {{"azimuth_deg", s.azimuth_deg},     {"elevation_deg", s.elevation_deg},
       {"intensity", s.intensity},         {"ambient", s.ambient},
       {"specular_strength", s.specular_strength}, {"specular_exponent", s.specular_exponent},
       {"size", s.size},                   {"background", s.background}};
}

inline void from_json(const nlohmann::json& j, ProbeSpec& s) {
  ProbeSpec d;
  s.azimuth_deg = j.value("azimuth_deg", d.azimuth_deg);
  s.elevation_deg = j.value("elevation_deg", d.elevation_deg);
  s.intensity = j.value("intensity", d.intensity);
  s.ambient = j.value("ambient", d.ambient);
  s.specular_strength = j.value("specular_strength", d.specular_strength);
  s.specular_exponent = j.value("specular_exponent", d.specular_exponent);
  s.size = j.value("size", d.size);
  s.background = j.value("background", d.background);
}

struct LightProbe {
  Image pixels;
  std::optional<ProbeSpec> spec;
  std::optional<int> illumination_id;

  int size() const { return pixels.height; }

  void validate() const {
    if (pixels.height != pixels.width || pixels.height == 0) throw ValidationError("LightProbe must be square and non-empty");
    if (!pixels.in_unit_range()) throw ValidationError("LightProbe values must be finite and within [0, 1]");
    if (illumination_id && *illumination_id < 0) throw ValidationError("LightProbe.illumination_id must be >= 0");
  }
};

struct ProbeSet {
  std::string name;
  std::vector<LightProbe> probes;

  void validate() const {
    std::set<int> ids;
    for (const auto& p : probes) {
      if (p.size() != probes.front().size()) throw ValidationError("ProbeSet: probes differ in size");
      if (p.illumination_id && !ids.insert(*p.illumination_id).second)
        throw ValidationError("ProbeSet: duplicate illumination id " + std::to_string(*p.illumination_id));
    }
  }

  const LightProbe& by_id(int id) const {
    for (const auto& p : probes)
      if (p.illumination_id == id) return p;
    throw ValidationError("ProbeSet '" + name + "' has no probe for illumination id " + std::to_string(id));
  }
};

/// Shaded sphere on a flat background. Channel-equal.
inline LightProbe render_probe(const ProbeSpec& spec) {
  spec.validate();
  const int S = spec.size;
  const double c = (S - 1) / 2.0, r = 0.45 * S;
  const auto L = spec.light_direction();
  std::array<double, 3> Hv{L[0], L[1], L[2] + 1.0};
  const double hn = std::sqrt(Hv[0] * Hv[0] + Hv[1] * Hv[1] + Hv[2] * Hv[2]);
  // L = -view leaves the half vector undefined; the specular term is then 0.
  const bool has_half = hn > 0.0;
  if (has_half)
    for (double& h : Hv) h /= hn;

  LightProbe probe;
  probe.spec = spec;
  probe.pixels = Image(S, S);
  for (int v = 0; v < S; ++v)
    for (int u = 0; u < S; ++u) {
      const double x = (u - c) / r, y = (c - v) / r;
      const double rr = x * x + y * y;
      double value = spec.background;
      if (rr <= 1.0) {
        const double z = std::sqrt(1.0 - rr);
        const double ndl = x * L[0] + y * L[1] + z * L[2];
        value = spec.ambient + spec.intensity * std::max(0.0, ndl);
        if (spec.specular_strength > 0.0 && has_half) {
          const double ndh = x * Hv[0] + y * Hv[1] + z * Hv[2];
          value += spec.specular_strength * std::pow(std::max(0.0, ndh), spec.specular_exponent);
        }
        value = std::clamp(value, 0.0, 1.0);
      }
      for (int ch = 0; ch < 3; ++ch) probe.pixels.at(v, u, ch) = value;
    }
  return probe;
}

/// Per-pixel arithmetic mean. Illumination id and spec survive only when
/// every input carries the same one.
inline LightProbe average_probes(const std::vector<LightProbe>& probes) {
  if (probes.empty()) throw ValidationError("average_probes: empty probe list");
  const int S = probes.front().size();
  for (const auto& p : probes)
    if (p.pixels.height != S || p.pixels.width != S)
      throw ShapeError("average_probes: size mismatch (" + std::to_string(S) + " vs " + std::to_string(p.pixels.height) + ")");
  // Shifted accumulation: duplicates average to the input bit-exactly.
  const Image& ref = probes.front().pixels;
  Image dev(S, S);
  for (const auto& p : probes)
    for (std::size_t i = 0; i < dev.size(); ++i) dev.data[i] += p.pixels.data[i] - ref.data[i];
  const double n = static_cast<double>(probes.size());
  LightProbe out;
  out.pixels = Image(S, S);
  for (std::size_t i = 0; i < dev.size(); ++i) out.pixels.data[i] = ref.data[i] + dev.data[i] / n;
  const auto& id0 = probes.front().illumination_id;
  if (id0 && std::all_of(probes.begin(), probes.end(), [&](const LightProbe& p) { return p.illumination_id == id0; }))
    out.illumination_id = id0;
  const auto& spec0 = probes.front().spec;
  if (spec0 && std::all_of(probes.begin(), probes.end(), [&](const LightProbe& p) { return p.spec == spec0; }))
    out.spec = spec0;
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& png) {
  auto p = png;
  p.replace_extension(".json");
  return p;
}

/// Writes an 8-bit PNG and a JSON sidecar with the probe spec and illumination id.
inline void save_probe(const LightProbe& probe, const std::filesystem::path& png_path) {
  save_png(probe.pixels, png_path);
  nlohmann::json j = nlohmann::json::object();
  if (probe.spec) j = *probe.spec;
  if (probe.illumination_id) j["illumination_id"] = *probe.illumination_id;
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(sidecar_path(png_path), text.data(), text.size());
}

inline LightProbe load_probe(const std::filesystem::path& png_path) {
  LightProbe probe;
  probe.pixels = load_png(png_path);
  if (probe.pixels.height != probe.pixels.width) throw IoError(png_path.string() + ": probe image is not square");
  const auto side = sidecar_path(png_path);
  if (std::filesystem::exists(side)) {
    const auto bytes = read_file_bytes(side);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(side.string() + ": " + e.what());
    }
    if (j.contains("azimuth_deg")) probe.spec = j.get<ProbeSpec>();
    if (j.contains("illumination_id")) probe.illumination_id = j.at("illumination_id").get<int>();
  }
  return probe;
}

inline std::string probe_filename(int id) { return "probe_" + std::to_string(id) + ".png"; }

/// Saves as probe_<id>.png (id = illumination id, else position).
inline void save_probe_set(const ProbeSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < set.probes.size(); ++k) {
    const auto& p = set.probes[k];
    save_probe(p, dir / probe_filename(p.illumination_id.value_or(static_cast<int>(k))));
  }
}

/// Loads every probe_<id>.png in a directory, ordered by id.
inline ProbeSet load_probe_set(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a probe directory: " + dir.string());
  static const std::regex pat(R"(probe_(\d+)\.png)");
  std::map<int, std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pat)) files[std::stoi(m[1].str())] = e.path();
  }
  if (files.empty()) throw IoError("no probe_<id>.png files in " + dir.string());
  ProbeSet set;
  set.name = dir.filename().string();
  for (const auto& [id, path] : files) {
    auto p = load_probe(path);
    if (!p.illumination_id) p.illumination_id = id;
    set.probes.push_back(std::move(p));
  }
  set.validate();
  return set;
}

/// One averaged probe per illumination id, ordered by id. Uses per-scene
/// probes when the manifest lists them, otherwise its shared probe table.
inline ProbeSet build_scene_agnostic_set(const DatasetManifest& manifest) {
  std::map<std::string, std::map<int, std::string>> table = manifest.scene_probes;
  if (table.empty()) table["shared"] = manifest.probes;
  std::set<int> ids;
  for (const auto& [_, m] : table)
    for (const auto& [id, __] : m) ids.insert(id);
  for (int id : manifest.illumination_ids()) ids.insert(id);

  std::string missing;
  for (const auto& [sid, m] : table)
    for (int id : ids) {
      auto it = m.find(id);
      if (it == m.end())
        missing += "\n  (" + sid + ", " + std::to_string(id) + "): no entry";
      else if (!std::filesystem::exists(manifest.resolve(it->second)))
        missing += "\n  (" + sid + ", " + std::to_string(id) + "): " + manifest.resolve(it->second).string();
    }
  if (!missing.empty()) throw IoError("missing probe files:" + missing);

  ProbeSet set;
  set.name = "scene-agnostic";
  for (int id : ids) {
    std::vector<LightProbe> group;
    for (const auto& [_, m] : table) {
      auto p = load_probe(manifest.resolve(m.at(id)));
      p.illumination_id = id;
      group.push_back(std::move(p));
    }
    auto avg = average_probes(group);
    avg.illumination_id = id;
    set.probes.push_back(std::move(avg));
  }
  set.validate();
  return set;
}

}  // namespace relight
