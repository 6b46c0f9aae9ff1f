#pragma once

// Procedural Lambertian toy scenes with exact ground-truth relighting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "relight/image.hpp"
#include "relight/manifest.hpp"
#include "relight/probe.hpp"
#include "relight/random.hpp"

namespace relight {

struct SceneGeometry {
  int size = 0;
  Image albedo;                // in [0.2, 0.9]
  std::vector<double> normals; // H*W*3, unit length, z > 0
  long long seed = 0;

  std::array<double, 3> normal(int y, int x) const {
    const std::size_t i = (static_cast<std::size_t>(y) * size + x) * 3;
    return {normals[i], normals[i + 1], normals[i + 2]};
  }
};

inline constexpr double kAlbedoMin = 0.2;
inline constexpr double kAlbedoMax = 0.9;

/// Deterministic in (seed, size). Albedo is a sum of smooth colored blobs
/// rescaled into [0.2, 0.9]. Normals come from a height field made of a
/// convex dome plus random Gaussian bumps, n = normalize(-dh/dx, -dh/dy, 1).
inline SceneGeometry generate_scene(long long seed, int size) {
  if (size < 16) throw ValidationError("generate_scene: size must be >= 16");
  Rng rng(derive_seed(static_cast<std::uint64_t>(seed), "scene"));
  SceneGeometry g;
  g.size = size;
  g.seed = seed;

  // Albedo blobs in pixel coordinates.
  struct Blob {
    double cx, cy, sigma;
    std::array<double, 3> color;
  };
  std::array<double, 3> base{};
  for (double& b : base) b = uniform01(rng);
  std::vector<Blob> blobs(10);
  for (auto& b : blobs) {
    b.cx = uniform(rng, 0.0, size);
    b.cy = uniform(rng, 0.0, size);
    b.sigma = uniform(rng, 0.05, 0.2) * size;
    for (double& c : b.color) c = uniform(rng, -1.0, 1.0);
  }
  g.albedo = Image(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      std::array<double, 3> v = base;
      for (const auto& b : blobs) {
        const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
        const double w = std::exp(-d2 / (2.0 * b.sigma * b.sigma));
        for (int c = 0; c < 3; ++c) v[c] += w * b.color[c];
      }
      for (int c = 0; c < 3; ++c) g.albedo.at(y, x, c) = v[c];
    }
  const auto [lo_it, hi_it] = std::minmax_element(g.albedo.data.begin(), g.albedo.data.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  for (double& v : g.albedo.data) {
    const double t = span > 0.0 ? (v - lo) / span : 0.5;
    v = std::clamp(kAlbedoMin + (kAlbedoMax - kAlbedoMin) * t, kAlbedoMin, kAlbedoMax);
  }

  // Height field in camera coordinates (x right, y up), both in [-1, 1].
  const double dome_k = uniform(rng, 0.35, 0.6);
  const double dome_cx = uniform(rng, -0.15, 0.15), dome_cy = uniform(rng, -0.15, 0.15);
  struct Bump {
    double cx, cy, sigma, amp;
  };
  std::vector<Bump> bumps(12);
  for (auto& b : bumps) {
    b.cx = uniform(rng, -1.0, 1.0);
    b.cy = uniform(rng, -1.0, 1.0);
    b.sigma = uniform(rng, 0.06, 0.2);
    b.amp = uniform(rng, -0.05, 0.05);
  }
  g.normals.resize(static_cast<std::size_t>(size) * size * 3);
  const double half = (size - 1) / 2.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = (x - half) / half, v = (half - y) / half;
      double hx = -2.0 * dome_k * (u - dome_cx), hy = -2.0 * dome_k * (v - dome_cy);
      for (const auto& b : bumps) {
        const double du = u - b.cx, dv = v - b.cy;
        const double e = b.amp * std::exp(-(du * du + dv * dv) / (2.0 * b.sigma * b.sigma));
        hx += -e * du / (b.sigma * b.sigma);
        hy += -e * dv / (b.sigma * b.sigma);
      }
      const double inv = 1.0 / std::sqrt(hx * hx + hy * hy + 1.0);
      const std::size_t i = (static_cast<std::size_t>(y) * size + x) * 3;
      g.normals[i] = -hx * inv;
      g.normals[i + 1] = -hy * inv;
      g.normals[i + 2] = inv;
    }
  return g;
}

/// Horizontal mirror: albedo columns reversed, normal x component negated.
inline SceneGeometry mirror_scene(const SceneGeometry& g) {
  SceneGeometry m = g;
  m.albedo = flip_horizontal(g.albedo);
  for (int y = 0; y < g.size; ++y)
    for (int x = 0; x < g.size; ++x) {
      const auto n = g.normal(y, g.size - 1 - x);
      const std::size_t i = (static_cast<std::size_t>(y) * g.size + x) * 3;
      m.normals[i] = -n[0];
      m.normals[i + 1] = n[1];
      m.normals[i + 2] = n[2];
    }
  return m;
}

/// clamp(albedo * (ambient + intensity * max(0, n.L)), 0, 1). Specular and
/// background terms of a ProbeSpec do not apply to scenes.
inline Image shade_scene(const SceneGeometry& g, const ProbeSpec& spec) {
  spec.validate();
  if (g.albedo.height != g.size || g.albedo.width != g.size || g.normals.size() != g.albedo.size())
    throw ValidationError("shade_scene: inconsistent scene geometry");
  const auto L = spec.light_direction();
  Image out(g.size, g.size);
  for (int y = 0; y < g.size; ++y)
    for (int x = 0; x < g.size; ++x) {
      const auto n = g.normal(y, x);
      const double shade = spec.ambient + spec.intensity * std::max(0.0, n[0] * L[0] + n[1] * L[1] + n[2] * L[2]);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp(g.albedo.at(y, x, c) * shade, 0.0, 1.0);
    }
  return out;
}

/// Toy illumination set: azimuths evenly spread over [-90, 90] degrees with
/// elevation 40*sin(pi*k/(n-1)), so both horizontal extremes are included at
/// zero elevation.
inline std::vector<ProbeSpec> default_light_specs(int n, int probe_size = 64, double intensity = 0.8,
                                                  double ambient = 0.1) {
  if (n < 1) throw ValidationError("default_light_specs: need at least one light");
  std::vector<ProbeSpec> specs;
  for (int k = 0; k < n; ++k) {
    ProbeSpec s;
    const double t = n == 1 ? 0.5 : static_cast<double>(k) / (n - 1);
    s.azimuth_deg = -90.0 + 180.0 * t;
    s.elevation_deg = n == 1 ? 0.0 : 40.0 * std::sin(M_PI * t);
    if (std::abs(s.elevation_deg) < 1e-12) s.elevation_deg = 0.0;
    s.intensity = intensity;
    s.ambient = ambient;
    s.size = probe_size;
    specs.push_back(s);
  }
  return specs;
}

inline std::string scene_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03d", k);
  return buf;
}

struct ToyDatasetOptions {
  int n_scenes = 32;
  int image_size = 128;
  long long seed = 7;
  /// Also emit per-scene probes (shared spec with scene-dependent intensity
  /// jitter) so scene-agnostic averaging has something to average.
  bool scene_probes = false;
};

/// Writes images/<scene>/light_<id>.png, probes/probe_<id>.png (+ sidecars)
/// and manifest.json. Scene k uses seed + k.
inline DatasetManifest build_toy_dataset(const std::vector<ProbeSpec>& specs, const ToyDatasetOptions& opt,
                                         const fs::path& out_dir) {
  if (opt.n_scenes < 1) throw ValidationError("build_toy_dataset: n_scenes must be >= 1");
  if (specs.empty()) throw ValidationError("build_toy_dataset: specs must be non-empty");
  for (const auto& s : specs) s.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "probes", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "probes").string() + ": " + ec.message());

  DatasetManifest m;
  m.base_dir = out_dir;
  m.meta = {opt.image_size, specs.front().size, opt.seed};
  for (int id = 0; id < static_cast<int>(specs.size()); ++id) {
    auto p = render_probe(specs[id]);
    p.illumination_id = id;
    const std::string rel = "probes/" + probe_filename(id);
    save_probe(p, out_dir / rel);
    m.probes[id] = rel;
  }
  for (int k = 0; k < opt.n_scenes; ++k) {
    const std::string sid = scene_name(k);
    const auto geom = generate_scene(opt.seed + k, opt.image_size);
    fs::create_directories(out_dir / "images" / sid);
    for (int id = 0; id < static_cast<int>(specs.size()); ++id) {
      const std::string rel = "images/" + sid + "/light_" + std::to_string(id) + ".png";
      save_png(shade_scene(geom, specs[id]), out_dir / rel);
      m.scenes[sid][id] = rel;
    }
    if (opt.scene_probes) {
      fs::create_directories(out_dir / "scene_probes" / sid);
      Rng rng(derive_seed(static_cast<std::uint64_t>(opt.seed + k), "scene-probe"));
      for (int id = 0; id < static_cast<int>(specs.size()); ++id) {
        ProbeSpec s = specs[id];
        s.intensity *= uniform(rng, 0.9, 1.1);
        s.ambient = std::clamp(s.ambient * uniform(rng, 0.8, 1.2), 0.0, 1.0);
        auto p = render_probe(s);
        p.illumination_id = id;
        const std::string rel = "scene_probes/" + sid + "/" + probe_filename(id);
        save_probe(p, out_dir / rel);
        m.scene_probes[sid][id] = rel;
      }
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace relight
