#pragma once

// Matching metrics (MMA, homography score, precision/recall), a synthetic
// warped-pair generator and a baseline corner detector + descriptor.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/archive.hpp"
#include "relight/image.hpp"
#include "relight/random.hpp"

namespace relight {

namespace fs = std::filesystem;

struct Keypoint {
  double x = 0, y = 0, score = 0;
  bool operator==(const Keypoint&) const = default;
};

using Descriptors = std::vector<std::vector<double>>;

struct Match {
  int i1 = 0, i2 = 0;
  double dist = 0;
  bool operator==(const Match&) const = default;
};

struct MatchSet {
  std::vector<Match> pairs;
  std::size_t size() const { return pairs.size(); }
};

/// Row-major 3x3 homography with h33 = 1.
class Homography {
 public:
  Homography() : h_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

  explicit Homography(const std::array<double, 9>& h) {
    for (double v : h)
      if (!std::isfinite(v)) throw ValidationError("Homography: entries must be finite");
    if (std::abs(h[8]) < 1e-15) throw ValidationError("Homography: h33 is zero and cannot be normalized to 1");
    for (int i = 0; i < 9; ++i) h_[i] = h[i] / h[8];
    h_[8] = 1.0;
    if (std::abs(det()) <= 1e-12) throw ValidationError("Homography: matrix is singular (|det| <= 1e-12)");
  }

  static Homography translation(double dx, double dy) { return Homography({1, 0, dx, 0, 1, dy, 0, 0, 1}); }

  double operator()(int r, int c) const { return h_[r * 3 + c]; }
  const std::array<double, 9>& data() const { return h_; }

  double det() const {
    const auto& a = h_;
    return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6]);
  }

  Homography inverse() const {
    const auto& a = h_;
    const double d = det();
    std::array<double, 9> inv{(a[4] * a[8] - a[5] * a[7]) / d, (a[2] * a[7] - a[1] * a[8]) / d, (a[1] * a[5] - a[2] * a[4]) / d,
                              (a[5] * a[6] - a[3] * a[8]) / d, (a[0] * a[8] - a[2] * a[6]) / d, (a[2] * a[3] - a[0] * a[5]) / d,
                              (a[3] * a[7] - a[4] * a[6]) / d, (a[1] * a[6] - a[0] * a[7]) / d, (a[0] * a[4] - a[1] * a[3]) / d};
    return Homography(inv);
  }

  Homography operator*(const Homography& o) const {
    std::array<double, 9> r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i * 3 + j] += h_[i * 3 + k] * o.h_[k * 3 + j];
    return Homography(r);
  }

 private:
  std::array<double, 9> h_;
};

inline constexpr double kProjectEps = 1e-12;

/// Homogeneous transform with perspective divide; nullopt when w ~ 0.
inline std::optional<std::array<double, 2>> project(const Homography& H, double x, double y) {
  const double w = H(2, 0) * x + H(2, 1) * y + H(2, 2);
  if (std::abs(w) < kProjectEps) return std::nullopt;
  return std::array<double, 2>{(H(0, 0) * x + H(0, 1) * y + H(0, 2)) / w, (H(1, 0) * x + H(1, 1) * y + H(1, 2)) / w};
}

struct EvalConfig {
  double pixel_threshold = 3.0;
  double corner_eps = 3.0;
  int image_width = 0, image_height = 0;

  void validate() const {
    if (!(pixel_threshold > 0.0)) throw ValidationError("EvalConfig: pixel_threshold must be > 0");
    if (!(corner_eps > 0.0)) throw ValidationError("EvalConfig: corner_eps must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Matching and metric kernels
// ---------------------------------------------------------------------------

inline double descriptor_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

/// Mutual nearest neighbours under Euclidean distance; ties go to the lower
/// index. Output is ordered by the index into desc1.
inline MatchSet mutual_nn_matches(const Descriptors& d1, const Descriptors& d2) {
  MatchSet m;
  if (d1.empty() || d2.empty()) return m;
  const std::size_t dim = d1.front().size();
  for (const auto& d : d1)
    if (d.size() != dim) throw ShapeError("mutual_nn_matches: descriptor dimensions differ");
  for (const auto& d : d2)
    if (d.size() != dim) throw ShapeError("mutual_nn_matches: descriptor dimensions differ");
  std::vector<double> dist(d1.size() * d2.size());
  for (std::size_t a = 0; a < d1.size(); ++a)
    for (std::size_t b = 0; b < d2.size(); ++b) dist[a * d2.size() + b] = descriptor_distance(d1[a], d2[b]);
  std::vector<std::size_t> nn1(d1.size(), 0), nn2(d2.size(), 0);
  for (std::size_t a = 0; a < d1.size(); ++a)
    for (std::size_t b = 1; b < d2.size(); ++b)
      if (dist[a * d2.size() + b] < dist[a * d2.size() + nn1[a]]) nn1[a] = b;
  for (std::size_t b = 0; b < d2.size(); ++b)
    for (std::size_t a = 1; a < d1.size(); ++a)
      if (dist[a * d2.size() + b] < dist[nn2[b] * d2.size() + b]) nn2[b] = a;
  for (std::size_t a = 0; a < d1.size(); ++a)
    if (nn2[nn1[a]] == a) m.pairs.push_back({static_cast<int>(a), static_cast<int>(nn1[a]), dist[a * d2.size() + nn1[a]]});
  return m;
}

struct CorrectMask {
  std::vector<bool> correct;
  std::vector<std::size_t> at_infinity;  // matches whose point projected to infinity

  std::size_t count() const { return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true)); }
};

inline void check_match_indices(const MatchSet& m, std::size_t n1, std::size_t n2) {
  for (const auto& p : m.pairs)
    if (p.i1 < 0 || p.i2 < 0 || static_cast<std::size_t>(p.i1) >= n1 || static_cast<std::size_t>(p.i2) >= n2)
      throw ValidationError("match (" + std::to_string(p.i1) + ", " + std::to_string(p.i2) + ") is out of range");
}

/// correct iff ||project(H, p1) - p2|| <= t.
inline CorrectMask correct_mask(const MatchSet& m, const std::vector<Keypoint>& k1, const std::vector<Keypoint>& k2,
                                const Homography& H, double t) {
  check_match_indices(m, k1.size(), k2.size());
  CorrectMask r;
  r.correct.reserve(m.size());
  for (std::size_t n = 0; n < m.size(); ++n) {
    const auto& a = k1[static_cast<std::size_t>(m.pairs[n].i1)];
    const auto& b = k2[static_cast<std::size_t>(m.pairs[n].i2)];
    const auto q = project(H, a.x, a.y);
    if (!q) {
      r.correct.push_back(false);
      r.at_infinity.push_back(n);
      continue;
    }
    const double dx = (*q)[0] - b.x, dy = (*q)[1] - b.y;
    r.correct.push_back(std::sqrt(dx * dx + dy * dy) <= t);
  }
  return r;
}

struct PairData {
  std::string name;
  std::vector<Keypoint> kpts1, kpts2;
  MatchSet matches;
  Homography H;
};

/// Fraction of correct matches; 0 for a pair without matches.
inline double match_accuracy(const PairData& p, double t) {
  if (p.matches.size() == 0) return 0.0;
  return static_cast<double>(correct_mask(p.matches, p.kpts1, p.kpts2, p.H, t).count()) / static_cast<double>(p.matches.size());
}

/// Mean over pairs of the per-pair accuracy, for each threshold.
inline std::vector<double> mma(const std::vector<PairData>& pairs, const std::vector<double>& thresholds) {
  if (pairs.empty()) throw ValidationError("mma: no image pairs");
  std::vector<double> curve;
  for (double t : thresholds) {
    if (!(t > 0.0)) throw ValidationError("mma: thresholds must be > 0");
    double s = 0;
    for (const auto& p : pairs) s += match_accuracy(p, t);
    curve.push_back(s / static_cast<double>(pairs.size()));
  }
  return curve;
}

struct HomographyScore {
  double mean_corner_error = 0;
  bool correct = false;
};

inline std::array<std::array<double, 2>, 4> image_corners(int width, int height) {
  const double w = width - 1.0, h = height - 1.0;
  return {{{0.0, 0.0}, {w, 0.0}, {0.0, h}, {w, h}}};
}

/// Mean distance between the four image corners warped by H_true and H_est.
inline HomographyScore homography_score(const Homography& H_true, const Homography& H_est, int width, int height, double eps) {
  if (width <= 0 || height <= 0) throw ValidationError("homography_score: image size must be positive");
  if (!(eps > 0.0)) throw ValidationError("homography_score: eps must be > 0");
  double sum = 0;
  for (const auto& c : image_corners(width, height)) {
    const auto a = project(H_true, c[0], c[1]);
    const auto b = project(H_est, c[0], c[1]);
    if (!a || !b) throw ValidationError("homography_score: a corner maps to infinity (degenerate homography)");
    sum += std::hypot((*a)[0] - (*b)[0], (*a)[1] - (*b)[1]);
  }
  HomographyScore s;
  s.mean_corner_error = sum / 4.0;
  s.correct = s.mean_corner_error <= eps;
  return s;
}

inline double homography_accuracy(const std::vector<HomographyScore>& scores) {
  if (scores.empty()) throw ValidationError("homography_accuracy: no scores");
  std::size_t n = 0;
  for (const auto& s : scores) n += s.correct ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(scores.size());
}

using CorrespondenceSet = std::set<std::pair<int, int>>;

/// Ground-truth correspondences: position-space mutual nearest neighbours of
/// H(kpts1) and kpts2 within t pixels. Ties go to the lower index.
inline CorrespondenceSet true_matches(const std::vector<Keypoint>& k1, const std::vector<Keypoint>& k2, const Homography& H,
                                      double t) {
  CorrespondenceSet out;
  if (k1.empty() || k2.empty()) return out;
  std::vector<std::optional<std::array<double, 2>>> proj;
  for (const auto& k : k1) proj.push_back(project(H, k.x, k.y));
  const auto d = [&](std::size_t a, std::size_t b) {
    if (!proj[a]) return std::numeric_limits<double>::infinity();
    const double dx = (*proj[a])[0] - k2[b].x, dy = (*proj[a])[1] - k2[b].y;
    return std::sqrt(dx * dx + dy * dy);
  };
  std::vector<std::size_t> nn1(k1.size(), 0), nn2(k2.size(), 0);
  for (std::size_t a = 0; a < k1.size(); ++a)
    for (std::size_t b = 1; b < k2.size(); ++b)
      if (d(a, b) < d(a, nn1[a])) nn1[a] = b;
  for (std::size_t b = 0; b < k2.size(); ++b)
    for (std::size_t a = 1; a < k1.size(); ++a)
      if (d(a, b) < d(nn2[b], b)) nn2[b] = a;
  for (std::size_t a = 0; a < k1.size(); ++a)
    if (nn2[nn1[a]] == a && d(a, nn1[a]) <= t) out.emplace(static_cast<int>(a), static_cast<int>(nn1[a]));
  return out;
}

struct PrecisionRecall {
  double precision = 0, recall = 0;
};

/// precision = #correct / #matches; recall = #(correct matches that are true
/// correspondences) / #true correspondences. Empty denominators give 0.
inline PrecisionRecall precision_recall(const MatchSet& m, const CorrectMask& mask, const CorrespondenceSet& truth) {
  if (mask.correct.size() != m.size()) throw ShapeError("precision_recall: mask length differs from match count");
  PrecisionRecall r;
  std::size_t correct = 0;
  CorrespondenceSet recalled;  // distinct, so duplicate matches cannot push recall past 1
  for (std::size_t n = 0; n < m.size(); ++n) {
    if (!mask.correct[n]) continue;
    ++correct;
    if (truth.count({m.pairs[n].i1, m.pairs[n].i2})) recalled.emplace(m.pairs[n].i1, m.pairs[n].i2);
  }
  if (m.size() > 0) r.precision = static_cast<double>(correct) / static_cast<double>(m.size());
  if (!truth.empty()) r.recall = static_cast<double>(recalled.size()) / static_cast<double>(truth.size());
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic pairs
// ---------------------------------------------------------------------------

struct PhotometricJitter {
  double brightness = 0.1;  // additive offset drawn from [-brightness, brightness]
  double contrast = 0.2;    // gain drawn from [1 - contrast, 1 + contrast]
  std::uint64_t seed = 0;
};

struct WarpResult {
  Image image;
  Homography H;
  double gain = 1.0, offset = 0.0;
  double in_frame = 1.0;  // fraction of output pixels sampled from inside the source
};

/// Bilinear sample; nullopt outside [0, W-1] x [0, H-1].
inline std::optional<std::array<double, 3>> sample_bilinear(const Image& im, double x, double y) {
  constexpr double tol = 1e-9;
  if (x < -tol || y < -tol || x > im.width - 1 + tol || y > im.height - 1 + tol) return std::nullopt;
  x = std::clamp(x, 0.0, im.width - 1.0);
  y = std::clamp(y, 0.0, im.height - 1.0);
  const int x0 = std::min(static_cast<int>(x), im.width - 1), y0 = std::min(static_cast<int>(y), im.height - 1);
  const int x1 = std::min(x0 + 1, im.width - 1), y1 = std::min(y0 + 1, im.height - 1);
  const double fx = x - x0, fy = y - y0;
  std::array<double, 3> v{};
  for (int c = 0; c < 3; ++c) {
    const double top = im.at(y0, x0, c) + fx * (im.at(y0, x1, c) - im.at(y0, x0, c));
    const double bot = im.at(y1, x0, c) + fx * (im.at(y1, x1, c) - im.at(y1, x0, c));
    v[c] = top + fy * (bot - top);
  }
  return v;
}

/// image2(p) = image(H^-1 p) with bilinear interpolation; pixels whose source
/// falls outside the frame are 0. Optional jitter: v' = clamp(gain * v + offset).
inline WarpResult warp_pair(const Image& image, const Homography& H, const std::optional<PhotometricJitter>& jitter = std::nullopt) {
  const Homography inv = H.inverse();
  WarpResult r;
  r.H = H;
  r.image = Image(image.height, image.width);
  std::size_t inside = 0;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const auto src = project(inv, x, y);
      if (!src) continue;
      const auto v = sample_bilinear(image, (*src)[0], (*src)[1]);
      if (!v) continue;
      ++inside;
      for (int c = 0; c < 3; ++c) r.image.at(y, x, c) = (*v)[c];
    }
  r.in_frame = static_cast<double>(inside) / (static_cast<double>(image.height) * image.width);
  if (r.in_frame < 0.5)
    throw ValidationError("warp_pair: only " + std::to_string(100.0 * r.in_frame) + "% of pixels stay in frame (need >= 50%)");
  if (jitter) {
    Rng rng(derive_seed(jitter->seed, "photometric-jitter"));
    r.gain = uniform(rng, 1.0 - jitter->contrast, 1.0 + jitter->contrast);
    r.offset = uniform(rng, -jitter->brightness, jitter->brightness);
    for (double& v : r.image.data) v = std::clamp(r.gain * v + r.offset, 0.0, 1.0);
  }
  return r;
}

/// Random mild homography about the image centre: rotation, scale, shear,
/// translation and a small perspective term.
inline Homography random_homography(Rng& rng, int width, int height, double strength = 1.0) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  const double ang = uniform(rng, -0.2, 0.2) * strength, s = 1.0 + uniform(rng, -0.1, 0.1) * strength;
  const double sh = uniform(rng, -0.05, 0.05) * strength;
  const double tx = uniform(rng, -0.05, 0.05) * width * strength, ty = uniform(rng, -0.05, 0.05) * height * strength;
  const double px = uniform(rng, -2e-4, 2e-4) * strength, py = uniform(rng, -2e-4, 2e-4) * strength;
  const Homography to_origin = Homography::translation(-cx, -cy), back = Homography::translation(cx + tx, cy + ty);
  const Homography A({s * std::cos(ang), -s * std::sin(ang) + sh, 0, s * std::sin(ang), s * std::cos(ang), 0, px, py, 1});
  return back * A * to_origin;
}

// ---------------------------------------------------------------------------
// Baseline detector / descriptor
// ---------------------------------------------------------------------------

struct DetectionResult {
  std::vector<Keypoint> keypoints;
  Descriptors descriptors;
};

inline constexpr int kDescriptorCells = 4, kDescriptorBins = 8, kDescriptorPatch = 16;
inline constexpr int kDescriptorDim = kDescriptorCells * kDescriptorCells * kDescriptorBins;

inline std::vector<double> grayscale(const Image& im) {
  std::vector<double> g(static_cast<std::size_t>(im.height) * im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      g[static_cast<std::size_t>(y) * im.width + x] = (im.at(y, x, 0) + im.at(y, x, 1) + im.at(y, x, 2)) / 3.0;
  return g;
}

/// Minimum eigenvalue of the 5x5 box-summed structure tensor of central
/// differences (clamped at the border).
inline std::vector<double> corner_response(const Image& im) {
  const int H = im.height, W = im.width;
  const auto g = grayscale(im);
  const auto at = [&](int y, int x) {
    return g[static_cast<std::size_t>(std::clamp(y, 0, H - 1)) * W + std::clamp(x, 0, W - 1)];
  };
  std::vector<double> ixx(g.size()), iyy(g.size()), ixy(g.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gx = 0.5 * (at(y, x + 1) - at(y, x - 1)), gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      ixx[i] = gx * gx;
      iyy[i] = gy * gy;
      ixy[i] = gx * gy;
    }
  std::vector<double> r(g.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double a = 0, b = 0, c = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const std::size_t i = static_cast<std::size_t>(yy) * W + xx;
          a += ixx[i];
          b += ixy[i];
          c += iyy[i];
        }
      r[static_cast<std::size_t>(y) * W + x] = 0.5 * (a + c) - std::sqrt(0.25 * (a - c) * (a - c) + b * b);
    }
  return r;
}

/// 4x4 cells x 8 orientation bins of gradient magnitude over a 16x16 patch
/// centred on the keypoint; unit L2 norm (uniform vector for a flat patch).
inline std::vector<double> describe(const std::vector<double>& gray, int W, int H, const Keypoint& k) {
  std::vector<double> d(kDescriptorDim, 0.0);
  const auto at = [&](int y, int x) {
    return gray[static_cast<std::size_t>(std::clamp(y, 0, H - 1)) * W + std::clamp(x, 0, W - 1)];
  };
  const int cx = static_cast<int>(std::lround(k.x)), cy = static_cast<int>(std::lround(k.y));
  const int half = kDescriptorPatch / 2, cell = kDescriptorPatch / kDescriptorCells;
  for (int py = 0; py < kDescriptorPatch; ++py)
    for (int px = 0; px < kDescriptorPatch; ++px) {
      const int y = cy - half + py, x = cx - half + px;
      const double gx = 0.5 * (at(y, x + 1) - at(y, x - 1)), gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
      const double mag = std::sqrt(gx * gx + gy * gy);
      if (mag == 0.0) continue;
      double ang = std::atan2(gy, gx);
      if (ang < 0) ang += 2 * M_PI;
      const int bin = std::min(kDescriptorBins - 1, static_cast<int>(ang / (2 * M_PI) * kDescriptorBins));
      d[static_cast<std::size_t>(((py / cell) * kDescriptorCells + px / cell) * kDescriptorBins + bin)] += mag;
    }
  double n = 0;
  for (double v : d) n += v * v;
  n = std::sqrt(n);
  for (double& v : d) v = n > 0 ? v / n : 1.0 / std::sqrt(static_cast<double>(kDescriptorDim));
  return d;
}

/// Local maxima (3x3) of the corner response above 0.1% of the global maximum,
/// strongest first, with greedy 4-px non-maximum suppression.
inline DetectionResult baseline_detect_describe(const Image& im, int max_kpts) {
  if (max_kpts < 0) throw ValidationError("baseline_detect_describe: max_kpts must be >= 0");
  if (im.height < 3 || im.width < 3) throw ValidationError("baseline_detect_describe: image too small");
  const int H = im.height, W = im.width;
  const auto r = corner_response(im);
  const double peak = *std::max_element(r.begin(), r.end());
  DetectionResult out;
  if (!(peak > 1e-12) || max_kpts == 0) return out;
  std::vector<Keypoint> cand;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double v = r[static_cast<std::size_t>(y) * W + x];
      if (v < 1e-3 * peak) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if ((dy || dx) && yy >= 0 && yy < H && xx >= 0 && xx < W && r[static_cast<std::size_t>(yy) * W + xx] > v) {
            is_max = false;
            break;
          }
        }
      if (is_max) cand.push_back({static_cast<double>(x), static_cast<double>(y), v});
    }
  std::stable_sort(cand.begin(), cand.end(), [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
  for (const auto& c : cand) {
    bool keep = true;
    for (const auto& k : out.keypoints)
      if (std::hypot(k.x - c.x, k.y - c.y) <= 4.0) {
        keep = false;
        break;
      }
    if (!keep) continue;
    out.keypoints.push_back(c);
    if (static_cast<int>(out.keypoints.size()) == max_kpts) break;
  }
  const auto gray = grayscale(im);
  for (const auto& k : out.keypoints) out.descriptors.push_back(describe(gray, W, H, k));
  return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace eval_detail {
inline std::vector<std::vector<double>> read_csv_rows(const fs::path& path, std::size_t expect_cols) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (lineno == 1) continue;  // header
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a numeric CSV row");
    }
    if (expect_cols && row.size() != expect_cols)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(expect_cols) + " columns");
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  return out;
}
}  // namespace eval_detail

inline void save_keypoints(const std::vector<Keypoint>& k, const fs::path& path) {
  auto out = eval_detail::open_out(path);
  for (const auto& p : k) out << p.x << ',' << p.y << ',' << p.score << '\n';
}

inline std::vector<Keypoint> load_keypoints(const fs::path& path) {
  std::vector<Keypoint> k;
  for (const auto& r : eval_detail::read_csv_rows(path, 3)) k.push_back({r[0], r[1], r[2]});
  return k;
}

inline void save_matches(const MatchSet& m, const fs::path& path) {
  auto out = eval_detail::open_out(path);
  for (const auto& p : m.pairs) out << p.i1 << ',' << p.i2 << ',' << p.dist << '\n';
}

inline MatchSet load_matches(const fs::path& path) {
  MatchSet m;
  for (const auto& r : eval_detail::read_csv_rows(path, 3)) {
    if (r[0] != std::floor(r[0]) || r[1] != std::floor(r[1])) throw FormatError(path.string() + ": match indices must be integers");
    m.pairs.push_back({static_cast<int>(r[0]), static_cast<int>(r[1]), r[2]});
  }
  return m;
}

inline void save_homography(const Homography& H, const fs::path& path) {
  auto out = eval_detail::open_out(path);
  for (int r = 0; r < 3; ++r) out << H(r, 0) << ' ' << H(r, 1) << ' ' << H(r, 2) << '\n';
}

inline Homography load_homography(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::array<double, 9> h{};
  for (auto& v : h)
    if (!(in >> v)) throw FormatError(path.string() + ": expected 9 numbers");
  double extra;
  if (in >> extra) throw FormatError(path.string() + ": more than 9 numbers");
  return Homography(h);
}

/// Binary layout: magic "RLDESC\0\0", u32 rows, u32 cols, rows*cols f32 (LE).
/// A ".csv" extension selects one comma-separated row per descriptor.
inline void save_descriptors(const Descriptors& d, const fs::path& path) {
  if (path.extension() == ".csv") {
    auto out = eval_detail::open_out(path);
    for (const auto& row : d) {
      for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << row[k];
      out << '\n';
    }
    return;
  }
  const std::uint32_t cols = d.empty() ? 0 : static_cast<std::uint32_t>(d.front().size());
  detail::ByteWriter w;
  w.bytes("RLDESC\0\0", 8);
  w.u32(static_cast<std::uint32_t>(d.size()));
  w.u32(cols);
  for (const auto& row : d) {
    if (row.size() != cols) throw ShapeError("save_descriptors: ragged rows");
    for (double v : row) w.f32(static_cast<float>(v));
  }
  write_file_bytes(path, w.buffer().data(), w.buffer().size());
}

inline Descriptors load_descriptors(const fs::path& path) {
  if (path.extension() == ".csv") return eval_detail::read_csv_rows(path, 0);
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "RLDESC\0\0", 8) != 0) throw FormatError(path.string() + ": not a descriptor file");
  detail::ByteReader r(bytes.data() + 8, bytes.size() - 8);
  const std::uint32_t rows = r.u32(), cols = r.u32();
  if (r.remaining() != static_cast<std::size_t>(rows) * cols * 4) throw FormatError(path.string() + ": payload size mismatch");
  Descriptors d(rows, std::vector<double>(cols));
  for (auto& row : d)
    for (auto& v : row) v = r.f32();
  return d;
}

// ---------------------------------------------------------------------------
// Pairs manifest and reports
// ---------------------------------------------------------------------------

/// One evaluated pair. Paths are relative to the pairs manifest. `matches` is
/// optional (mutual-NN on the descriptors otherwise); `homography_est` is
/// required for homography scoring.
struct PairEntry {
  std::string name;
  std::string keypoints1, keypoints2;
  std::string descriptors1, descriptors2;
  std::string matches;
  std::string homography;
  std::string homography_est;
  int width = 0, height = 0;
};

struct PairsManifest {
  fs::path base_dir;
  std::vector<PairEntry> pairs;
};

inline PairsManifest load_pairs_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  PairsManifest m;
  m.base_dir = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& e : j.at("pairs")) {
      PairEntry p;
      p.name = e.value("name", "pair" + std::to_string(m.pairs.size()));
      p.keypoints1 = e.at("keypoints1").get<std::string>();
      p.keypoints2 = e.at("keypoints2").get<std::string>();
      p.descriptors1 = e.value("descriptors1", std::string());
      p.descriptors2 = e.value("descriptors2", std::string());
      p.matches = e.value("matches", std::string());
      p.homography = e.at("homography").get<std::string>();
      p.homography_est = e.value("homography_est", std::string());
      p.width = e.value("width", 0);
      p.height = e.value("height", 0);
      if (p.matches.empty() && (p.descriptors1.empty() || p.descriptors2.empty()))
        throw FormatError("pair '" + p.name + "' needs either matches or both descriptor files");
      m.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

inline void save_pairs_manifest(const PairsManifest& m, const fs::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : m.pairs) {
    nlohmann::json e = {{"name", p.name}, {"keypoints1", p.keypoints1}, {"keypoints2", p.keypoints2}, {"homography", p.homography}};
    if (!p.descriptors1.empty()) e["descriptors1"] = p.descriptors1;
    if (!p.descriptors2.empty()) e["descriptors2"] = p.descriptors2;
    if (!p.matches.empty()) e["matches"] = p.matches;
    if (!p.homography_est.empty()) e["homography_est"] = p.homography_est;
    if (p.width) e["width"] = p.width;
    if (p.height) e["height"] = p.height;
    arr.push_back(e);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json{{"pairs", arr}}.dump(2) << '\n';
}

inline PairData load_pair(const PairsManifest& m, const PairEntry& e) {
  PairData p;
  p.name = e.name;
  p.kpts1 = load_keypoints(m.base_dir / e.keypoints1);
  p.kpts2 = load_keypoints(m.base_dir / e.keypoints2);
  p.H = load_homography(m.base_dir / e.homography);
  if (!e.matches.empty()) {
    p.matches = load_matches(m.base_dir / e.matches);
  } else {
    const auto d1 = load_descriptors(m.base_dir / e.descriptors1);
    const auto d2 = load_descriptors(m.base_dir / e.descriptors2);
    if (d1.size() != p.kpts1.size() || d2.size() != p.kpts2.size())
      throw FormatError("pair '" + e.name + "': descriptor count differs from keypoint count");
    p.matches = mutual_nn_matches(d1, d2);
  }
  check_match_indices(p.matches, p.kpts1.size(), p.kpts2.size());
  return p;
}

enum class EvalMode { Mma, Homography, PrecisionRecall };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "mma") return EvalMode::Mma;
  if (s == "homography") return EvalMode::Homography;
  if (s == "pr") return EvalMode::PrecisionRecall;
  throw ValidationError("unknown eval mode '" + s + "' (expected mma, homography or pr)");
}

/// Report JSON: {per_pair: [...], aggregate: {...}, config: {...}}. MMA is
/// reported at thresholds 1..10 px plus the configured threshold.
inline nlohmann::json run_eval(EvalMode mode, const PairsManifest& m, const EvalConfig& cfg) {
  cfg.validate();
  if (m.pairs.empty()) throw ValidationError("eval: pairs manifest is empty");
  const double t = cfg.pixel_threshold;
  nlohmann::json per = nlohmann::json::array();
  nlohmann::json agg = nlohmann::json::object();
  nlohmann::json config = {{"pixel_threshold", t}, {"corner_eps", cfg.corner_eps}};
  std::vector<PairData> loaded;
  for (const auto& e : m.pairs) loaded.push_back(load_pair(m, e));

  if (mode == EvalMode::Mma) {
    config["mode"] = "mma";
    std::vector<double> ts;
    for (int k = 1; k <= 10; ++k) ts.push_back(k);
    const auto curve = mma(loaded, ts);
    for (const auto& p : loaded) {
      const auto mask = correct_mask(p.matches, p.kpts1, p.kpts2, p.H, t);
      per.push_back({{"name", p.name},
                     {"matches", p.matches.size()},
                     {"correct", mask.count()},
                     {"accuracy", match_accuracy(p, t)},
                     {"at_infinity", mask.at_infinity.size()}});
    }
    agg = {{"mma", mma(loaded, {t})[0]}, {"thresholds", ts}, {"curve", curve}, {"pairs", loaded.size()}};
  } else if (mode == EvalMode::Homography) {
    config["mode"] = "homography";
    std::vector<HomographyScore> scores;
    double err_sum = 0;
    for (std::size_t n = 0; n < loaded.size(); ++n) {
      const auto& e = m.pairs[n];
      if (e.homography_est.empty()) throw FormatError("pair '" + e.name + "' has no homography_est");
      const int w = e.width ? e.width : cfg.image_width, h = e.height ? e.height : cfg.image_height;
      if (w <= 0 || h <= 0) throw ValidationError("pair '" + e.name + "': image size unknown (set width/height)");
      const auto s = homography_score(loaded[n].H, load_homography(m.base_dir / e.homography_est), w, h, cfg.corner_eps);
      scores.push_back(s);
      err_sum += s.mean_corner_error;
      per.push_back({{"name", e.name}, {"mean_corner_error", s.mean_corner_error}, {"correct", s.correct}});
    }
    agg = {{"accuracy", homography_accuracy(scores)},
           {"mean_corner_error", err_sum / static_cast<double>(scores.size())},
           {"pairs", scores.size()}};
  } else {
    config["mode"] = "pr";
    double ps = 0, rs = 0;
    for (const auto& p : loaded) {
      const auto mask = correct_mask(p.matches, p.kpts1, p.kpts2, p.H, t);
      const auto truth = true_matches(p.kpts1, p.kpts2, p.H, t);
      const auto pr = precision_recall(p.matches, mask, truth);
      ps += pr.precision;
      rs += pr.recall;
      per.push_back({{"name", p.name},
                     {"precision", pr.precision},
                     {"recall", pr.recall},
                     {"matches", p.matches.size()},
                     {"correct", mask.count()},
                     {"true_matches", truth.size()}});
    }
    const auto n = static_cast<double>(loaded.size());
    agg = {{"precision", ps / n}, {"recall", rs / n}, {"pairs", loaded.size()}};
  }
  return {{"per_pair", per}, {"aggregate", agg}, {"config", config}};
}

}  // namespace relight
