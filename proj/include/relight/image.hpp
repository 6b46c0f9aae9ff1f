#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "relight/tensor.hpp"

namespace relight {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x 3 RGB image, row-major interleaved, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

  bool in_unit_range() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
  }

  bool operator==(const Image& o) const { return height == o.height && width == o.width && data == o.data; }
};

inline std::string dims_str(const Image& im) {
  return std::to_string(im.height) + "x" + std::to_string(im.width) + "x3";
}

/// HWC image -> CHW tensor
template <class T>
Tensor<T> to_tensor(const Image& im) {
  Tensor<T> t({3, im.height, im.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) t.at(c, y, x) = static_cast<T>(im.at(y, x, c));
  return t;
}

template <class T>
Image from_tensor(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("from_tensor: expected {3,H,W}, got " + shape_str(t.shape));
  Image im(t.dim(1), t.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) im.at(y, x, c) = static_cast<double>(t.at(c, y, x));
  return im;
}

inline Image flip_horizontal(const Image& im) {
  Image out(im.height, im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = im.at(y, im.width - 1 - x, c);
  return out;
}

inline double mean_value(const Image& im) {
  double s = 0;
  for (double v : im.data) s += v;
  return im.data.empty() ? 0.0 : s / static_cast<double>(im.data.size());
}

inline double mean_abs_error(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("mean_abs_error: " + dims_str(a) + " vs " + dims_str(b));
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.size());
}

inline double max_abs_error(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_error: " + dims_str(a) + " vs " + dims_str(b));
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

/// Peak signal-to-noise ratio for unit peak. Identical images give +inf.
inline double psnr(const Image& a, const Image& b, int border = 0) {
  if (!a.same_shape(b)) throw ShapeError("psnr: " + dims_str(a) + " vs " + dims_str(b));
  double se = 0;
  std::size_t n = 0;
  for (int y = border; y < a.height - border; ++y)
    for (int x = border; x < a.width - border; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        se += d * d;
        ++n;
      }
  if (n == 0) throw ShapeError("psnr: empty region");
  const double mse = se / static_cast<double>(n);
  return mse == 0.0 ? INFINITY : 10.0 * std::log10(1.0 / mse);
}

/// Bilinear resize with pixel-center alignment. Same size returns a copy.
inline Image resize_bilinear(const Image& im, int h, int w) {
  if (h == im.height && w == im.width) return im;
  if (h <= 0 || w <= 0 || im.height == 0 || im.width == 0) throw ShapeError("resize: empty image");
  Image out(h, w);
  const double sy = static_cast<double>(im.height) / h, sx = static_cast<double>(im.width) / w;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, im.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, im.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, im.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, im.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = im.at(y0, x0, c) * (1 - tx) + im.at(y0, x1, c) * tx;
        const double bot = im.at(y1, x0, c) * (1 - tx) + im.at(y1, x1, c) * tx;
        out.at(y, x, c) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const void* bytes, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed: " + path.string());
}

/// Encodes an 8-bit RGB PNG.
inline std::vector<std::uint8_t> encode_png(const Image& im) {
  std::vector<std::uint8_t> px(im.size());
  std::transform(im.data.begin(), im.data.end(), px.begin(), quantize8);
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(im.width);
  pi.height = static_cast<png_uint_32>(im.height);
  pi.format = PNG_FORMAT_RGB;
  png_alloc_size_t n = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &n, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode: ") + pi.message);
  std::vector<std::uint8_t> out(n);
  if (!png_image_write_to_memory(&pi, out.data(), &n, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode: ") + pi.message);
  out.resize(n);
  return out;
}

/// Decodes any PNG libpng understands into RGB; nothing is returned on error.
inline Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& what = "png") {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw IoError(what + ": decode error: " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw IoError(what + ": decode error: " + msg);
  }
  Image im(static_cast<int>(pi.height), static_cast<int>(pi.width));
  for (std::size_t i = 0; i < px.size(); ++i) im.data[i] = px[i] / 255.0;
  return im;
}

inline void save_png(const Image& im, const std::filesystem::path& path) {
  const auto bytes = encode_png(im);
  write_file_bytes(path, bytes.data(), bytes.size());
}

inline Image load_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path), path.string()); }

}  // namespace relight
