#pragma once

// Tensor archive: a JSON metadata record plus named float32 tensors.
//
// Byte layout (all integers little-endian):
//   8 bytes   magic "RLTARCH\0"
//   u32       format version
//   u64       metadata length N, then N bytes of UTF-8 JSON
//   u32       tensor count
//   per tensor:
//     u32 name length, name bytes
//     u32 rank, rank x u32 dims
//     prod(dims) x f32 payload
//   u32       CRC-32 of every preceding byte

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relight/image.hpp"
#include "relight/tensor.hpp"

namespace relight {

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr std::array<char, 8> kArchiveMagic{'R', 'L', 'T', 'A', 'R', 'C', 'H', '\0'};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("archive has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, _] : tensors)
      if (n == name) return true;
    return false;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw FormatError("archive truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string str(std::size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_archive(const TensorArchive& a) {
  detail::ByteWriter w;
  w.bytes(kArchiveMagic.data(), kArchiveMagic.size());
  w.u32(kArchiveVersion);
  const std::string meta = a.meta.dump();
  w.u64(meta.size());
  w.bytes(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [name, t] : a.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float f : t.data) w.f32(f);
  }
  auto& buf = w.buffer();
  const auto crc = static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  w.u32(crc);
  return std::move(buf);
}

/// Validates magic, version and checksum before decoding anything.
inline TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kArchiveMagic.size() + 4 + 8 + 4 + 4) throw FormatError("archive truncated");
  if (std::memcmp(bytes.data(), kArchiveMagic.data(), kArchiveMagic.size()) != 0) throw FormatError("not a tensor archive (bad magic)");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored = tail.u32();
  const auto actual = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));

  detail::ByteReader r(bytes.data(), body);
  r.str(kArchiveMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion)
    throw FormatError("archive format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kArchiveVersion) + ")");
  if (stored != actual) throw FormatError("archive checksum mismatch (corrupted file)");

  TensorArchive a;
  const std::uint64_t meta_len = r.u64();
  if (meta_len > r.remaining()) throw FormatError("archive truncated");
  try {
    a.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    const std::size_t n = shape_numel(shape);
    r.need(n * 4);
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = r.f32();
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("archive has trailing bytes");
  return a;
}

inline void save_archive(const TensorArchive& a, const std::filesystem::path& path) {
  const auto bytes = encode_archive(a);
  // temp file + rename: the final path only ever holds a complete archive
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes.data(), bytes.size());
  std::filesystem::rename(tmp, path);
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
  try {
    return decode_archive(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace relight
