#pragma once

#include <bit>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "wseg/error.hpp"

namespace wseg {

/// Dense row-major float32 array with shape metadata. Image-like data uses
/// batch x channel x height x width order.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s, float fill = 0.0f) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static Tensor from(std::vector<int64_t> s, std::vector<float> values) {
    if (numel_of(s) != static_cast<int64_t>(values.size())) {
      throw InputError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t e : s) {
      if (e <= 0) throw InputError("tensor extents must be positive, got " + shape_string(s));
      n *= e;
    }
    return n;
  }

  static std::string shape_string(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  std::string shape_str() const { return shape_string(shape); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float& at(int64_t i) {
    assert(i >= 0 && i < numel());
    return data[static_cast<size_t>(i)];
  }
  float at(int64_t i) const {
    assert(i >= 0 && i < numel());
    return data[static_cast<size_t>(i)];
  }
  float& at(int64_t a, int64_t b) {
    assert(rank() == 2);
    return data[static_cast<size_t>(a * shape[1] + b)];
  }
  float at(int64_t a, int64_t b) const {
    assert(rank() == 2);
    return data[static_cast<size_t>(a * shape[1] + b)];
  }
  float& at(int64_t a, int64_t b, int64_t c) {
    assert(rank() == 3);
    return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
  }
  float at(int64_t a, int64_t b, int64_t c) const {
    assert(rank() == 3);
    return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
  }
  float& at(int64_t a, int64_t b, int64_t c, int64_t d) {
    assert(rank() == 4);
    return data[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }
  float at(int64_t a, int64_t b, int64_t c, int64_t d) const {
    assert(rank() == 4);
    return data[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }

  bool all_finite() const {
    for (float v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

namespace wsgt {

// Tensor file format: magic "WSGT", version byte 0x01, dtype byte 0x01 (f32),
// rank byte, rank little-endian u32 extents, then the row-major
// little-endian f32 payload. No padding, no compression.
inline constexpr char kMagic[4] = {'W', 'S', 'G', 'T'};
inline constexpr uint8_t kVersion = 0x01;
inline constexpr uint8_t kDtypeF32 = 0x01;
inline constexpr int kMaxRank = 8;

inline void write(const std::filesystem::path& path, const Tensor& t) {
  if (t.rank() < 1 || t.rank() > kMaxRank) {
    throw IoError("wsgt: rank " + std::to_string(t.rank()) + " out of range for " + path.string());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("wsgt: cannot open for writing: " + path.string());
  out.write(kMagic, 4);
  out.put(static_cast<char>(kVersion));
  out.put(static_cast<char>(kDtypeF32));
  out.put(static_cast<char>(t.rank()));
  for (int64_t e : t.shape) {
    auto v = static_cast<uint32_t>(e);
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
  }
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  } else {
    for (float f : t.data) {
      uint32_t v = std::bit_cast<uint32_t>(f);
      char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                   static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
      out.write(b, 4);
    }
  }
  if (!out) throw IoError("wsgt: write failed: " + path.string());
}

inline Tensor read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("wsgt: cannot open: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("wsgt: bad magic in " + path.string());
  }
  int version = in.get();
  int dtype = in.get();
  int rank = in.get();
  if (version != kVersion) throw IoError("wsgt: unsupported version in " + path.string());
  if (dtype != kDtypeF32) throw IoError("wsgt: unsupported dtype in " + path.string());
  if (rank < 1 || rank > kMaxRank) throw IoError("wsgt: bad rank in " + path.string());
  std::vector<int64_t> shape(static_cast<size_t>(rank));
  for (auto& e : shape) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("wsgt: truncated header in " + path.string());
    uint32_t v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                 (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    if (v == 0) throw IoError("wsgt: zero extent in " + path.string());
    e = static_cast<int64_t>(v);
  }
  Tensor t(shape);
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in || in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float))) {
      throw IoError("wsgt: truncated payload in " + path.string());
    }
  } else {
    for (auto& f : t.data) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      if (!in) throw IoError("wsgt: truncated payload in " + path.string());
      uint32_t v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                   (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
      f = std::bit_cast<float>(v);
    }
  }
  // Reject trailing garbage so truncation bugs do not round-trip silently.
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError("wsgt: trailing bytes in " + path.string());
  }
  return t;
}

}  // namespace wsgt
}  // namespace wseg
