#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "weakseg/tensor.hpp"

namespace weakseg {

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t checksum(const ProbMap& m) {
  return fnv1a(m.v.data(), m.v.size() * sizeof(float));
}

// ---- PGM (binary P5, maxval 255) ----

inline void write_pgm(const std::filesystem::path& path, const Image<std::uint8_t>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.v.data()), static_cast<std::streamsize>(img.v.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline Image<std::uint8_t> read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P5") throw std::runtime_error("not a P5 pgm: " + path.string());
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("bad pgm header: " + path.string());
  f.get();  // single whitespace after header
  Image<std::uint8_t> img(h, w);
  f.read(reinterpret_cast<char*>(img.v.data()), static_cast<std::streamsize>(img.v.size()));
  if (!f) throw std::runtime_error("truncated pgm: " + path.string());
  return img;
}

// ---- raw little-endian float32 ----
// Host is assumed little-endian IEEE-754 (x86/arm64); data is written verbatim.

inline void write_f32(const std::filesystem::path& path, const float* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  std::vector<float> out(expected);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected * sizeof(float)));
  if (!f || f.gcount() != static_cast<std::streamsize>(expected * sizeof(float)))
    throw std::runtime_error("short read: " + path.string());
  return out;
}

// Probability maps are persisted twice: an 8-bit PGM for eyeballing and a
// lossless float32 sidecar the pipeline round-trips through.
inline void save_prob_map(const std::filesystem::path& base, const ProbMap& q) {
  Image<std::uint8_t> b(q.height, q.width);
  for (std::size_t i = 0; i < q.v.size(); ++i)
    b.v[i] = static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(q.v[i])));
  write_pgm(std::filesystem::path(base).concat(".pgm"), b);
  write_f32(std::filesystem::path(base).concat(".f32"), q.v.data(), q.v.size());
}

inline ProbMap load_prob_map(const std::filesystem::path& f32_path, int height, int width) {
  ProbMap q(height, width);
  q.v = read_f32(f32_path, static_cast<std::size_t>(height) * width);
  return q;
}

}  // namespace weakseg
