#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace weakseg {

// Row-major single-plane image.
template <typename T>
struct Image {
  int height = 0;
  int width = 0;
  std::vector<T> v;

  Image() = default;
  Image(int h, int w, T fill = T{}) : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("Image: non-positive shape");
  }

  T& at(int i, int j) { return v[static_cast<std::size_t>(i) * width + j]; }
  const T& at(int i, int j) const { return v[static_cast<std::size_t>(i) * width + j]; }

  std::size_t size() const { return v.size(); }
  T* row(int i) { return v.data() + static_cast<std::size_t>(i) * width; }
  const T* row(int i) const { return v.data() + static_cast<std::size_t>(i) * width; }

  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
  friend bool operator==(const Image&, const Image&) = default;
};

// Channel-planar volume: `channels` planes of height x width.
template <typename T>
struct Volume {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> v;

  Volume() = default;
  Volume(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w), v(static_cast<std::size_t>(c) * h * w, fill) {
    if (c <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("Volume: non-positive shape");
  }

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  T* plane(int c) { return v.data() + c * plane_size(); }
  const T* plane(int c) const { return v.data() + c * plane_size(); }

  T& at(int c, int i, int j) { return v[c * plane_size() + static_cast<std::size_t>(i) * width + j]; }
  const T& at(int c, int i, int j) const {
    return v[c * plane_size() + static_cast<std::size_t>(i) * width + j];
  }

  std::size_t size() const { return v.size(); }
  friend bool operator==(const Volume&, const Volume&) = default;
};

// Per-pixel 2-class logits: plane 0 = benign, plane 1 = malign.
template <typename T>
using LogitMap = Volume<T>;

// Per-pixel malign probability, the shared state between pipeline workers.
using ProbMap = Image<float>;

template <typename T, typename U>
Image<U> convert_image(const Image<T>& in) {
  Image<U> out(in.height, in.width);
  for (std::size_t i = 0; i < in.v.size(); ++i) out.v[i] = static_cast<U>(in.v[i]);
  return out;
}

}  // namespace weakseg
