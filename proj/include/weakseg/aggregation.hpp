#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "weakseg/tensor.hpp"

namespace weakseg {

// Numerically stable sigmoid; the 2-class softmax reduces to it.
template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Per-pixel malign probability from 2-class logits.
template <typename T>
Image<T> pixel_softmax(const LogitMap<T>& logits) {
  if (logits.channels != 2) throw std::invalid_argument("pixel_softmax: expected 2 channels");
  Image<T> q(logits.height, logits.width);
  const T* l0 = logits.plane(0);
  const T* l1 = logits.plane(1);
  for (std::size_t i = 0; i < q.size(); ++i) q.v[i] = stable_sigmoid(l1[i] - l0[i]);
  return q;
}

// Slide-level logits: mean benign logit and mean of the top-eta-percent
// malign logits. top_set holds the flat (row-major) indices that fed l1.
template <typename T>
struct SlideLogits {
  T l0 = T(0);
  T l1 = T(0);
  double eta = 100.0;
  std::vector<std::int64_t> top_set;
};

inline int top_k_count(double eta, int height, int width) {
  const auto n = static_cast<long long>(height) * width;
  const long long k = std::llround(eta / 100.0 * static_cast<double>(n));
  return static_cast<int>(std::max(1ll, std::min(k, n)));
}

// The percentile selection is realized as deterministic top-k with
// k = max(1, round(eta/100 * h*w)); ties at the cutoff go to the smaller
// row-major index. eta = 100 degenerates to the plain mean, k = 1 to the max.
template <typename T>
SlideLogits<T> aggregate(const LogitMap<T>& logits, double eta) {
  if (logits.channels != 2) throw std::invalid_argument("aggregate: expected 2 channels");
  if (!(eta > 0.0 && eta <= 100.0)) throw std::invalid_argument("aggregate: eta must be in (0,100]");
  const std::size_t n = logits.plane_size();
  SlideLogits<T> out;
  out.eta = eta;

  const T* l0 = logits.plane(0);
  long double sum0 = 0.0L;
  for (std::size_t i = 0; i < n; ++i) sum0 += l0[i];
  out.l0 = static_cast<T>(sum0 / static_cast<long double>(n));

  const int k = top_k_count(eta, logits.height, logits.width);
  const T* l1 = logits.plane(1);
  std::vector<std::int64_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int64_t>(i);
  auto by_value_desc = [l1](std::int64_t a, std::int64_t b) {
    if (l1[a] != l1[b]) return l1[a] > l1[b];
    return a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), by_value_desc);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());

  long double sum1 = 0.0L;
  for (auto i : idx) sum1 += l1[static_cast<std::size_t>(i)];
  out.l1 = static_cast<T>(sum1 / static_cast<long double>(k));
  out.top_set = std::move(idx);
  return out;
}

// Exact subgradient of aggregate: the benign mean spreads dl0 uniformly;
// dl1 is split over the recorded top set, which is treated as constant.
template <typename T>
LogitMap<T> aggregate_backward(T dl0, T dl1, const SlideLogits<T>& slide, int height, int width) {
  if (slide.top_set.empty()) throw std::invalid_argument("aggregate_backward: empty top set");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  for (auto i : slide.top_set)
    if (i < 0 || static_cast<std::size_t>(i) >= n)
      throw std::invalid_argument("aggregate_backward: top set out of range for shape");
  LogitMap<T> g(2, height, width, T(0));
  T* g0 = g.plane(0);
  T* g1 = g.plane(1);
  const T per_pixel0 = dl0 / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) g0[i] = per_pixel0;
  const T per_pixel1 = dl1 / static_cast<T>(slide.top_set.size());
  for (auto i : slide.top_set) g1[static_cast<std::size_t>(i)] += per_pixel1;
  return g;
}

// Slide class probabilities (q0, q1) = softmax(l0, l1).
template <typename T>
std::pair<T, T> slide_class_probs(const SlideLogits<T>& slide) {
  const T q1 = stable_sigmoid(slide.l1 - slide.l0);
  return {T(1) - q1, q1};
}

}  // namespace weakseg
