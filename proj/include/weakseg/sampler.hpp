#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "weakseg/rng.hpp"
#include "weakseg/tensor.hpp"

namespace weakseg {

struct PixelCoord {
  int i = 0;
  int j = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

// Within-slide patch-center distribution, weights proportional to Q^alpha.
struct PatchDistribution {
  int slide_id = -1;
  int height = 0, width = 0;
  double alpha = 0.0;
  std::vector<double> weights;  // row-major, sums to 1
  std::vector<double> cdf;      // inclusive prefix sums, back() == 1

  double weight_at(int i, int j) const { return weights[static_cast<std::size_t>(i) * width + j]; }

  double entropy() const {
    double h = 0.0;
    for (double w : weights)
      if (w > 0.0) h -= w * std::log(w);
    return h;
  }
};

// P(i,j | S, theta, alpha) = Q_ij^alpha / sum Q^alpha. alpha = 0 is exactly
// uniform (0^0 = 1); an all-zero map with alpha > 0 falls back to uniform.
inline PatchDistribution patch_distribution(const ProbMap& q, double alpha, int slide_id = -1) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("patch_distribution: alpha must be >= 0");
  PatchDistribution d;
  d.slide_id = slide_id;
  d.height = q.height;
  d.width = q.width;
  d.alpha = alpha;
  const std::size_t n = q.size();
  d.weights.resize(n);
  double total = 0.0;
  if (alpha == 0.0) {
    std::fill(d.weights.begin(), d.weights.end(), 1.0);
    total = static_cast<double>(n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::pow(static_cast<double>(q.v[i]), alpha);
      d.weights[i] = w;
      total += w;
    }
    if (total <= 0.0) {
      std::fill(d.weights.begin(), d.weights.end(), 1.0);
      total = static_cast<double>(n);
    }
  }
  d.cdf.resize(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d.weights[i] /= total;
    acc += d.weights[i];
    d.cdf[i] = acc;
  }
  d.cdf.back() = 1.0;
  return d;
}

// i.i.d. inverse-CDF draws over the row-major flattened weights.
inline std::vector<PixelCoord> sample_patch_centers(const PatchDistribution& dist, long n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_patch_centers: n must be >= 1");
  std::vector<PixelCoord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long s = 0; s < n; ++s) {
    const double u = rng.uniform();
    const auto it = std::upper_bound(dist.cdf.begin(), dist.cdf.end(), u);
    const auto flat = static_cast<long>(std::min<std::ptrdiff_t>(
        it - dist.cdf.begin(), static_cast<std::ptrdiff_t>(dist.cdf.size()) - 1));
    out.push_back({static_cast<int>(flat / dist.width), static_cast<int>(flat % dist.width)});
  }
  return out;
}

inline std::vector<PixelCoord> sample_patch_centers(const PatchDistribution& dist, long n,
                                                    std::uint64_t seed) {
  Rng rng(seed);
  return sample_patch_centers(dist, n, rng);
}

// ---- Cross-slide selection ----

enum class SlideLabel : int { Benign = 0, Malign = 1 };

// Shared bookkeeping for the slide-selection policy: per-slide latest map
// mass (sum of malign probabilities), last-visit epochs, and the staleness
// bound N. Mutations are serialized; both pipeline workers may hold one.
class SlideSelectionState {
 public:
  SlideSelectionState() = default;
  SlideSelectionState(std::vector<std::pair<int, SlideLabel>> slides, std::size_t pixels_per_slide,
                      int staleness_bound_epochs)
      : n_(staleness_bound_epochs) {
    if (n_ < 1) throw std::invalid_argument("SlideSelectionState: N must be >= 1");
    for (auto& [id, label] : slides) {
      Entry e;
      e.id = id;
      e.label = label;
      e.pixel_count = pixels_per_slide;
      e.map_sum = 0.5 * static_cast<double>(pixels_per_slide);  // default: Q == 0.5 everywhere
      e.last_visit_epoch = -1;
      entries_.push_back(e);
    }
    if (entries_.empty()) throw std::invalid_argument("SlideSelectionState: empty dataset");
  }

  int staleness_bound() const { return n_; }

  void record_map_sum(int slide_id, double sum) {
    std::lock_guard lock(mu_);
    find(slide_id).map_sum = sum;
  }

  void mark_visited(int slide_id, long epoch) {
    std::lock_guard lock(mu_);
    find(slide_id).last_visit_epoch = epoch;
  }

  long last_visit(int slide_id) const {
    std::lock_guard lock(mu_);
    return const_cast<SlideSelectionState*>(this)->find(slide_id).last_visit_epoch;
  }

  // Error-driven distribution over benign slides: probability proportional
  // to the sum of the slide's latest malign probability map.
  std::vector<std::pair<int, double>> benign_slide_distribution() const {
    std::lock_guard lock(mu_);
    std::vector<std::pair<int, double>> probs;
    double total = 0.0;
    for (const auto& e : entries_) {
      if (e.label != SlideLabel::Benign) continue;
      probs.emplace_back(e.id, e.map_sum);
      total += e.map_sum;
    }
    if (probs.empty()) throw std::domain_error("benign_slide_distribution: no benign slides");
    if (total <= 0.0) {
      for (auto& p : probs) p.second = 1.0 / static_cast<double>(probs.size());
    } else {
      for (auto& p : probs) p.second /= total;
    }
    return probs;
  }

  // Next slide to visit at `epoch`: any slide unvisited for N-1 epochs is
  // scheduled first (FIFO among overdue, id as tiebreak); otherwise a fair
  // coin picks the class, malign slides uniform, benign slides
  // error-weighted.
  int next_slide(long epoch, Rng& rng) const {
    std::lock_guard lock(mu_);
    const Entry* overdue = nullptr;
    for (const auto& e : entries_) {
      if (epoch - e.last_visit_epoch < n_ - 1) continue;
      if (!overdue || e.last_visit_epoch < overdue->last_visit_epoch ||
          (e.last_visit_epoch == overdue->last_visit_epoch && e.id < overdue->id))
        overdue = &e;
    }
    if (overdue) return overdue->id;

    std::vector<const Entry*> malign;
    std::vector<const Entry*> benign;
    for (const auto& e : entries_)
      (e.label == SlideLabel::Malign ? malign : benign).push_back(&e);
    if (malign.empty() || benign.empty())
      throw std::domain_error("next_slide: need at least one slide of each class");
    if (rng.bernoulli(0.5)) return malign[rng.uniform_index(malign.size())]->id;

    double total = 0.0;
    for (const auto* e : benign) total += e->map_sum;
    if (total <= 0.0) return benign[rng.uniform_index(benign.size())]->id;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (const auto* e : benign) {
      acc += e->map_sum;
      if (u < acc) return e->id;
    }
    return benign.back()->id;
  }

  std::vector<int> slide_ids() const {
    std::lock_guard lock(mu_);
    std::vector<int> ids;
    for (const auto& e : entries_) ids.push_back(e.id);
    return ids;
  }

 private:
  struct Entry {
    int id = 0;
    SlideLabel label = SlideLabel::Benign;
    std::size_t pixel_count = 0;
    double map_sum = 0.0;
    long last_visit_epoch = -1;
  };

  Entry& find(int id) {
    for (auto& e : entries_)
      if (e.id == id) return e;
    throw std::invalid_argument("unknown slide id");
  }

  mutable std::mutex mu_;
  std::vector<Entry> entries_;
  int n_ = 4;
};

// ---- Shuffle buffer ----

// Bounded pool decorrelating sampled patches from batch construction.
// Push at capacity evicts a uniformly random resident entry; pops remove
// uniformly without replacement. All randomness comes from the seed given
// at construction. Thread safety is the caller's job (the pipeline holds a
// lock around mutations).
template <typename Entry>
class ShuffleBuffer {
 public:
  ShuffleBuffer(std::size_t capacity, double min_fill_fraction, std::uint64_t seed)
      : capacity_(capacity), min_fill_(min_fill_fraction), rng_(seed) {
    if (capacity_ == 0) throw std::invalid_argument("ShuffleBuffer: capacity must be positive");
    if (!(min_fill_ >= 0.0 && min_fill_ <= 1.0))
      throw std::invalid_argument("ShuffleBuffer: min fill fraction must be in [0,1]");
    entries_.reserve(capacity_);
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  double fill() const { return static_cast<double>(entries_.size()) / static_cast<double>(capacity_); }

  std::optional<Entry> push(Entry e) {
    if (entries_.size() < capacity_) {
      entries_.push_back(std::move(e));
      return std::nullopt;
    }
    const std::size_t victim = rng_.uniform_index(entries_.size());
    std::swap(entries_[victim], e);
    return e;
  }

  // Not-ready (under min fill or fewer than batch_size entries) is signalled
  // with nullopt; the caller keeps feeding and retries.
  std::optional<std::vector<Entry>> pop_batch(std::size_t batch_size) {
    const auto min_entries =
        std::max(batch_size, static_cast<std::size_t>(std::ceil(min_fill_ * static_cast<double>(capacity_))));
    if (entries_.size() < min_entries) return std::nullopt;
    std::vector<Entry> batch;
    batch.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::size_t pick = rng_.uniform_index(entries_.size());
      std::swap(entries_[pick], entries_.back());
      batch.push_back(std::move(entries_.back()));
      entries_.pop_back();
    }
    return batch;
  }

 private:
  std::size_t capacity_;
  double min_fill_;
  Rng rng_;
  std::vector<Entry> entries_;
};

}  // namespace weakseg
