#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "weakseg/sampler.hpp"
#include "weakseg/tensor.hpp"

namespace weakseg {

struct SlideScore {
  int slide_id = -1;
  double score = 0.0;  // max pixel malign probability
  SlideLabel label = SlideLabel::Benign;
};

// Mann-Whitney AUC with ties counted 1/2, via average ranks.
inline double roc_auc(const std::vector<SlideScore>& scores) {
  std::vector<const SlideScore*> sorted;
  long n_pos = 0, n_neg = 0;
  for (const auto& s : scores) {
    sorted.push_back(&s);
    (s.label == SlideLabel::Malign ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: needs both classes");
  std::sort(sorted.begin(), sorted.end(),
            [](const SlideScore* a, const SlideScore* b) { return a->score < b->score; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j]->score == sorted[i]->score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t t = i; t < j; ++t)
      if (sorted[t]->label == SlideLabel::Malign) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ROC curve points (fpr, tpr), threshold swept over distinct scores.
inline std::vector<std::pair<double, double>> roc_curve(const std::vector<SlideScore>& scores) {
  std::vector<const SlideScore*> sorted;
  long n_pos = 0, n_neg = 0;
  for (const auto& s : scores) {
    sorted.push_back(&s);
    (s.label == SlideLabel::Malign ? n_pos : n_neg)++;
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const SlideScore* a, const SlideScore* b) { return a->score > b->score; });
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j]->score == sorted[i]->score) ++j;
    for (std::size_t t = i; t < j; ++t) (sorted[t]->label == SlideLabel::Malign ? tp : fp)++;
    pts.emplace_back(static_cast<double>(fp) / std::max(1l, n_neg),
                     static_cast<double>(tp) / std::max(1l, n_pos));
    i = j;
  }
  return pts;
}

struct Detection {
  double i = 0.0, j = 0.0;   // probability-weighted centroid
  double confidence = 0.0;   // component max probability
};

using DetectionList = std::vector<Detection>;  // sorted by confidence, descending

// 8-connected component labeling of mask > 0; returns label image and count.
inline std::pair<Image<int>, int> connected_components(const Image<std::uint8_t>& mask) {
  Image<int> labels(mask.height, mask.width, -1);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int si = 0; si < mask.height; ++si) {
    for (int sj = 0; sj < mask.width; ++sj) {
      if (!mask.at(si, sj) || labels.at(si, sj) >= 0) continue;
      const int id = next++;
      stack.push_back({si, sj});
      labels.at(si, sj) = id;
      while (!stack.empty()) {
        const auto [ci, cj] = stack.back();
        stack.pop_back();
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ni = ci + di, nj = cj + dj;
            if (ni < 0 || nj < 0 || ni >= mask.height || nj >= mask.width) continue;
            if (!mask.at(ni, nj) || labels.at(ni, nj) >= 0) continue;
            labels.at(ni, nj) = id;
            stack.push_back({ni, nj});
          }
      }
    }
  }
  return {std::move(labels), next};
}

// Candidate detections: 8-connected components of the thresholded map, one
// detection per component at its probability-weighted centroid, confidence
// equal to the component's peak probability.
inline DetectionList detections_from_map(const ProbMap& q, double threshold = 0.5) {
  Image<std::uint8_t> bin(q.height, q.width);
  for (std::size_t i = 0; i < q.size(); ++i) bin.v[i] = q.v[i] > threshold ? 1 : 0;
  auto [labels, count] = connected_components(bin);
  struct Acc {
    double wi = 0, wj = 0, wsum = 0, peak = 0;
  };
  std::vector<Acc> accs(static_cast<std::size_t>(count));
  for (int i = 0; i < q.height; ++i)
    for (int j = 0; j < q.width; ++j) {
      const int id = labels.at(i, j);
      if (id < 0) continue;
      auto& a = accs[static_cast<std::size_t>(id)];
      const double p = static_cast<double>(q.at(i, j));
      a.wi += p * i;
      a.wj += p * j;
      a.wsum += p;
      a.peak = std::max(a.peak, p);
    }
  DetectionList out;
  for (const auto& a : accs)
    out.push_back({a.wi / a.wsum, a.wj / a.wsum, a.peak});
  std::sort(out.begin(), out.end(),
            [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  return out;
}

// Free-response operating points: mean false positives per slide.
inline constexpr std::array<double, 6> kFrocFpPoints = {0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct FrocResult {
  std::array<double, 6> sensitivity{};
  double average = 0.0;
  std::vector<std::pair<double, double>> curve;  // (mean fp/slide, sensitivity)
};

// Lesion-level free-response evaluation. A detection is a true positive
// when its centroid pixel lies inside a ground-truth lesion component; each
// lesion is creditable once, repeat hits are ignored. Sensitivities are
// step-function values at the predefined mean-FP-per-slide points.
inline FrocResult froc(const std::vector<DetectionList>& detections,
                       const std::vector<const Image<std::uint8_t>*>& masks) {
  if (detections.size() != masks.size()) throw std::invalid_argument("froc: size mismatch");
  const auto n_slides = static_cast<double>(masks.size());
  if (masks.empty()) throw std::invalid_argument("froc: empty input");

  long total_lesions = 0;
  std::vector<Image<int>> lesion_labels;
  std::vector<int> lesion_base;
  for (const auto* m : masks) {
    auto [labels, count] = connected_components(*m);
    lesion_base.push_back(static_cast<int>(total_lesions));
    lesion_labels.push_back(std::move(labels));
    total_lesions += count;
  }
  if (total_lesions == 0) throw std::invalid_argument("froc: no lesions in ground truth");

  struct Event {
    double conf;
    int lesion;  // global lesion id, or -1 for a false positive
  };
  std::vector<Event> events;
  for (std::size_t s = 0; s < detections.size(); ++s) {
    for (const auto& d : detections[s]) {
      const int pi = static_cast<int>(std::lround(d.i));
      const int pj = static_cast<int>(std::lround(d.j));
      int lesion = -1;
      if (pi >= 0 && pj >= 0 && pi < lesion_labels[s].height && pj < lesion_labels[s].width) {
        const int local = lesion_labels[s].at(pi, pj);
        if (local >= 0) lesion = lesion_base[s] + local;
      }
      events.push_back({d.confidence, lesion});
    }
  }
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.conf > b.conf; });

  // Sweep thresholds downward; record (mean fp/slide, sensitivity) after
  // each group of equal-confidence events.
  std::vector<char> credited(static_cast<std::size_t>(total_lesions), 0);
  long tp = 0, fp = 0;
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  std::size_t i = 0;
  while (i < events.size()) {
    std::size_t j = i;
    while (j < events.size() && events[j].conf == events[i].conf) ++j;
    for (std::size_t t = i; t < j; ++t) {
      if (events[t].lesion < 0) {
        ++fp;
      } else if (!credited[static_cast<std::size_t>(events[t].lesion)]) {
        credited[static_cast<std::size_t>(events[t].lesion)] = 1;
        ++tp;
      }
    }
    curve.emplace_back(static_cast<double>(fp) / n_slides,
                       static_cast<double>(tp) / static_cast<double>(total_lesions));
    i = j;
  }

  FrocResult res;
  double sum = 0.0;
  for (std::size_t p = 0; p < kFrocFpPoints.size(); ++p) {
    double best = 0.0;
    for (const auto& [fpr, sens] : curve)
      if (fpr <= kFrocFpPoints[p]) best = std::max(best, sens);
    res.sensitivity[p] = best;
    sum += best;
  }
  res.average = sum / static_cast<double>(kFrocFpPoints.size());
  res.curve = std::move(curve);
  return res;
}

struct OverlapScores {
  double dice = 1.0;
  double iou = 1.0;
};

// Dice and IoU of the thresholded map against the ground truth; both are 1
// when prediction and truth are both empty.
inline OverlapScores pixel_overlap(const ProbMap& q, const Image<std::uint8_t>& truth,
                                   double threshold = 0.5) {
  if (q.height != truth.height || q.width != truth.width)
    throw std::invalid_argument("pixel_overlap: shape mismatch");
  long inter = 0, pred = 0, pos = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const bool p = q.v[i] > threshold;
    const bool t = truth.v[i] != 0;
    inter += p && t;
    pred += p;
    pos += t;
  }
  OverlapScores s;
  if (pred + pos == 0) return s;  // empty-vs-empty
  s.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(pred + pos);
  const long uni = pred + pos - inter;
  s.iou = static_cast<double>(inter) / static_cast<double>(uni);
  return s;
}

}  // namespace weakseg
