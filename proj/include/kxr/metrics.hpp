// Confusion-matrix bookkeeping and the derived rates. Rates with a zero
// denominator come back absent, carrying the reason instead of a NaN.
#pragma once

#include <optional>

#include "kxr/losses.hpp"
#include "kxr/types.hpp"

namespace kxr {

struct ConfusionMatrix {
  uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct MetricValue {
  std::optional<double> value;
  std::string note;  // reason when absent

  bool present() const { return value.has_value(); }
  double get() const {
    if (!value) throw UsageError("metric is absent: " + note);
    return *value;
  }
};

namespace detail {
inline MetricValue rate(uint64_t num, uint64_t den, const std::string& reason) {
  if (den == 0) return {std::nullopt, reason};
  return {static_cast<double>(num) / static_cast<double>(den), ""};
}
}  // namespace detail

inline MetricValue precision(const ConfusionMatrix& m) {
  return detail::rate(m.tp, m.tp + m.fp, "no positive predictions");
}
inline MetricValue recall(const ConfusionMatrix& m) {
  return detail::rate(m.tp, m.tp + m.fn, "no positive ground truth");
}
inline MetricValue specificity(const ConfusionMatrix& m) {
  return detail::rate(m.tn, m.tn + m.fp, "no negative ground truth");
}
inline MetricValue npv(const ConfusionMatrix& m) {
  return detail::rate(m.tn, m.tn + m.fn, "no negative predictions");
}
inline MetricValue accuracy(const ConfusionMatrix& m) {
  return detail::rate(m.tp + m.tn, m.total(), "no samples");
}
inline MetricValue f1(const ConfusionMatrix& m) {
  const MetricValue p = precision(m), r = recall(m);
  if (!p.present()) return p;
  if (!r.present()) return r;
  const double s = p.get() + r.get();
  if (s == 0.0) return {std::nullopt, "precision and recall both zero"};
  return {2.0 * p.get() * r.get() / s, ""};
}

// Boxes matched greedily in confidence order; a true negative has no meaning
// for detection, so the tally carries none.
struct DetectionTally {
  uint64_t tp = 0, fp = 0, fn = 0;
  DetectionTally& operator+=(const DetectionTally& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const DetectionTally&) const = default;
  ConfusionMatrix as_confusion() const { return {tp, fp, 0, fn}; }
};

struct ScoredBox {
  BoundingBox box;
  double confidence = 0.0;
};

inline DetectionTally match_detections(std::vector<ScoredBox> preds,
                                       const std::vector<BoundingBox>& gts,
                                       double iou_threshold = 0.5) {
  if (iou_threshold <= 0.0 || iou_threshold > 1.0)
    throw UsageError("match: iou threshold outside (0,1]");
  std::stable_sort(preds.begin(), preds.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.confidence > b.confidence; });
  std::vector<bool> taken(gts.size(), false);
  DetectionTally t;
  for (const ScoredBox& p : preds) {
    int best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(p.box, gts[g]);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++t.tp;
    } else {
      ++t.fp;
    }
  }
  for (bool used : taken)
    if (!used) ++t.fn;
  return t;
}

// Overlap of two masks in absolute image coordinates. Empty vs empty is a
// perfect agreement.
inline double dice_similarity(const Mask& a, const Mask& b) {
  const uint64_t ca = a.count(), cb = b.count();
  if (ca + cb == 0) return 1.0;
  const int y0 = std::max(a.y0, b.y0), y1 = std::min(a.y0 + a.height, b.y0 + b.height);
  const int x0 = std::max(a.x0, b.x0), x1 = std::min(a.x0 + a.width, b.x0 + b.width);
  uint64_t inter = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      if (a.at(y - a.y0, x - a.x0) && b.at(y - b.y0, x - b.x0)) ++inter;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

inline double regression_mse(const std::vector<double>& preds, const std::vector<double>& targets) {
  return losses::mse(preds, targets);
}

// Per-scan presence call from findings vs. ground truth, accumulated into a
// confusion cell.
inline void tally_presence(ConfusionMatrix& m, bool predicted, bool actual) {
  if (predicted && actual) ++m.tp;
  else if (predicted && !actual) ++m.fp;
  else if (!predicted && actual) ++m.fn;
  else ++m.tn;
}

}  // namespace kxr
