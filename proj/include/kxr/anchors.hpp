// Anchor generation, ground-truth matching, box delta coding, and NMS.
#pragma once

#include <vector>

#include "kxr/types.hpp"

namespace kxr {

struct Anchor {
  double cx = 0, cy = 0;
  double width = 0, height = 0;

  BoundingBox box() const {
    return {cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2};
  }
};

// One anchor per (cell, scale, ratio). area = scale^2, height/width = ratio.
inline std::vector<Anchor> anchor_grid(int input_h, int input_w, int stride,
                                       const std::vector<double>& scales,
                                       const std::vector<double>& ratios) {
  if (stride < 1 || input_h % stride != 0 || input_w % stride != 0)
    throw UsageError("anchor_grid: stride must divide both input dimensions");
  if (scales.empty() || ratios.empty()) throw UsageError("anchor_grid: empty scales or ratios");
  for (double s : scales)
    if (!(s > 0)) throw UsageError("anchor_grid: scales must be positive");
  for (double r : ratios)
    if (!(r > 0)) throw UsageError("anchor_grid: ratios must be positive");
  std::vector<Anchor> out;
  out.reserve(static_cast<size_t>(input_h / stride) * (input_w / stride) * scales.size() *
              ratios.size());
  for (int gy = 0; gy < input_h / stride; ++gy) {
    for (int gx = 0; gx < input_w / stride; ++gx) {
      const double cx = (gx + 0.5) * stride;
      const double cy = (gy + 0.5) * stride;
      for (double scale : scales) {
        for (double ratio : ratios) {
          // h * w = scale^2 with h / w = ratio
          const double w = scale / std::sqrt(ratio);
          const double h = scale * std::sqrt(ratio);
          out.push_back({cx, cy, w, h});
        }
      }
    }
  }
  return out;
}

struct AnchorMatch {
  enum Kind { Negative = -1, Ignore = -2 };
  // >= 0: index of the matched gt box; otherwise one of the Kind values.
  std::vector<int> assignment;

  bool is_positive(size_t i) const { return assignment[i] >= 0; }
};

// IoU-threshold assignment with each gt's best anchor forced positive.
inline AnchorMatch match_anchors(const std::vector<Anchor>& anchors,
                                 const std::vector<BoundingBox>& gt_boxes, double pos_iou,
                                 double neg_iou) {
  if (!(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0))
    throw UsageError("match_anchors: need 0 <= neg_iou <= pos_iou <= 1");
  AnchorMatch m;
  m.assignment.assign(anchors.size(), AnchorMatch::Negative);
  if (gt_boxes.empty()) return m;

  std::vector<double> best_gt_iou(gt_boxes.size(), 0.0);
  std::vector<int> best_gt_anchor(gt_boxes.size(), -1);
  for (size_t a = 0; a < anchors.size(); ++a) {
    const BoundingBox ab = anchors[a].box();
    double best = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(ab, gt_boxes[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
      if (v > best_gt_iou[g]) {
        best_gt_iou[g] = v;
        best_gt_anchor[g] = static_cast<int>(a);
      }
    }
    if (best >= pos_iou)
      m.assignment[a] = best_gt;
    else if (best >= neg_iou)
      m.assignment[a] = AnchorMatch::Ignore;
  }
  for (size_t g = 0; g < gt_boxes.size(); ++g)
    if (best_gt_anchor[g] >= 0 && best_gt_iou[g] > 0.0)
      m.assignment[best_gt_anchor[g]] = static_cast<int>(g);
  return m;
}

// Box regression targets: (dx/aw, dy/ah, log(gw/aw), log(gh/ah)).
inline std::array<double, 4> encode_box(const Anchor& a, const BoundingBox& gt) {
  return {(gt.cx() - a.cx) / a.width, (gt.cy() - a.cy) / a.height,
          std::log(gt.width() / a.width), std::log(gt.height() / a.height)};
}

inline BoundingBox decode_box(const Anchor& a, const std::array<double, 4>& d) {
  const double cx = a.cx + d[0] * a.width;
  const double cy = a.cy + d[1] * a.height;
  const double w = a.width * std::exp(std::clamp(d[2], -6.0, 6.0));
  const double h = a.height * std::exp(std::clamp(d[3], -6.0, 6.0));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

// Greedy NMS over confidence-sorted candidates. Returns kept indices.
inline std::vector<size_t> nms(const std::vector<BoundingBox>& boxes,
                               const std::vector<double>& scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw UsageError("nms: boxes/scores length mismatch");
  std::vector<size_t> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::vector<size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) >= iou_threshold) suppressed[j] = true;
    }
  }
  return keep;
}

}  // namespace kxr
