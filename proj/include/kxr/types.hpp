// Domain vocabulary: scans, annotations, gate results, findings.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "kxr/common.hpp"
#include "kxr/image.hpp"

namespace kxr {

namespace meta {
inline const std::vector<std::string>& age_groups() {
  static const std::vector<std::string> v{"18-40", "40-60", "60-75", "75+"};
  return v;
}
inline const std::vector<std::string>& genders() {
  static const std::vector<std::string> v{"Male", "Female"};
  return v;
}
inline const std::vector<std::string>& manufacturers() {
  static const std::vector<std::string> v{"GE Healthcare", "Siemens", "Philips", "Others"};
  return v;
}
inline const std::vector<std::string>& views() {
  static const std::vector<std::string> v{"AP", "Lateral", "Unknown"};
  return v;
}
inline bool contains(const std::vector<std::string>& values, const std::string& v) {
  for (const auto& s : values)
    if (s == v) return true;
  return false;
}
}  // namespace meta

// Acquisition metadata. Fields hold values from closed enumerations; use
// validate_scan / manifest parsing to enforce membership.
struct ScanMeta {
  std::string age_group = "18-40";
  std::string gender = "Male";
  std::string manufacturer = "Others";
  std::string view = "Unknown";

  bool operator==(const ScanMeta&) const = default;
};

struct Scan {
  std::string id;
  Image image;
  ScanMeta meta;
};

struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool valid() const { return x_min < x_max && y_min < y_max && x_min >= 0 && y_min >= 0; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }

  bool operator==(const BoundingBox&) const = default;
};

// Intersection-over-union on continuous box area.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Binary raster anchored at (x0, y0) in image coordinates.
struct Mask {
  int x0 = 0, y0 = 0;
  int height = 0, width = 0;
  std::vector<uint8_t> data;  // values in {0,1}, row-major

  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
  BoundingBox bounds() const {
    return {static_cast<double>(x0), static_cast<double>(y0),
            static_cast<double>(x0 + width), static_cast<double>(y0 + height)};
  }

  bool operator==(const Mask&) const = default;
};

// Landmark names, in canonical serialization order.
inline const std::array<const char*, 4>& keypoint_names() {
  static const std::array<const char*, 4> names{
      "tibial_plateau_left", "tibial_plateau_right",
      "femoral_condyle_left", "femoral_condyle_right"};
  return names;
}

struct KeypointSet {
  Point tibial_plateau_left, tibial_plateau_right;
  Point femoral_condyle_left, femoral_condyle_right;

  std::array<Point, 4> points() const {
    return {tibial_plateau_left, tibial_plateau_right,
            femoral_condyle_left, femoral_condyle_right};
  }
  void set(size_t i, const Point& p) {
    switch (i) {
      case 0: tibial_plateau_left = p; break;
      case 1: tibial_plateau_right = p; break;
      case 2: femoral_condyle_left = p; break;
      default: femoral_condyle_right = p; break;
    }
  }
};

struct JointSpaceWidths {
  double medial = 0, lateral = 0;
};

struct AlignmentAnnotation {
  KeypointSet keypoints;
  double varus_valgus_angle = 0;  // degrees
  bool misaligned = false;
};

struct AnnotationSet {
  std::optional<JointSpaceWidths> joint_space_widths;
  std::vector<BoundingBox> sclerosis_boxes;
  std::vector<BoundingBox> osteophyte_boxes;
  std::vector<Mask> implant_masks;
  std::optional<AlignmentAnnotation> alignment;
  std::vector<Mask> soft_tissue_masks;
  std::vector<BoundingBox> tibial_spike_boxes;
  std::optional<int> oa_grade;  // {0,1,2,3}
};

// ---- Gate ----

inline const std::array<const char*, 4>& gate_stage_names() {
  static const std::array<const char*, 4> names{"modality", "anatomy", "view", "rotation"};
  return names;
}

struct StageDecision {
  bool accept = false;
  double confidence = 0;  // probability of the accepting class
};

struct ViewDecision {
  std::string view = "AP";  // "AP" | "Lateral"
  double confidence = 0;
};

struct GateResult {
  std::optional<StageDecision> is_xray;
  std::optional<StageDecision> is_knee;
  std::optional<ViewDecision> view;
  std::optional<double> rotation_applied;  // degrees
  std::optional<std::string> rejected_at;  // stage name
};

struct LandmarkPrediction {
  KeypointSet points;
  std::array<double, 4> confidence{1, 1, 1, 1};  // same order as keypoint_names()
};

// ---- Findings ----

using Region = std::variant<BoundingBox, Mask>;

struct Finding {
  Region region;
  double confidence = 0;
};

struct AlignmentPrediction {
  double angle = 0;  // degrees
  double misaligned_prob = 0;
};

struct GradeOutput {
  std::array<double, 4> probs{};
  int grade = 0;
};

struct FindingReport {
  std::string scan_id;
  GateResult gate;
  std::map<std::string, std::vector<Finding>> findings;  // pathology -> findings
  std::optional<JointSpaceWidths> joint_space_pred;
  std::optional<AlignmentPrediction> alignment_pred;
  std::optional<GradeOutput> grade;
};

// ---- Validation (reports violations, never throws) ----

inline std::vector<std::string> validate_meta(const ScanMeta& m) {
  std::vector<std::string> out;
  if (!meta::contains(meta::age_groups(), m.age_group))
    out.push_back("meta.age_group: not in enumeration");
  if (!meta::contains(meta::genders(), m.gender))
    out.push_back("meta.gender: not in enumeration");
  if (!meta::contains(meta::manufacturers(), m.manufacturer))
    out.push_back("meta.manufacturer: not in enumeration");
  if (!meta::contains(meta::views(), m.view))
    out.push_back("meta.view: not in enumeration");
  return out;
}

inline std::vector<std::string> validate_scan(const Scan& scan) {
  std::vector<std::string> out;
  if (scan.id.empty()) out.push_back("id: empty");
  if (scan.image.height < 64 || scan.image.width < 64)
    out.push_back("image: smaller than 64x64");
  if (scan.image.has_nonfinite()) {
    out.push_back("image: non-finite value");
  } else {
    for (float v : scan.image.pixels) {
      if (v < 0.0f || v > 1.0f) {
        out.push_back("image: intensity outside [0,1]");
        break;
      }
    }
  }
  for (auto& v : validate_meta(scan.meta)) out.push_back(v);
  return out;
}

inline std::vector<std::string> validate_annotations(const AnnotationSet& a, const Image* image = nullptr) {
  std::vector<std::string> out;
  if (a.joint_space_widths) {
    if (a.joint_space_widths->medial <= 0 || a.joint_space_widths->lateral <= 0)
      out.push_back("joint_space_widths: must be positive");
  }
  auto check_boxes = [&](const std::vector<BoundingBox>& boxes, const char* field) {
    for (const auto& b : boxes)
      if (!b.valid()) {
        out.push_back(std::string(field) + ": invalid box");
        break;
      }
  };
  check_boxes(a.sclerosis_boxes, "sclerosis_boxes");
  check_boxes(a.osteophyte_boxes, "osteophyte_boxes");
  check_boxes(a.tibial_spike_boxes, "tibial_spike_boxes");
  if (a.alignment) {
    const double ang = a.alignment->varus_valgus_angle;
    if (ang < -45.0 || ang > 45.0) out.push_back("alignment.varus_valgus_angle: outside [-45,45]");
    if (image) {
      for (const auto& p : a.alignment->keypoints.points()) {
        if (p.x < 0 || p.y < 0 || p.x >= image->width || p.y >= image->height) {
          out.push_back("alignment.keypoints: outside image bounds");
          break;
        }
      }
    }
    const auto& kp = a.alignment->keypoints;
    if (kp.tibial_plateau_left.x >= kp.tibial_plateau_right.x ||
        kp.femoral_condyle_left.x >= kp.femoral_condyle_right.x)
      out.push_back("alignment.keypoints: left/right pair order violated");
  }
  if (a.oa_grade && (*a.oa_grade < 0 || *a.oa_grade > 3))
    out.push_back("oa_grade: not in {0,1,2,3}");
  auto check_masks = [&](const std::vector<Mask>& masks, const char* field) {
    for (const auto& m : masks)
      for (uint8_t v : m.data)
        if (v > 1) {
          out.push_back(std::string(field) + ": values not in {0,1}");
          return;
        }
  };
  check_masks(a.implant_masks, "implant_masks");
  check_masks(a.soft_tissue_masks, "soft_tissue_masks");
  return out;
}

inline std::vector<std::string> validate_finding_report(const FindingReport& r) {
  std::vector<std::string> out;
  if (r.scan_id.empty()) out.push_back("scan_id: empty");
  if (r.gate.rejected_at) {
    // stages after the rejecting one must be absent
    const auto& names = gate_stage_names();
    int reject_idx = 0;
    for (int i = 0; i < 4; ++i)
      if (*r.gate.rejected_at == names[i]) reject_idx = i;
    if (reject_idx < 1 && r.gate.is_knee) out.push_back("gate: is_knee present after rejection");
    if (reject_idx < 2 && r.gate.view) out.push_back("gate: view present after rejection");
    if (reject_idx < 3 && r.gate.rotation_applied)
      out.push_back("gate: rotation present after rejection");
    if (!r.findings.empty()) out.push_back("findings: present on rejected scan");
  }
  for (const auto& [pathology, findings] : r.findings) {
    for (const auto& f : findings)
      if (f.confidence < 0.0 || f.confidence > 1.0) {
        out.push_back(pathology + ": confidence outside [0,1]");
        break;
      }
  }
  if (r.alignment_pred &&
      (r.alignment_pred->misaligned_prob < 0 || r.alignment_pred->misaligned_prob > 1))
    out.push_back("alignment_pred.misaligned_prob: outside [0,1]");
  if (r.grade) {
    double sum = 0;
    int argmax = 0;
    for (int i = 0; i < 4; ++i) {
      if (r.grade->probs[i] < 0) out.push_back("grade_probs: negative entry");
      sum += r.grade->probs[i];
      if (r.grade->probs[i] > r.grade->probs[argmax]) argmax = i;
    }
    if (std::abs(sum - 1.0) > 1e-6) out.push_back("grade_probs: sum differs from 1");
    if (r.grade->grade != argmax) out.push_back("grade: not the argmax of grade_probs");
  }
  return out;
}

}  // namespace kxr
