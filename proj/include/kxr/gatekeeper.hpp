// Intake cascade: modality -> anatomy -> view -> rotation. Each stage is a
// pluggable scoring hook; the cascade stops at the first rejection and only
// then do downstream models ever see the scan.
#pragma once

#include <functional>

#include "kxr/detector.hpp"
#include "kxr/image.hpp"
#include "kxr/types.hpp"

namespace kxr {

struct GateThresholds {
  double modality = 0.5;
  double anatomy = 0.5;
  double view = 0.5;
};

struct GateHooks {
  std::function<double(const Image&)> modality;        // P(radiograph)
  std::function<double(const Image&)> anatomy;         // P(knee)
  std::function<ViewDecision(const Image&)> view;      // best view + confidence
  std::function<KeypointSet(const Image&)> landmarks;  // joint landmarks
};

// In-plane tilt of the joint line, in degrees: the average inclination of the
// condyle pair and the plateau pair. Positive when the right side sits lower.
inline double rotation_angle(const KeypointSet& kp) {
  const std::array<std::pair<Point, Point>, 2> pairs{
      std::make_pair(kp.femoral_condyle_left, kp.femoral_condyle_right),
      std::make_pair(kp.tibial_plateau_left, kp.tibial_plateau_right)};
  double sum = 0;
  for (const auto& [l, r] : pairs) {
    const double dx = r.x - l.x, dy = r.y - l.y;
    if (std::hypot(dx, dy) < 1e-6) throw UsageError("rotation angle: degenerate landmark pair");
    sum += std::atan2(dy, dx);
  }
  return rad_to_deg(sum / 2.0);
}

// Undo a measured in-plane angle. A zero angle is the identity.
inline Image correct_rotation(const Image& img, double measured_angle_deg) {
  return rotate_raster(img, -measured_angle_deg);
}

struct GateOutcome {
  GateResult result;
  std::optional<Image> corrected;  // rotation-corrected image, on acceptance
  std::optional<KeypointSet> landmarks;
};

inline GateOutcome run_gate(const Image& img, const GateHooks& hooks,
                            const GateThresholds& th = {}) {
  if (!hooks.modality || !hooks.anatomy || !hooks.view || !hooks.landmarks)
    throw UsageError("gate: all four stage hooks must be set");
  GateOutcome o;
  const double pm = hooks.modality(img);
  o.result.is_xray = StageDecision{pm >= th.modality, pm};
  if (!o.result.is_xray->accept) {
    o.result.rejected_at = "modality";
    return o;
  }
  const double pa = hooks.anatomy(img);
  o.result.is_knee = StageDecision{pa >= th.anatomy, pa};
  if (!o.result.is_knee->accept) {
    o.result.rejected_at = "anatomy";
    return o;
  }
  const ViewDecision vd = hooks.view(img);
  if (vd.confidence < th.view) {
    o.result.rejected_at = "view";
    return o;
  }
  o.result.view = vd;
  double measured = 0;
  try {
    const KeypointSet kp = hooks.landmarks(img);
    measured = rotation_angle(kp);
    o.landmarks = kp;
  } catch (const UsageError&) {
    o.result.rejected_at = "rotation";
    return o;
  }
  o.result.rotation_applied = -measured;
  o.corrected = correct_rotation(img, measured);
  return o;
}

// ---- Hooks backed by trained models ----

// Recipe for the lightweight binary classifiers behind the modality, anatomy
// and view stages. They run on small thumbnails, so a shallow net suffices.
inline TrainingConfig gate_stage_config(int input = 64) {
  TrainingConfig c;
  c.pathology = "gate";
  c.task = "classification";
  c.input_h = c.input_w = input;
  c.loss_terms = {"cross_entropy"};
  c.optimizer.kind = "adam";
  c.schedule.kind = "constant";
  c.schedule.base = 0.001;
  c.batch_size = 32;
  c.num_classes = 2;
  c.base_channels = 8;
  return c;
}

// Binary classification model -> probability of the positive class.
inline std::function<double(const Image&)> stage_hook(TaskModel& model) {
  if (model.config.task != "classification" || model.config.num_classes != 2)
    throw UsageError("gate: stage model must be a binary classifier");
  return [&model](const Image& img) {
    Prediction p = predict(model, img);
    return p.grade->probs[1];
  };
}

inline std::function<ViewDecision(const Image&)> view_hook(TaskModel& model) {
  if (model.config.task != "classification" || model.config.num_classes != 2)
    throw UsageError("gate: view model must classify AP vs Lateral");
  return [&model](const Image& img) {
    Prediction p = predict(model, img);
    const bool lateral = p.grade->probs[1] > p.grade->probs[0];
    return ViewDecision{lateral ? "Lateral" : "AP",
                        lateral ? p.grade->probs[1] : p.grade->probs[0]};
  };
}

inline std::function<KeypointSet(const Image&)> landmark_hook(TaskModel& model) {
  if (model.config.task != "keypoint+classification")
    throw UsageError("gate: landmark model must be a keypoint model");
  return [&model](const Image& img) { return predict(model, img).landmarks->points; };
}

// Reference hooks that read phantom-style geometry directly; useful as a
// deterministic baseline and for exercising the cascade without training.
inline GateHooks synthetic_hooks(const std::function<KeypointSet(const Image&)>& landmarks) {
  GateHooks h;
  // radiograph-like: dark background with a bright, connected structure
  h.modality = [](const Image& img) {
    double lo = 0, hi = 0;
    for (float v : img.pixels) {
      lo += v < 0.12 ? 1.0 : 0.0;
      hi += v > 0.35 ? 1.0 : 0.0;
    }
    lo /= img.pixels.size();
    hi /= img.pixels.size();
    return std::clamp(2.0 * std::min(lo, 0.5) * std::min(4.0 * hi, 1.0), 0.0, 1.0);
  };
  // knee: two bright bands separated by a dark joint gap near mid-height
  h.anatomy = [](const Image& img) {
    std::vector<double> rowmean(img.height, 0.0);
    for (int y = 0; y < img.height; ++y) {
      double s = 0;
      for (int x = 0; x < img.width; ++x) s += img.at(y, x);
      rowmean[y] = s / img.width;
    }
    const int y0 = static_cast<int>(0.25 * img.height), y1 = static_cast<int>(0.75 * img.height);
    // the bands must be reachable from mid-gap, so span half the widest gap
    const int reach = std::max(12, static_cast<int>(0.11 * img.height));
    double best = 0;
    for (int y = y0; y < y1; ++y) {
      double above = 0, below = 0;
      for (int i = std::max(0, y - reach); i < y; ++i) above = std::max(above, rowmean[i]);
      for (int i = y + 1; i < std::min(img.height, y + reach + 1); ++i)
        below = std::max(below, rowmean[i]);
      const double contrast = std::min(above, below) - rowmean[y];
      best = std::max(best, contrast);
    }
    return std::clamp(best * 12.0, 0.0, 1.0);
  };
  h.view = [](const Image& img) {
    // Lateral phantoms carry the patellar lobe near the image edge
    const int x0 = static_cast<int>(0.83 * img.width), x1 = static_cast<int>(0.93 * img.width);
    const int ya = static_cast<int>(0.22 * img.height), yb = static_cast<int>(0.38 * img.height);
    double s = 0;
    for (int y = ya; y < yb; ++y)
      for (int x = x0; x < x1; ++x) s += img.at(y, x);
    const double mean = s / std::max(1, (yb - ya) * (x1 - x0));
    const double p_lat = std::clamp((mean - 0.10) / 0.25, 0.0, 1.0);
    return p_lat > 0.5 ? ViewDecision{"Lateral", p_lat} : ViewDecision{"AP", 1.0 - p_lat};
  };
  h.landmarks = landmarks;
  return h;
}

}  // namespace kxr
