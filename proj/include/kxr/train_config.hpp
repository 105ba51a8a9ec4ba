// Per-task training recipes: input size, loss composition, optimizer,
// schedule, anchors, augmentation. builtin_config() returns the shipped
// recipe for each pathology model.
#pragma once

#include <optional>

#include "kxr/schedules.hpp"
#include "kxr/serialize.hpp"

namespace kxr {

struct OptimizerConfig {
  std::string kind = "adam";  // adam | sgd_momentum | adamw
  double momentum = 0.9;      // sgd_momentum only
  double weight_decay = 0.01; // adamw only
};

struct ScheduleConfig {
  std::string kind = "constant";  // constant | step | cyclical
  double base = 0.001;            // constant/step base LR
  double factor = 0.1;            // step decay factor
  int period_epochs = 10;         // step period
  double lr_min = 1e-4;           // cyclical bounds
  double lr_max = 1e-2;
  int period_iters = 200;         // cyclical period, iterations

  double lr_at(int epoch, int64_t iter) const {
    if (kind == "constant") return base;
    if (kind == "step") return step_lr(epoch, base, factor, period_epochs);
    if (kind == "cyclical") return cyclical_lr(iter, lr_min, lr_max, period_iters);
    throw UsageError("schedule: unknown kind \"" + kind + "\"");
  }
};

struct AugmentConfig {
  bool rotations = false;
  bool flips = false;
  bool brightness = false;
  bool scaling = false;
  double rotation_max_deg = 10.0;
  double brightness_delta = 0.2;
  double scale_delta = 0.1;
  double prob = 0.5;  // chance each enabled transform fires

  bool any() const { return rotations || flips || brightness || scaling; }
};

struct AnchorSettings {
  int stride = 16;  // power of two; sets backbone depth for detection
  std::vector<double> scales{32, 64, 128};
  std::vector<double> ratios{1.0, 0.5, 2.0};  // height:width
  double pos_iou = 0.5;
  double neg_iou = 0.3;
};

struct TrainingConfig {
  std::string pathology;
  std::string task;  // regression | detection | segmentation | keypoint+classification | classification
  int input_h = 256;
  int input_w = 256;
  std::vector<std::string> loss_terms;  // e.g. {"focal","smooth_l1"}
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  int batch_size = 32;
  double dropout_rate = 0.0;
  std::optional<AnchorSettings> anchors;
  AugmentConfig augment;
  int base_channels = 8;         // backbone width
  int num_classes = 0;           // classification heads
  double confidence_threshold = 0.5;
  double nms_iou = 0.5;

  void validate() const {
    static const std::vector<std::string> tasks{"regression", "detection", "segmentation",
                                                "keypoint+classification", "classification"};
    if (std::find(tasks.begin(), tasks.end(), task) == tasks.end())
      throw UsageError("config: unknown task \"" + task + "\"");
    if (input_h < 16 || input_w < 16) throw UsageError("config: input size below 16x16");
    if (batch_size < 1) throw UsageError("config: batch_size must be >= 1");
    if (loss_terms.empty()) throw UsageError("config: no loss terms");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw UsageError("config: dropout_rate outside [0,1)");
    if (optimizer.kind != "adam" && optimizer.kind != "sgd_momentum" && optimizer.kind != "adamw")
      throw UsageError("config: unknown optimizer \"" + optimizer.kind + "\"");
    if (schedule.kind == "constant" || schedule.kind == "step") {
      if (!(schedule.base > 0)) throw UsageError("config: base LR must be positive");
    } else if (schedule.kind == "cyclical") {
      if (!(schedule.lr_min > 0 && schedule.lr_min < schedule.lr_max))
        throw UsageError("config: cyclical LR bounds must satisfy 0 < min < max");
    } else {
      throw UsageError("config: unknown schedule \"" + schedule.kind + "\"");
    }
    if (base_channels < 1 || base_channels > 64)
      throw UsageError("config: base_channels outside [1,64]");
    if (task == "detection") {
      if (!anchors) throw UsageError("config: detection needs anchor settings");
      const int s = anchors->stride;
      if (s < 4 || (s & (s - 1)) != 0) throw UsageError("config: anchor stride must be a power of two >= 4");
      if (input_h % s != 0 || input_w % s != 0)
        throw UsageError("config: anchor stride must divide the input size");
      if (anchors->scales.empty() || anchors->ratios.empty())
        throw UsageError("config: empty anchor scales or ratios");
    }
    if (task == "classification" && num_classes < 2)
      throw UsageError("config: classification needs num_classes >= 2");
  }
};

inline json to_json(const OptimizerConfig& o) {
  json j{{"kind", o.kind}};
  if (o.kind == "sgd_momentum") j["momentum"] = o.momentum;
  if (o.kind == "adamw") j["weight_decay"] = o.weight_decay;
  return j;
}
inline OptimizerConfig optimizer_from_json(const json& j) {
  OptimizerConfig o;
  o.kind = j.value("kind", o.kind);
  o.momentum = j.value("momentum", o.momentum);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  return o;
}

inline json to_json(const ScheduleConfig& s) {
  if (s.kind == "constant") return {{"kind", s.kind}, {"base", s.base}};
  if (s.kind == "step")
    return {{"kind", s.kind}, {"base", s.base}, {"factor", s.factor}, {"period_epochs", s.period_epochs}};
  return {{"kind", s.kind}, {"lr_min", s.lr_min}, {"lr_max", s.lr_max}, {"period_iters", s.period_iters}};
}
inline ScheduleConfig schedule_from_json(const json& j) {
  ScheduleConfig s;
  s.kind = j.value("kind", s.kind);
  s.base = j.value("base", s.base);
  s.factor = j.value("factor", s.factor);
  s.period_epochs = j.value("period_epochs", s.period_epochs);
  s.lr_min = j.value("lr_min", s.lr_min);
  s.lr_max = j.value("lr_max", s.lr_max);
  s.period_iters = j.value("period_iters", s.period_iters);
  return s;
}

inline json to_json(const AugmentConfig& a) {
  return {{"rotations", a.rotations}, {"flips", a.flips},           {"brightness", a.brightness},
          {"scaling", a.scaling},     {"rotation_max_deg", a.rotation_max_deg},
          {"brightness_delta", a.brightness_delta}, {"scale_delta", a.scale_delta},
          {"prob", a.prob}};
}
inline AugmentConfig augment_from_json(const json& j) {
  AugmentConfig a;
  a.rotations = j.value("rotations", a.rotations);
  a.flips = j.value("flips", a.flips);
  a.brightness = j.value("brightness", a.brightness);
  a.scaling = j.value("scaling", a.scaling);
  a.rotation_max_deg = j.value("rotation_max_deg", a.rotation_max_deg);
  a.brightness_delta = j.value("brightness_delta", a.brightness_delta);
  a.scale_delta = j.value("scale_delta", a.scale_delta);
  a.prob = j.value("prob", a.prob);
  return a;
}

inline json to_json(const AnchorSettings& a) {
  return {{"stride", a.stride}, {"scales", a.scales},   {"ratios", a.ratios},
          {"pos_iou", a.pos_iou}, {"neg_iou", a.neg_iou}};
}
inline AnchorSettings anchors_from_json(const json& j) {
  AnchorSettings a;
  a.stride = j.value("stride", a.stride);
  if (j.contains("scales")) a.scales = j["scales"].get<std::vector<double>>();
  if (j.contains("ratios")) a.ratios = j["ratios"].get<std::vector<double>>();
  a.pos_iou = j.value("pos_iou", a.pos_iou);
  a.neg_iou = j.value("neg_iou", a.neg_iou);
  return a;
}

inline json to_json(const TrainingConfig& c) {
  json j{{"pathology", c.pathology},
         {"task", c.task},
         {"input_size", {c.input_h, c.input_w}},
         {"loss_terms", c.loss_terms},
         {"optimizer", to_json(c.optimizer)},
         {"schedule", to_json(c.schedule)},
         {"batch_size", c.batch_size},
         {"dropout_rate", c.dropout_rate},
         {"augment", to_json(c.augment)},
         {"base_channels", c.base_channels},
         {"confidence_threshold", c.confidence_threshold},
         {"nms_iou", c.nms_iou}};
  if (c.anchors) j["anchors"] = to_json(*c.anchors);
  if (c.num_classes > 0) j["num_classes"] = c.num_classes;
  return j;
}
inline TrainingConfig training_config_from_json(const json& j) {
  TrainingConfig c;
  c.pathology = j.value("pathology", c.pathology);
  c.task = j.value("task", c.task);
  if (j.contains("input_size")) {
    c.input_h = j["input_size"].at(0).get<int>();
    c.input_w = j["input_size"].at(1).get<int>();
  }
  if (j.contains("loss_terms")) c.loss_terms = j["loss_terms"].get<std::vector<std::string>>();
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j["optimizer"]);
  if (j.contains("schedule")) c.schedule = schedule_from_json(j["schedule"]);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  if (j.contains("anchors")) c.anchors = anchors_from_json(j["anchors"]);
  if (j.contains("augment")) c.augment = augment_from_json(j["augment"]);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  return c;
}

// The shipped recipe for each pathology model.
inline TrainingConfig builtin_config(const std::string& pathology) {
  TrainingConfig c;
  c.pathology = pathology;
  if (pathology == "joint_space") {
    c.task = "regression";
    c.input_h = c.input_w = 256;
    c.loss_terms = {"mse"};
    c.optimizer.kind = "adam";
    c.schedule = {"step", 0.001, 0.1, 10};
    c.batch_size = 32;
    c.dropout_rate = 0.5;
  } else if (pathology == "sclerosis") {
    c.task = "detection";
    c.input_h = c.input_w = 512;
    c.loss_terms = {"bce", "smooth_l1"};
    c.optimizer.kind = "sgd_momentum";
    c.optimizer.momentum = 0.9;
    c.schedule = {"constant", 0.01};
    c.batch_size = 16;
    c.anchors = AnchorSettings{};
    c.anchors->scales = {32, 64, 128};
    c.anchors->ratios = {1.0, 0.5, 2.0};
  } else if (pathology == "osteophytes") {
    c.task = "detection";
    c.input_h = c.input_w = 320;
    c.loss_terms = {"focal", "smooth_l1"};
    c.optimizer.kind = "sgd_momentum";
    c.optimizer.momentum = 0.9;
    c.schedule.kind = "cyclical";
    c.schedule.lr_min = 1e-4;
    c.schedule.lr_max = 1e-2;
    c.batch_size = 32;
    c.anchors = AnchorSettings{};
    c.anchors->scales = {16, 32, 64};
    c.anchors->ratios = {1.0, 0.5, 2.0};
  } else if (pathology == "postop") {
    c.task = "segmentation";
    c.input_h = c.input_w = 256;
    c.loss_terms = {"bce", "smooth_l1"};
    c.optimizer.kind = "adam";
    c.schedule = {"step", 0.002, 0.1, 15};
    c.batch_size = 8;
  } else if (pathology == "alignment") {
    c.task = "keypoint+classification";
    c.input_h = c.input_w = 512;
    c.loss_terms = {"mse", "bce"};
    c.optimizer.kind = "adam";
    c.schedule = {"constant", 0.001};
    c.batch_size = 16;
    c.augment.rotations = true;
    c.augment.scaling = true;
  } else if (pathology == "soft_tissue") {
    c.task = "segmentation";
    c.input_h = c.input_w = 256;
    c.loss_terms = {"dice", "bce"};
    c.optimizer.kind = "adam";
    c.schedule = {"step", 0.002, 0.1, 12};
    c.batch_size = 16;
  } else if (pathology == "tibial_spike") {
    c.task = "detection";
    c.input_h = c.input_w = 256;
    c.loss_terms = {"focal", "smooth_l1"};
    c.optimizer.kind = "adam";
    c.schedule = {"constant", 0.0005};
    c.batch_size = 32;
    c.anchors = AnchorSettings{};
    c.anchors->scales = {16, 32, 64};
    c.anchors->ratios = {1.0, 0.5, 2.0};
  } else {
    throw UsageError("unknown pathology \"" + pathology + "\"");
  }
  c.validate();
  return c;
}

}  // namespace kxr
