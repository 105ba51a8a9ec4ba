// Task engine: builds per-pathology models (regression, detection,
// segmentation, keypoint, classification heads over a shared conv backbone),
// trains them deterministically, and runs inference back in source-image
// coordinates.
#pragma once

#include "kxr/anchors.hpp"
#include "kxr/checkpoint.hpp"
#include "kxr/manifest.hpp"
#include "kxr/metrics.hpp"
#include "kxr/optim.hpp"
#include "kxr/png_io.hpp"
#include "kxr/preprocess.hpp"
#include "kxr/train_config.hpp"

namespace kxr {

constexpr int kMaskStride = 4;  // segmentation logit grid resolution

// Axis-aligned map from source-image coordinates to model-input coordinates.
struct Frame {
  double y0 = 0, x0 = 0;  // window origin in the source image
  double sy = 1, sx = 1;  // input = (source - origin) * scale

  Point to_input(const Point& p) const { return {(p.x - x0) * sx, (p.y - y0) * sy}; }
  Point to_source(const Point& p) const { return {p.x / sx + x0, p.y / sy + y0}; }
  BoundingBox to_input(const BoundingBox& b) const {
    return {(b.x_min - x0) * sx, (b.y_min - y0) * sy, (b.x_max - x0) * sx, (b.y_max - y0) * sy};
  }
  BoundingBox to_source(const BoundingBox& b) const {
    return {b.x_min / sx + x0, b.y_min / sy + y0, b.x_max / sx + x0, b.y_max / sy + y0};
  }
};

inline Frame full_frame(int src_h, int src_w, int in_h, int in_w) {
  return {0.0, 0.0, static_cast<double>(in_h) / src_h, static_cast<double>(in_w) / src_w};
}

struct CropWindow {
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;
};

// Band around the tibial plateau, sized from the landmark geometry; covers
// the spike region between the condyles and the plateau line.
inline CropWindow plateau_window(const KeypointSet& kp, int src_h, int src_w) {
  const double yp = 0.5 * (kp.tibial_plateau_left.y + kp.tibial_plateau_right.y);
  const double yf = 0.5 * (kp.femoral_condyle_left.y + kp.femoral_condyle_right.y);
  const double gap = yp - yf;
  const double span = kp.tibial_plateau_right.x - kp.tibial_plateau_left.x;
  if (!(gap > 1.0) || !(span > 1.0)) throw UsageError("plateau window: degenerate landmarks");
  CropWindow w;
  w.y0 = std::clamp(yp - 0.75 * gap, 0.0, static_cast<double>(src_h));
  w.y1 = std::clamp(yp + 0.25 * gap, 0.0, static_cast<double>(src_h));
  w.x0 = std::clamp(kp.tibial_plateau_left.x, 0.0, static_cast<double>(src_w));
  w.x1 = std::clamp(kp.tibial_plateau_right.x, 0.0, static_cast<double>(src_w));
  if (w.y1 - w.y0 < 4.0 || w.x1 - w.x0 < 4.0) throw UsageError("plateau window: degenerate landmarks");
  return w;
}

inline Frame window_frame(const CropWindow& w, int in_h, int in_w) {
  return {w.y0, w.x0, in_h / (w.y1 - w.y0), in_w / (w.x1 - w.x0)};
}

// Resample the frame's source window to the model input size.
inline Image frame_resize(const Image& src, const Frame& f, int in_h, int in_w) {
  if (f.y0 == 0 && f.x0 == 0 && f.sy == static_cast<double>(in_h) / src.height &&
      f.sx == static_cast<double>(in_w) / src.width)
    return resize_bilinear(src, in_h, in_w);
  Image out(in_h, in_w);
  for (int y = 0; y < in_h; ++y)
    for (int x = 0; x < in_w; ++x) {
      const Point s = f.to_source(Point{x + 0.5, y + 0.5});
      out.at(y, x) = src.sample(s.y - 0.5, s.x - 0.5);
    }
  return out;
}

// Rotation (degrees, content moves with the rotation) plus uniform scaling
// about the image center. Matches rotate_raster when scale == 1.
inline Image warp_affine(const Image& in, double angle_deg, double scale) {
  if (angle_deg == 0.0 && scale == 1.0) return in;
  if (!(scale > 0)) throw UsageError("warp: scale must be positive");
  Image out(in.height, in.width);
  const double a = deg_to_rad(angle_deg);
  const double c = std::cos(a), s = std::sin(a);
  const double cy = (in.height - 1) / 2.0, cx = (in.width - 1) / 2.0;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const double dx = (x - cx) / scale, dy = (y - cy) / scale;
      // inverse rotation: R(-a)
      const double sxp = cx + c * dx + s * dy;
      const double syp = cy - s * dx + c * dy;
      out.at(y, x) = in.sample(syp, sxp);
    }
  return out;
}

inline Point warp_point(const Point& p, double angle_deg, double scale, int h, int w) {
  const Point center{w / 2.0, h / 2.0};
  const Point r = rotate_point(p, center, angle_deg);
  return {center.x + (r.x - center.x) * scale, center.y + (r.y - center.y) * scale};
}

inline BoundingBox warp_box(const BoundingBox& b, double angle_deg, double scale, int h, int w) {
  const std::array<Point, 4> corners{Point{b.x_min, b.y_min}, Point{b.x_max, b.y_min},
                                     Point{b.x_min, b.y_max}, Point{b.x_max, b.y_max}};
  double x0 = 1e30, y0 = 1e30, x1 = -1e30, y1 = -1e30;
  for (const Point& p : corners) {
    const Point q = warp_point(p, angle_deg, scale, h, w);
    x0 = std::min(x0, q.x);
    y0 = std::min(y0, q.y);
    x1 = std::max(x1, q.x);
    y1 = std::max(y1, q.y);
  }
  return {x0, y0, x1, y1};
}

// ---- Training samples ----

// One training example with its targets already mapped into model-input
// coordinates.
struct Sample {
  std::string scan_id;
  Image image;                      // input-sized
  std::optional<Image> mask_image;  // segmentation union mask, input-sized, {0,1}
  std::vector<BoundingBox> boxes;   // detection targets
  std::optional<KeypointSet> keypoints;
  double varus_angle = 0;
  bool misaligned = false;
  JointSpaceWidths width_frac{};  // widths as fraction of source height
  bool has_widths = false;
  int label = -1;
  double source_h = 0, source_w = 0;
};

namespace detail {

inline Image union_mask_image(const std::vector<Mask>& masks, const Frame& f, int src_h, int src_w,
                              int in_h, int in_w) {
  Image full(src_h, src_w);
  for (const Mask& m : masks)
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(y, x)) {
          const int yy = m.y0 + y, xx = m.x0 + x;
          if (yy >= 0 && yy < src_h && xx >= 0 && xx < src_w) full.at(yy, xx) = 1.0f;
        }
  Image out = frame_resize(full, f, in_h, in_w);
  for (auto& v : out.pixels) v = v >= 0.5f ? 1.0f : 0.0f;
  return out;
}

}  // namespace detail

inline Sample build_sample(const TrainingConfig& cfg, const std::string& scan_id, const Image& src,
                           const AnnotationSet& ann) {
  Sample s;
  s.scan_id = scan_id;
  s.source_h = src.height;
  s.source_w = src.width;
  Frame f = full_frame(src.height, src.width, cfg.input_h, cfg.input_w);
  if (cfg.pathology == "tibial_spike") {
    if (!ann.alignment) throw UsageError("tibial_spike sample needs landmark annotations");
    f = window_frame(plateau_window(ann.alignment->keypoints, src.height, src.width), cfg.input_h,
                     cfg.input_w);
  }
  s.image = frame_resize(src, f, cfg.input_h, cfg.input_w);

  if (cfg.task == "regression") {
    if (!ann.joint_space_widths) throw UsageError("sample lacks joint space widths");
    s.width_frac = {ann.joint_space_widths->medial / src.height,
                    ann.joint_space_widths->lateral / src.height};
    s.has_widths = true;
  } else if (cfg.task == "detection") {
    const std::vector<BoundingBox>* boxes = nullptr;
    if (cfg.pathology == "sclerosis") boxes = &ann.sclerosis_boxes;
    else if (cfg.pathology == "osteophytes") boxes = &ann.osteophyte_boxes;
    else if (cfg.pathology == "tibial_spike") boxes = &ann.tibial_spike_boxes;
    else throw UsageError("no box annotations defined for \"" + cfg.pathology + "\"");
    for (const BoundingBox& b : *boxes) s.boxes.push_back(f.to_input(b));
  } else if (cfg.task == "segmentation") {
    const std::vector<Mask>& masks =
        cfg.pathology == "postop" ? ann.implant_masks : ann.soft_tissue_masks;
    s.mask_image =
        detail::union_mask_image(masks, f, src.height, src.width, cfg.input_h, cfg.input_w);
  } else if (cfg.task == "keypoint+classification") {
    if (!ann.alignment) throw UsageError("sample lacks alignment annotations");
    KeypointSet kp;
    const auto pts = ann.alignment->keypoints.points();
    for (size_t i = 0; i < pts.size(); ++i) kp.set(i, f.to_input(pts[i]));
    s.keypoints = kp;
    s.varus_angle = ann.alignment->varus_valgus_angle;
    s.misaligned = ann.alignment->misaligned;
  } else if (cfg.task == "classification") {
    if (!ann.oa_grade) throw UsageError("sample lacks a grade label");
    s.label = *ann.oa_grade;
  }
  return s;
}

// Photometric part of preprocessing only; geometry must stay untouched so
// annotation coordinates remain valid.
inline Image normalize_photometric(const PreprocessSpec& spec, const Image& img) {
  PreprocessSpec p = spec;
  p.target_h = img.height;
  p.target_w = img.width;
  return preprocess(img, p);
}

inline std::vector<Sample> build_samples(const TrainingConfig& cfg, const DatasetManifest& m,
                                         const PreprocessSpec* photometric = nullptr) {
  const bool presence_optional = cfg.task == "detection" || cfg.task == "segmentation";
  std::vector<Sample> out;
  for (const auto& e : m.entries) {
    if (!e.labeled) continue;
    AnnotationSet ann = load_annotations(m, e);
    if (!presence_optional && !annotation_covers(ann, cfg.pathology)) continue;
    if (cfg.pathology == "tibial_spike" && !ann.alignment) continue;
    Image img = read_image(m.resolve(e.image_path));
    if (photometric) img = normalize_photometric(*photometric, img);
    out.push_back(build_sample(cfg, e.scan_id, img, ann));
  }
  if (out.empty()) throw UsageError("no usable labeled samples for \"" + cfg.pathology + "\"");
  return out;
}

// Classification samples from in-memory images (gate stages train this way).
inline std::vector<Sample> samples_from_images(const TrainingConfig& cfg,
                                               const std::vector<std::pair<Image, int>>& data) {
  if (data.empty()) throw UsageError("no samples given");
  std::vector<Sample> out;
  out.reserve(data.size());
  for (const auto& [img, label] : data) {
    Sample s;
    s.source_h = img.height;
    s.source_w = img.width;
    s.image = resize_bilinear(img, cfg.input_h, cfg.input_w);
    s.label = label;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- Augmentation ----

inline Sample augment_sample(const Sample& in, const AugmentConfig& a, Rng& rng) {
  Sample s = in;
  const int h = s.image.height, w = s.image.width;
  if (a.flips && rng.bernoulli(a.prob)) {
    s.image = hflip(s.image);
    if (s.mask_image) s.mask_image = hflip(*s.mask_image);
    for (auto& b : s.boxes) b = {w - b.x_max, b.y_min, w - b.x_min, b.y_max};
    if (s.keypoints) {
      KeypointSet kp = *s.keypoints;
      auto mirror = [&](const Point& p) { return Point{w - p.x, p.y}; };
      // mirroring swaps the anatomical left/right of each pair
      KeypointSet out;
      out.tibial_plateau_left = mirror(kp.tibial_plateau_right);
      out.tibial_plateau_right = mirror(kp.tibial_plateau_left);
      out.femoral_condyle_left = mirror(kp.femoral_condyle_right);
      out.femoral_condyle_right = mirror(kp.femoral_condyle_left);
      s.keypoints = out;
      s.varus_angle = -s.varus_angle;
    }
    if (s.has_widths) std::swap(s.width_frac.medial, s.width_frac.lateral);
  }
  double angle = 0, scale = 1;
  if (a.rotations && rng.bernoulli(a.prob)) angle = rng.uniform(-a.rotation_max_deg, a.rotation_max_deg);
  if (a.scaling && rng.bernoulli(a.prob)) scale = 1.0 + rng.uniform(-a.scale_delta, a.scale_delta);
  if (angle != 0 || scale != 1) {
    s.image = warp_affine(s.image, angle, scale);
    if (s.mask_image) {
      Image m = warp_affine(*s.mask_image, angle, scale);
      for (auto& v : m.pixels) v = v >= 0.5f ? 1.0f : 0.0f;
      s.mask_image = std::move(m);
    }
    for (auto& b : s.boxes) b = warp_box(b, angle, scale, h, w);
    if (s.keypoints) {
      KeypointSet kp;
      const auto pts = s.keypoints->points();
      for (size_t i = 0; i < pts.size(); ++i) kp.set(i, warp_point(pts[i], angle, scale, h, w));
      s.keypoints = kp;
    }
    if (s.has_widths) {
      s.width_frac.medial *= scale;
      s.width_frac.lateral *= scale;
    }
  }
  if (a.brightness && rng.bernoulli(a.prob)) {
    const float d = static_cast<float>(rng.uniform(-a.brightness_delta, a.brightness_delta));
    for (auto& v : s.image.pixels) v = std::clamp(v + d, 0.0f, 1.0f);
  }
  return s;
}

// ---- Model assembly ----

struct TaskModel {
  TrainingConfig config;
  nn::Net backbone;
  std::vector<std::pair<std::string, nn::Net>> heads;

  nn::Net& head(const std::string& name) {
    for (auto& [n, net] : heads)
      if (n == name) return net;
    throw UsageError("model has no head \"" + name + "\"");
  }
  bool has_head(const std::string& name) const {
    for (const auto& [n, net] : heads)
      if (n == name) return true;
    return false;
  }
  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out = backbone.params();
    for (auto& [n, net] : heads)
      for (nn::Param* p : net.params()) out.push_back(p);
    return out;
  }
  void zero_grad() {
    for (nn::Param* p : params()) p->zero_grad();
  }
  void init(uint64_t seed) {
    backbone.init(mix_seed(seed));
    for (auto& [n, net] : heads) net.init(mix_seed(seed ^ fnv1a64(n)));
  }
  void seed_dropout(uint64_t seed) {
    backbone.seed_dropout(mix_seed(seed ^ fnv1a64("backbone")));
    for (auto& [n, net] : heads) net.seed_dropout(mix_seed(seed ^ fnv1a64(n)));
  }
};

namespace detail {

inline json conv_spec(int in, int out, int k, int stride, int pad) {
  return {{"type", "conv"}, {"in", in}, {"out", out}, {"k", k}, {"stride", stride}, {"pad", pad}};
}

inline int backbone_stride(const TrainingConfig& c) {
  if (c.task == "detection") return c.anchors->stride;
  if (c.task == "segmentation") return kMaskStride;
  return 16;
}

// Stack of stride-2 conv blocks down to the requested stride; channel width
// doubles per block, capped at 4x base.
inline json backbone_arch(const TrainingConfig& c, int* out_channels) {
  const int stride = backbone_stride(c);
  int blocks = 0;
  for (int s = stride; s > 1; s /= 2) ++blocks;
  json arch = json::array();
  int in_ch = 1;
  int ch = c.base_channels;
  for (int i = 0; i < blocks; ++i) {
    arch.push_back(conv_spec(in_ch, ch, 3, 2, 1));
    arch.push_back(json{{"type", "relu"}});
    in_ch = ch;
    ch = std::min(ch * 2, c.base_channels * 4);
  }
  if (c.task == "segmentation") {  // extra context at full grid resolution
    arch.push_back(conv_spec(in_ch, in_ch, 3, 1, 1));
    arch.push_back(json{{"type", "relu"}});
  }
  *out_channels = in_ch;
  return arch;
}

inline json dense_head(int features, int hidden, int out, double dropout) {
  json arch = json::array();
  arch.push_back(json{{"type", "flatten"}});
  arch.push_back(json{{"type", "dense"}, {"in", features}, {"out", hidden}});
  arch.push_back(json{{"type", "relu"}});
  if (dropout > 0) arch.push_back(json{{"type", "dropout"}, {"rate", dropout}});
  arch.push_back(json{{"type", "dense"}, {"in", hidden}, {"out", out}});
  return arch;
}

}  // namespace detail

inline json model_arch_json(const TrainingConfig& c) {
  c.validate();
  int feat_ch = 0;
  json backbone = detail::backbone_arch(c, &feat_ch);
  const int stride = detail::backbone_stride(c);
  const int fh = c.input_h / stride, fw = c.input_w / stride;
  if (c.input_h % stride != 0 || c.input_w % stride != 0)
    throw UsageError("config: input size must be divisible by " + std::to_string(stride));
  const int features = feat_ch * fh * fw;
  json heads = json::array();
  if (c.task == "regression") {
    heads.push_back(json::array({"out", detail::dense_head(features, 64, 2, c.dropout_rate)}));
  } else if (c.task == "detection") {
    const int A = static_cast<int>(c.anchors->scales.size() * c.anchors->ratios.size());
    heads.push_back(json::array({"obj", json::array({detail::conv_spec(feat_ch, A, 1, 1, 0)})}));
    heads.push_back(json::array({"delta", json::array({detail::conv_spec(feat_ch, 4 * A, 1, 1, 0)})}));
  } else if (c.task == "segmentation") {
    heads.push_back(json::array({"mask", json::array({detail::conv_spec(feat_ch, 1, 1, 1, 0)})}));
    if (std::find(c.loss_terms.begin(), c.loss_terms.end(), "smooth_l1") != c.loss_terms.end()) {
      json box = json::array();
      box.push_back(json{{"type", "gap"}});
      box.push_back(json{{"type", "flatten"}});
      box.push_back(json{{"type", "dense"}, {"in", feat_ch}, {"out", 4}});
      heads.push_back(json::array({"box", box}));
    }
  } else if (c.task == "keypoint+classification") {
    heads.push_back(json::array({"out", detail::dense_head(features, 64, 10, c.dropout_rate)}));
  } else {  // classification
    heads.push_back(json::array({"out", detail::dense_head(features, 64, c.num_classes, c.dropout_rate)}));
  }
  return {{"backbone", backbone}, {"heads", heads}};
}

inline TaskModel model_from_arch(const TrainingConfig& cfg, const json& arch) {
  TaskModel m;
  m.config = cfg;
  m.backbone = nn::net_from_arch(arch.at("backbone"));
  for (const auto& h : arch.at("heads"))
    m.heads.emplace_back(h.at(0).get<std::string>(), nn::net_from_arch(h.at(1)));
  return m;
}

inline TaskModel build_model(const TrainingConfig& cfg, uint64_t seed) {
  TaskModel m = model_from_arch(cfg, model_arch_json(cfg));
  m.init(seed);
  m.seed_dropout(seed ^ 0x64726f70ULL);
  return m;
}

inline void save_model(const std::filesystem::path& path, TaskModel& model, const json& meta = json::object()) {
  json header{{"format", "kxr-model"},
              {"config", to_json(model.config)},
              {"arch", model_arch_json(model.config)},
              {"meta", meta}};
  nn::write_checkpoint(path, header, model.params());
}

inline TaskModel load_model(const std::filesystem::path& path) {
  nn::Checkpoint ck = nn::read_checkpoint(path);
  if (ck.header.value("format", "") != "kxr-model")
    throw IntegrityError("checkpoint: not a model file: " + path.string());
  TaskModel m = model_from_arch(training_config_from_json(ck.header.at("config")),
                                ck.header.at("arch"));
  nn::apply_blobs(m.params(), ck.blobs);
  return m;
}

// ---- Forward / loss ----

struct ForwardOut {
  nn::Tensor feat;
  std::vector<std::pair<std::string, nn::Tensor>> outs;

  const nn::Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : outs)
      if (n == name) return t;
    throw UsageError("forward output missing head \"" + name + "\"");
  }
};

inline ForwardOut forward_model(TaskModel& m, const nn::Tensor& x, bool training) {
  ForwardOut fo;
  fo.feat = m.backbone.forward(x, training);
  for (auto& [name, net] : m.heads) fo.outs.emplace_back(name, net.forward(fo.feat, training));
  return fo;
}

inline void backward_model(TaskModel& m, const ForwardOut& fo,
                           const std::vector<std::pair<std::string, nn::Tensor>>& grads) {
  nn::Tensor gfeat(fo.feat.n, fo.feat.c, fo.feat.h, fo.feat.w);
  for (auto& [name, net] : m.heads) {
    const nn::Tensor* g = nullptr;
    for (const auto& [gn, gt] : grads)
      if (gn == name) g = &gt;
    if (g == nullptr) continue;
    nn::Tensor gh = net.backward(*g);
    for (size_t i = 0; i < gfeat.v.size(); ++i) gfeat.v[i] += gh.v[i];
  }
  m.backbone.backward(std::move(gfeat));
}

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline std::vector<double> softmax_row(const float* z, int k) {
  double mx = z[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(z[i]));
  std::vector<double> p(k);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline bool uses(const TrainingConfig& c, const char* term) {
  return std::find(c.loss_terms.begin(), c.loss_terms.end(), term) != c.loss_terms.end();
}

// Mean of per-cell mask losses (dice and/or bce per the config) plus the
// auxiliary box term when present.
struct SegTargets {
  nn::Tensor grid;                      // n x 1 x mh x mw
  std::vector<std::array<double, 4>> box_frac;
  std::vector<bool> has_box;
};

}  // namespace detail

// Batched targets matched to a stacked input tensor.
struct Batch {
  nn::Tensor x;
  std::vector<const Sample*> samples;
};

inline Batch make_batch(const std::vector<Sample>& pool, const std::vector<size_t>& idx,
                        size_t begin, size_t end, const AugmentConfig* aug, uint64_t seed,
                        int epoch, std::vector<Sample>* scratch) {
  Batch b;
  scratch->clear();
  scratch->reserve(end - begin);  // pointers into scratch must stay valid
  for (size_t i = begin; i < end; ++i) {
    const Sample* s = &pool[idx[i]];
    if (aug != nullptr && aug->any()) {
      Rng rng(seed ^ (static_cast<uint64_t>(epoch + 1) << 32) ^ (idx[i] + 1));
      scratch->push_back(augment_sample(*s, *aug, rng));
      s = &scratch->back();
    }
    b.samples.push_back(s);
  }
  std::vector<nn::Tensor> tensors;
  tensors.reserve(b.samples.size());
  for (const Sample* s : b.samples) tensors.push_back(nn::tensor_from_image(s->image));
  std::vector<const nn::Tensor*> xs;
  for (const auto& t : tensors) xs.push_back(&t);
  b.x = nn::stack(xs);
  return b;
}

// Computes the task loss for a forward pass and the gradients w.r.t. each
// head output. Returns the batch-mean loss.
inline double task_loss(const TrainingConfig& cfg, const Batch& batch, const ForwardOut& fo,
                        std::vector<std::pair<std::string, nn::Tensor>>& grads,
                        const std::vector<Anchor>* anchors) {
  const int n = static_cast<int>(batch.samples.size());
  double total = 0;

  if (cfg.task == "regression") {
    const nn::Tensor& out = fo.get("out");
    std::vector<double> pred(2 * n), target(2 * n);
    for (int i = 0; i < n; ++i) {
      pred[2 * i] = out.v[2 * i];
      pred[2 * i + 1] = out.v[2 * i + 1];
      target[2 * i] = batch.samples[i]->width_frac.medial;
      target[2 * i + 1] = batch.samples[i]->width_frac.lateral;
    }
    total = losses::mse(pred, target);
    const auto g = losses::mse_grad(pred, target);
    nn::Tensor gt(n, 2, 1, 1);
    for (size_t i = 0; i < g.size(); ++i) gt.v[i] = static_cast<float>(g[i]);
    grads.emplace_back("out", std::move(gt));

  } else if (cfg.task == "classification") {
    const nn::Tensor& out = fo.get("out");
    const int k = out.c;
    nn::Tensor gt(n, k, 1, 1);
    for (int i = 0; i < n; ++i) {
      const auto p = detail::softmax_row(out.v.data() + static_cast<size_t>(i) * k, k);
      const int label = batch.samples[i]->label;
      total += losses::cross_entropy(p, static_cast<size_t>(label));
      for (int j = 0; j < k; ++j)
        gt.v[static_cast<size_t>(i) * k + j] =
            static_cast<float>((p[j] - (j == label ? 1.0 : 0.0)) / n);
    }
    total /= n;
    grads.emplace_back("out", std::move(gt));

  } else if (cfg.task == "keypoint+classification") {
    const nn::Tensor& out = fo.get("out");
    std::vector<double> pred(9 * n), target(9 * n), probs(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      const Sample& s = *batch.samples[i];
      const float* row = out.v.data() + static_cast<size_t>(i) * 10;
      const auto pts = s.keypoints->points();
      for (int j = 0; j < 4; ++j) {
        pred[9 * i + 2 * j] = row[2 * j];
        pred[9 * i + 2 * j + 1] = row[2 * j + 1];
        target[9 * i + 2 * j] = pts[j].x / s.image.width;
        target[9 * i + 2 * j + 1] = pts[j].y / s.image.height;
      }
      pred[9 * i + 8] = row[8];
      target[9 * i + 8] = s.varus_angle / 45.0;
      probs[i] = detail::sigmoid(row[9]);
      labels[i] = s.misaligned ? 1 : 0;
    }
    total = losses::mse(pred, target) + losses::bce(probs, labels);
    const auto gmse = losses::mse_grad(pred, target);
    nn::Tensor gt(n, 10, 1, 1);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 9; ++j)
        gt.v[static_cast<size_t>(i) * 10 + j] = static_cast<float>(gmse[9 * i + j]);
      gt.v[static_cast<size_t>(i) * 10 + 9] =
          static_cast<float>((probs[i] - labels[i]) / n);
    }
    grads.emplace_back("out", std::move(gt));

  } else if (cfg.task == "detection") {
    const nn::Tensor& obj = fo.get("obj");
    const nn::Tensor& delta = fo.get("delta");
    const int A = obj.c, fh = obj.h, fw = obj.w;
    nn::Tensor gobj(n, A, fh, fw), gdelta(n, 4 * A, fh, fw);
    const bool focal = detail::uses(cfg, "focal");
    for (int i = 0; i < n; ++i) {
      const AnchorMatch match =
          match_anchors(*anchors, batch.samples[i]->boxes, cfg.anchors->pos_iou, cfg.anchors->neg_iou);
      int npos = 0;
      for (int asn : match.assignment)
        if (asn >= 0) ++npos;
      const double norm = focal ? std::max(1, npos) : 0.0;
      std::vector<double> probs;
      std::vector<int> labels;
      std::vector<size_t> sel;  // anchor indices, grid order
      for (size_t k = 0; k < anchors->size(); ++k) {
        const int asn = match.assignment[k];
        if (asn == AnchorMatch::Ignore) continue;
        sel.push_back(k);
        labels.push_back(asn >= 0 ? 1 : 0);
      }
      probs.resize(sel.size());
      auto cell_of = [&](size_t k) {
        const int a = static_cast<int>(k % A);
        const int cell = static_cast<int>(k / A);
        return std::array<int, 3>{a, cell / fw, cell % fw};
      };
      for (size_t j = 0; j < sel.size(); ++j) {
        const auto [a, gy, gx] = cell_of(sel[j]);
        probs[j] = detail::sigmoid(obj.at(i, a, gy, gx));
      }
      double lobj;
      std::vector<double> gp;
      if (focal) {
        lobj = losses::focal(probs, labels) * static_cast<double>(probs.size()) / norm;
        gp = losses::focal_grad(probs, labels);
        for (auto& g : gp) g *= static_cast<double>(probs.size()) / norm;
      } else {
        lobj = losses::bce(probs, labels);
        gp = losses::bce_grad(probs, labels);
      }
      for (size_t j = 0; j < sel.size(); ++j) {
        const auto [a, gy, gx] = cell_of(sel[j]);
        gobj.at(i, a, gy, gx) =
            static_cast<float>(gp[j] * probs[j] * (1.0 - probs[j]) / n);
      }
      double lbox = 0;
      const double box_norm = std::max(1, npos);
      for (size_t k = 0; k < anchors->size(); ++k) {
        const int asn = match.assignment[k];
        if (asn < 0) continue;
        const auto [a, gy, gx] = cell_of(k);
        const auto t = encode_box((*anchors)[k], batch.samples[i]->boxes[asn]);
        std::vector<double> d(4), tv(t.begin(), t.end());
        for (int j = 0; j < 4; ++j) d[j] = delta.at(i, 4 * a + j, gy, gx);
        lbox += losses::smooth_l1(d, tv) / box_norm;
        const auto gb = losses::smooth_l1_grad(d, tv);
        for (int j = 0; j < 4; ++j)
          gdelta.at(i, 4 * a + j, gy, gx) = static_cast<float>(gb[j] / box_norm / n);
      }
      total += (lobj + lbox) / n;
    }
    grads.emplace_back("obj", std::move(gobj));
    grads.emplace_back("delta", std::move(gdelta));

  } else {  // segmentation
    const nn::Tensor& mask = fo.get("mask");
    const int cells = mask.h * mask.w;
    nn::Tensor gmask(n, 1, mask.h, mask.w);
    const bool use_dice = detail::uses(cfg, "dice");
    const bool use_bce = detail::uses(cfg, "bce");
    for (int i = 0; i < n; ++i) {
      const Sample& s = *batch.samples[i];
      const Image grid = avg_pool(*s.mask_image, s.image.height / mask.h);
      std::vector<double> p(cells), gt(cells);
      std::vector<int> labels(cells);
      for (int j = 0; j < cells; ++j) {
        p[j] = detail::sigmoid(mask.v[static_cast<size_t>(i) * cells + j]);
        labels[j] = grid.pixels[j] >= 0.5f ? 1 : 0;
        gt[j] = labels[j];
      }
      std::vector<double> gp(cells, 0.0);
      if (use_bce) {
        total += losses::bce(p, labels) / n;
        const auto g = losses::bce_grad(p, labels);
        for (int j = 0; j < cells; ++j) gp[j] += g[j];
      }
      if (use_dice) {
        total += losses::dice(p, gt) / n;
        const auto g = losses::dice_grad(p, gt);
        for (int j = 0; j < cells; ++j) gp[j] += g[j];
      }
      for (int j = 0; j < cells; ++j)
        gmask.v[static_cast<size_t>(i) * cells + j] =
            static_cast<float>(gp[j] * p[j] * (1.0 - p[j]) / n);
    }
    grads.emplace_back("mask", std::move(gmask));

    if (detail::uses(cfg, "smooth_l1")) {
      const nn::Tensor& box = fo.get("box");
      nn::Tensor gbox(n, 4, 1, 1);
      for (int i = 0; i < n; ++i) {
        // target: union mask bounds, normalized; empty masks carry no box
        const Image& mi = *batch.samples[i]->mask_image;
        int y0 = mi.height, y1 = -1, x0 = mi.width, x1 = -1;
        for (int y = 0; y < mi.height; ++y)
          for (int x = 0; x < mi.width; ++x)
            if (mi.at(y, x) >= 0.5f) {
              y0 = std::min(y0, y);
              y1 = std::max(y1, y);
              x0 = std::min(x0, x);
              x1 = std::max(x1, x);
            }
        if (y1 < 0) continue;
        std::vector<double> pred(4), t{static_cast<double>(x0) / mi.width,
                                       static_cast<double>(y0) / mi.height,
                                       static_cast<double>(x1 + 1) / mi.width,
                                       static_cast<double>(y1 + 1) / mi.height};
        for (int j = 0; j < 4; ++j) pred[j] = box.v[static_cast<size_t>(i) * 4 + j];
        total += losses::smooth_l1(pred, t) / n;
        const auto g = losses::smooth_l1_grad(pred, t);
        for (int j = 0; j < 4; ++j)
          gbox.v[static_cast<size_t>(i) * 4 + j] = static_cast<float>(g[j] / n);
      }
      grads.emplace_back("box", std::move(gbox));
    }
  }
  return total;
}

// ---- Inference ----

struct Prediction {
  std::vector<Finding> findings;
  std::optional<JointSpaceWidths> widths;
  std::optional<AlignmentPrediction> alignment;
  std::optional<LandmarkPrediction> landmarks;
  std::optional<GradeOutput> grade;
};

// Thresholded, NMS-filtered boxes in model-input coordinates.
inline std::vector<ScoredBox> decode_detections(const TrainingConfig& cfg, const ForwardOut& fo) {
  const nn::Tensor& obj = fo.get("obj");
  const nn::Tensor& delta = fo.get("delta");
  const auto anchors = anchor_grid(cfg.input_h, cfg.input_w, cfg.anchors->stride,
                                   cfg.anchors->scales, cfg.anchors->ratios);
  const int A = obj.c, fw = obj.w;
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (size_t k = 0; k < anchors.size(); ++k) {
    const int a = static_cast<int>(k % A);
    const int cell = static_cast<int>(k / A);
    const int gy = cell / fw, gx = cell % fw;
    const double p = detail::sigmoid(obj.at(0, a, gy, gx));
    if (p < cfg.confidence_threshold) continue;
    std::array<double, 4> d;
    for (int j = 0; j < 4; ++j) d[j] = delta.at(0, 4 * a + j, gy, gx);
    BoundingBox b = decode_box(anchors[k], d);
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(cfg.input_w));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(cfg.input_w));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(cfg.input_h));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(cfg.input_h));
    if (!b.valid() || b.area() <= 0) continue;
    boxes.push_back(b);
    scores.push_back(p);
  }
  std::vector<ScoredBox> kept;
  for (size_t k : nms(boxes, scores, cfg.nms_iou)) kept.push_back({boxes[k], scores[k]});
  return kept;
}

inline Prediction predict(TaskModel& m, const Image& source, const KeypointSet* landmarks = nullptr) {
  const TrainingConfig& cfg = m.config;
  Frame f = full_frame(source.height, source.width, cfg.input_h, cfg.input_w);
  if (cfg.pathology == "tibial_spike") {
    if (landmarks == nullptr) throw UsageError("tibial_spike prediction needs landmarks");
    f = window_frame(plateau_window(*landmarks, source.height, source.width), cfg.input_h, cfg.input_w);
  }
  const Image input = frame_resize(source, f, cfg.input_h, cfg.input_w);
  const ForwardOut fo = forward_model(m, nn::tensor_from_image(input), false);
  Prediction out;

  if (cfg.task == "regression") {
    const nn::Tensor& o = fo.get("out");
    out.widths = JointSpaceWidths{std::max(0.0, static_cast<double>(o.v[0])) * source.height,
                                  std::max(0.0, static_cast<double>(o.v[1])) * source.height};

  } else if (cfg.task == "classification") {
    const nn::Tensor& o = fo.get("out");
    const auto p = detail::softmax_row(o.v.data(), o.c);
    GradeOutput g;
    for (int i = 0; i < o.c && i < 4; ++i) g.probs[i] = p[i];
    g.grade = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    out.grade = g;

  } else if (cfg.task == "keypoint+classification") {
    const nn::Tensor& o = fo.get("out");
    LandmarkPrediction lp;
    for (int j = 0; j < 4; ++j) {
      const Point in_pt{o.v[2 * j] * cfg.input_w, o.v[2 * j + 1] * cfg.input_h};
      lp.points.set(j, f.to_source(in_pt));
    }
    out.landmarks = lp;
    out.alignment = AlignmentPrediction{o.v[8] * 45.0, detail::sigmoid(o.v[9])};

  } else if (cfg.task == "detection") {
    for (const ScoredBox& sb : decode_detections(cfg, fo))
      out.findings.push_back(Finding{f.to_source(sb.box), sb.confidence});

  } else {  // segmentation
    const nn::Tensor& mask = fo.get("mask");
    const int mh = mask.h, mw = mask.w;
    int y0 = mh, y1 = -1, x0 = mw, x1 = -1;
    double conf = 0;
    int on = 0;
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x) {
        const double p = detail::sigmoid(mask.at(0, 0, y, x));
        if (p >= 0.5) {
          ++on;
          conf += p;
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
      }
    if (on > 0) {
      // grid cell -> source rectangle; emit one union mask finding
      const double cell_h = static_cast<double>(cfg.input_h) / mh / f.sy;
      const double cell_w = static_cast<double>(cfg.input_w) / mw / f.sx;
      Mask region;
      region.y0 = static_cast<int>(std::floor(f.y0 + y0 * cell_h));
      region.x0 = static_cast<int>(std::floor(f.x0 + x0 * cell_w));
      const int yend = static_cast<int>(std::ceil(f.y0 + (y1 + 1) * cell_h));
      const int xend = static_cast<int>(std::ceil(f.x0 + (x1 + 1) * cell_w));
      region.height = std::max(1, yend - region.y0);
      region.width = std::max(1, xend - region.x0);
      region.data.assign(static_cast<size_t>(region.height) * region.width, 0);
      for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x) {
          const int gy = static_cast<int>((region.y0 + y + 0.5 - f.y0) / cell_h);
          const int gx = static_cast<int>((region.x0 + x + 0.5 - f.x0) / cell_w);
          if (gy < 0 || gy >= mh || gx < 0 || gx >= mw) continue;
          if (detail::sigmoid(mask.at(0, 0, gy, gx)) >= 0.5) region.at(y, x) = 1;
        }
      out.findings.push_back(Finding{std::move(region), conf / on});
    }
  }
  return out;
}

// ---- Evaluation ----

inline DetectionTally eval_detection(TaskModel& m, const std::vector<Sample>& val,
                                     double iou_threshold = 0.5) {
  DetectionTally tally;
  for (const Sample& s : val) {
    const ForwardOut fo = forward_model(m, nn::tensor_from_image(s.image), false);
    tally += match_detections(decode_detections(m.config, fo), s.boxes, iou_threshold);
  }
  return tally;
}

inline double eval_model(TaskModel& m, const std::vector<Sample>& val) {
  if (val.empty()) return 0.0;
  const TrainingConfig& cfg = m.config;
  if (cfg.task == "detection") {
    const DetectionTally t = eval_detection(m, val);
    const MetricValue v = f1(t.as_confusion());
    return v.present() ? v.get() : 0.0;
  }
  double acc = 0;
  size_t count = 0;
  for (const Sample& s : val) {
    const ForwardOut fo = forward_model(m, nn::tensor_from_image(s.image), false);
    if (cfg.task == "regression") {
      const nn::Tensor& o = fo.get("out");
      const double dm = (o.v[0] - s.width_frac.medial) * s.source_h;
      const double dl = (o.v[1] - s.width_frac.lateral) * s.source_h;
      acc += 0.5 * (dm * dm + dl * dl);
      ++count;
    } else if (cfg.task == "classification") {
      const nn::Tensor& o = fo.get("out");
      const auto p = detail::softmax_row(o.v.data(), o.c);
      const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      acc += pred == s.label ? 1.0 : 0.0;
      ++count;
    } else if (cfg.task == "keypoint+classification") {
      const nn::Tensor& o = fo.get("out");
      const auto pts = s.keypoints->points();
      double err = 0;
      for (int j = 0; j < 4; ++j) {
        const double dx = o.v[2 * j] * s.image.width - pts[j].x;
        const double dy = o.v[2 * j + 1] * s.image.height - pts[j].y;
        err += std::sqrt(dx * dx + dy * dy);
      }
      acc += err / 4.0;
      ++count;
    } else {  // segmentation: dice similarity on the logit grid
      const nn::Tensor& mask = fo.get("mask");
      const Image grid = avg_pool(*s.mask_image, s.image.height / mask.h);
      uint64_t inter = 0, psum = 0, gsum = 0;
      for (int j = 0; j < mask.h * mask.w; ++j) {
        const bool pv = detail::sigmoid(mask.v[j]) >= 0.5;
        const bool gv = grid.pixels[j] >= 0.5f;
        inter += pv && gv;
        psum += pv;
        gsum += gv;
      }
      acc += (psum + gsum) == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / (psum + gsum);
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

inline const char* metric_name(const std::string& task) {
  if (task == "regression") return "val_mse";
  if (task == "detection") return "val_f1";
  if (task == "classification") return "val_accuracy";
  if (task == "keypoint+classification") return "val_keypoint_px";
  return "val_dice";
}

inline bool metric_lower_is_better(const std::string& task) {
  return task == "regression" || task == "keypoint+classification";
}

// ---- Training ----

struct EpochStat {
  int epoch = 0;
  double lr = 0, train_loss = 0, val_metric = 0;
};

struct TrainHistory {
  std::string metric;
  std::vector<EpochStat> epochs;
  int best_epoch = -1;  // epoch whose parameters the returned model carries
};

struct Trained {
  TaskModel model;
  TrainHistory history;
};

inline Trained train_on_samples(const TrainingConfig& cfg, const std::vector<Sample>& train,
                                const std::vector<Sample>& val, int epochs, uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw UsageError("no training samples");
  if (epochs < 1) throw UsageError("epochs must be >= 1");

  Trained result{build_model(cfg, seed), {}};
  TaskModel& model = result.model;
  result.history.metric = metric_name(cfg.task);
  auto opt = nn::make_optimizer(cfg.optimizer);
  const auto params = model.params();

  std::optional<std::vector<Anchor>> anchors;
  if (cfg.task == "detection")
    anchors = anchor_grid(cfg.input_h, cfg.input_w, cfg.anchors->stride, cfg.anchors->scales,
                          cfg.anchors->ratios);

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t iter = 0;
  std::vector<Sample> scratch;
  std::vector<std::vector<float>> best_params;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(seed ^ fnv1a64("shuffle")) + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    size_t batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const size_t end = std::min(order.size(), begin + cfg.batch_size);
      const double lr = cfg.schedule.lr_at(epoch, iter);
      Batch b = make_batch(train, order, begin, end,
                           cfg.augment.any() ? &cfg.augment : nullptr, seed, epoch, &scratch);
      model.zero_grad();
      const ForwardOut fo = forward_model(model, b.x, true);
      std::vector<std::pair<std::string, nn::Tensor>> grads;
      epoch_loss += task_loss(cfg, b, fo, grads, anchors ? &*anchors : nullptr);
      backward_model(model, fo, grads);
      opt->step(params, lr);
      ++batches;
      ++iter;
    }
    EpochStat st;
    st.epoch = epoch;
    st.lr = cfg.schedule.lr_at(epoch, iter > 0 ? iter - 1 : 0);
    st.train_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    st.val_metric = eval_model(model, val);
    result.history.epochs.push_back(st);

    const bool improved =
        result.history.best_epoch < 0 ||
        (metric_lower_is_better(cfg.task)
             ? st.val_metric < result.history.epochs[result.history.best_epoch].val_metric
             : st.val_metric > result.history.epochs[result.history.best_epoch].val_metric);
    if (!val.empty() && improved) {
      result.history.best_epoch = epoch;
      best_params.clear();
      for (const nn::Param* p : params) best_params.push_back(p->value);
    }
  }

  // Hand back the weights from the best validation epoch.
  if (result.history.best_epoch >= 0) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  } else {
    result.history.best_epoch = epochs - 1;
  }
  return result;
}

inline Trained train_detector(const TrainingConfig& cfg, const DatasetManifest& train,
                              const DatasetManifest& val, int epochs, uint64_t seed,
                              const PreprocessSpec* photometric = nullptr) {
  const auto train_samples = build_samples(cfg, train, photometric);
  std::vector<Sample> val_samples;
  if (!val.entries.empty()) val_samples = build_samples(cfg, val, photometric);
  return train_on_samples(cfg, train_samples, val_samples, epochs, seed);
}

}  // namespace kxr
