#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "helpers.hpp"
#include "kxr/detector.hpp"

using namespace kxr;
using nn::Tensor;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using kxr::testing::TempDir;

namespace {

Image checker_image(int h, int w, float lo = 0.1f, float hi = 0.7f) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(y, x) = ((x / 4 + y / 4) % 2) ? hi : lo;
  return img;
}

TrainingConfig tiny_detection_config(const std::vector<std::string>& loss_terms) {
  TrainingConfig c;
  c.pathology = "tibial_spike";
  c.task = "detection";
  c.input_h = c.input_w = 32;
  c.loss_terms = loss_terms;
  c.anchors = AnchorSettings{};
  c.anchors->stride = 8;
  c.anchors->scales = {8};
  c.anchors->ratios = {1.0};
  c.base_channels = 2;
  c.batch_size = 4;
  return c;
}

TrainingConfig tiny_classifier_config(int classes = 2) {
  TrainingConfig c;
  c.pathology = "grading";
  c.task = "classification";
  c.input_h = c.input_w = 16;
  c.loss_terms = {"cross_entropy"};
  c.num_classes = classes;
  c.base_channels = 2;
  c.batch_size = 4;
  return c;
}

// Loss as a function of one head-output slot, everything else held fixed.
double loss_at(const TrainingConfig& cfg, const Batch& b, ForwardOut& fo,
               const std::vector<Anchor>* anchors) {
  std::vector<std::pair<std::string, nn::Tensor>> g;
  return task_loss(cfg, b, fo, g, anchors);
}

// Central differences over every slot of every head output.
void check_head_gradients(const TrainingConfig& cfg, const Batch& b, ForwardOut& fo,
                          const std::vector<Anchor>* anchors, double tol) {
  std::vector<std::pair<std::string, nn::Tensor>> grads;
  task_loss(cfg, b, fo, grads, anchors);
  const double h = 1.0 / 1024;
  for (auto& [name, out] : fo.outs) {
    const nn::Tensor* g = nullptr;
    for (const auto& [gn, gt] : grads)
      if (gn == name) g = &gt;
    REQUIRE(g != nullptr);
    REQUIRE(g->v.size() == out.v.size());
    for (size_t i = 0; i < out.v.size(); ++i) {
      const float orig = out.v[i];
      out.v[i] = orig + static_cast<float>(h);
      const double fp = loss_at(cfg, b, fo, anchors);
      out.v[i] = orig - static_cast<float>(h);
      const double fm = loss_at(cfg, b, fo, anchors);
      out.v[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = g->v[i];
      const double err =
          std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 0.05});
      if (err >= tol) {
        CAPTURE(name, i, numeric, analytic);
        REQUIRE(err < tol);
      }
    }
  }
}

float gridf(Rng& rng) { return static_cast<float>(static_cast<int>(rng.below(257)) - 128) / 256.0f; }

}  // namespace

TEST_CASE("shipped recipes carry the intended knobs", "[detector]") {
  TrainingConfig c = builtin_config("joint_space");
  CHECK(c.task == "regression");
  CHECK(c.input_h == 256);
  CHECK(c.loss_terms == std::vector<std::string>{"mse"});
  CHECK(c.optimizer.kind == "adam");
  CHECK(c.schedule.kind == "step");
  CHECK(c.schedule.base == 0.001);
  CHECK(c.dropout_rate == 0.5);
  CHECK(c.batch_size == 32);

  c = builtin_config("sclerosis");
  CHECK(c.task == "detection");
  CHECK(c.input_h == 512);
  CHECK(c.loss_terms == std::vector<std::string>{"bce", "smooth_l1"});
  CHECK(c.optimizer.kind == "sgd_momentum");
  CHECK(c.optimizer.momentum == 0.9);
  CHECK(c.schedule.kind == "constant");
  CHECK(c.schedule.base == 0.01);
  CHECK(c.batch_size == 16);
  REQUIRE(c.anchors.has_value());
  CHECK(c.anchors->scales == std::vector<double>{32, 64, 128});
  CHECK(c.anchors->ratios == std::vector<double>{1.0, 0.5, 2.0});

  c = builtin_config("osteophytes");
  CHECK(c.input_h == 320);
  CHECK(c.loss_terms == std::vector<std::string>{"focal", "smooth_l1"});
  CHECK(c.schedule.kind == "cyclical");
  CHECK(c.schedule.lr_min == 1e-4);
  CHECK(c.schedule.lr_max == 1e-2);
  CHECK(c.anchors->scales == std::vector<double>{16, 32, 64});

  c = builtin_config("postop");
  CHECK(c.task == "segmentation");
  CHECK(c.loss_terms == std::vector<std::string>{"bce", "smooth_l1"});
  CHECK(c.schedule.base == 0.002);
  CHECK(c.schedule.period_epochs == 15);
  CHECK(c.batch_size == 8);

  c = builtin_config("alignment");
  CHECK(c.task == "keypoint+classification");
  CHECK(c.input_h == 512);
  CHECK(c.loss_terms == std::vector<std::string>{"mse", "bce"});
  CHECK(c.schedule.kind == "constant");
  CHECK(c.augment.rotations);
  CHECK(c.augment.scaling);

  c = builtin_config("soft_tissue");
  CHECK(c.task == "segmentation");
  CHECK(c.loss_terms == std::vector<std::string>{"dice", "bce"});
  CHECK(c.schedule.period_epochs == 12);

  c = builtin_config("tibial_spike");
  CHECK(c.task == "detection");
  CHECK(c.input_h == 256);
  CHECK(c.optimizer.kind == "adam");
  CHECK(c.schedule.base == 0.0005);

  CHECK_THROWS_WITH(builtin_config("cartilage"), ContainsSubstring("unknown pathology"));
}

TEST_CASE("training configs survive a json round trip", "[detector]") {
  for (const char* name : {"joint_space", "sclerosis", "osteophytes", "postop", "alignment",
                           "soft_tissue", "tibial_spike"}) {
    const TrainingConfig c = builtin_config(name);
    const TrainingConfig back = training_config_from_json(to_json(c));
    CHECK(to_json(back).dump() == to_json(c).dump());
    CHECK_NOTHROW(back.validate());
  }
}

TEST_CASE("config validation catches each malformed field", "[detector]") {
  auto base = [] { return builtin_config("joint_space"); };
  TrainingConfig c = base();
  c.task = "captioning";
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("unknown task"));
  c = base();
  c.input_h = 8;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("input size below 16x16"));
  c = base();
  c.batch_size = 0;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("batch_size must be >= 1"));
  c = base();
  c.loss_terms.clear();
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("no loss terms"));
  c = base();
  c.dropout_rate = 1.0;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("dropout_rate outside [0,1)"));
  c = base();
  c.optimizer.kind = "adagrad";
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("unknown optimizer"));
  c = base();
  c.schedule.base = 0.0;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("base LR must be positive"));
  c = base();
  c.schedule.kind = "cyclical";
  c.schedule.lr_min = 0.5;
  c.schedule.lr_max = 0.1;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("cyclical LR bounds"));
  c = base();
  c.schedule.kind = "cosine";
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("unknown schedule"));
  c = base();
  c.base_channels = 0;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("base_channels outside [1,64]"));

  c = builtin_config("sclerosis");
  c.anchors.reset();
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("detection needs anchor settings"));
  c = builtin_config("sclerosis");
  c.anchors->stride = 24;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("power of two"));
  c = builtin_config("sclerosis");
  c.anchors->stride = 64;
  c.input_h = 96;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("divide the input size"));
  c = builtin_config("sclerosis");
  c.anchors->scales.clear();
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("empty anchor scales"));

  c = tiny_classifier_config();
  c.num_classes = 1;
  CHECK_THROWS_WITH(c.validate(), ContainsSubstring("num_classes >= 2"));
}

TEST_CASE("schedule lookup dispatches on kind", "[detector]") {
  ScheduleConfig s;
  s.kind = "constant";
  s.base = 0.25;
  CHECK(s.lr_at(7, 1234) == 0.25);

  s.kind = "step";
  s.base = 0.1;
  s.factor = 0.5;
  s.period_epochs = 10;
  CHECK_THAT(s.lr_at(0, 0), WithinRel(step_lr(0, 0.1, 0.5, 10), 1e-15));
  CHECK_THAT(s.lr_at(25, 0), WithinRel(step_lr(25, 0.1, 0.5, 10), 1e-15));

  s.kind = "cyclical";
  s.lr_min = 0.001;
  s.lr_max = 0.01;
  s.period_iters = 100;
  for (int64_t it : {0, 25, 50, 75, 99, 150})
    CHECK_THAT(s.lr_at(3, it), WithinRel(cyclical_lr(it, 0.001, 0.01, 100), 1e-15));

  s.kind = "warm_restart";
  CHECK_THROWS_WITH(s.lr_at(0, 0), ContainsSubstring("unknown kind"));
}

TEST_CASE("frames map between source and input coordinates", "[detector]") {
  const Frame f = full_frame(100, 200, 50, 50);
  CHECK(f.y0 == 0);
  CHECK(f.sy == 0.5);
  CHECK(f.sx == 0.25);
  const Point p{80, 40};
  const Point q = f.to_input(p);
  CHECK_THAT(q.x, WithinAbs(20.0, 1e-12));
  CHECK_THAT(q.y, WithinAbs(20.0, 1e-12));
  const Point r = f.to_source(q);
  CHECK_THAT(r.x, WithinAbs(p.x, 1e-12));
  CHECK_THAT(r.y, WithinAbs(p.y, 1e-12));

  const BoundingBox b{10, 20, 30, 40};
  const BoundingBox rb = f.to_source(f.to_input(b));
  CHECK_THAT(rb.x_min, WithinAbs(b.x_min, 1e-12));
  CHECK_THAT(rb.y_max, WithinAbs(b.y_max, 1e-12));
}

TEST_CASE("the plateau window brackets the joint line", "[detector]") {
  KeypointSet kp;
  kp.tibial_plateau_left = {60, 140};
  kp.tibial_plateau_right = {196, 140};
  kp.femoral_condyle_left = {64, 100};
  kp.femoral_condyle_right = {192, 100};

  const CropWindow w = plateau_window(kp, 256, 256);
  CHECK_THAT(w.y0, WithinAbs(110.0, 1e-12));  // 140 - 0.75 * 40
  CHECK_THAT(w.y1, WithinAbs(150.0, 1e-12));  // 140 + 0.25 * 40
  CHECK_THAT(w.x0, WithinAbs(60.0, 1e-12));
  CHECK_THAT(w.x1, WithinAbs(196.0, 1e-12));

  // window corners land on the input corners
  const Frame f = window_frame(w, 64, 64);
  const Point tl = f.to_input(Point{w.x0, w.y0});
  const Point br = f.to_input(Point{w.x1, w.y1});
  CHECK_THAT(tl.x, WithinAbs(0.0, 1e-12));
  CHECK_THAT(tl.y, WithinAbs(0.0, 1e-12));
  CHECK_THAT(br.x, WithinAbs(64.0, 1e-12));
  CHECK_THAT(br.y, WithinAbs(64.0, 1e-12));

  // the band clamps to the image
  const CropWindow clamped = plateau_window(kp, 144, 256);
  CHECK(clamped.y1 == 144.0);

  KeypointSet flat = kp;
  flat.femoral_condyle_left.y = flat.femoral_condyle_right.y = 140;  // gap 0
  CHECK_THROWS_WITH(plateau_window(flat, 256, 256), ContainsSubstring("degenerate landmarks"));
  KeypointSet narrow = kp;
  narrow.tibial_plateau_right.x = narrow.tibial_plateau_left.x + 0.5;  // span ~0
  CHECK_THROWS_WITH(plateau_window(narrow, 256, 256), ContainsSubstring("degenerate landmarks"));
}

TEST_CASE("resizing the full frame equals plain bilinear resize", "[detector]") {
  const Image src = checker_image(40, 56);
  const Frame f = full_frame(40, 56, 20, 28);
  const Image a = frame_resize(src, f, 20, 28);
  const Image b = resize_bilinear(src, 20, 28);
  REQUIRE(a.pixels.size() == b.pixels.size());
  CHECK(a.pixels == b.pixels);
}

TEST_CASE("unit-scale warp matches the plain rotation", "[detector]") {
  const Image img = checker_image(33, 33);
  const Image a = warp_affine(img, 12.5, 1.0);
  const Image b = rotate_raster(img, 12.5);
  REQUIRE(a.pixels.size() == b.pixels.size());
  double worst = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]));
  CHECK(worst < 1e-6);

  const Image same = warp_affine(img, 0.0, 1.0);
  CHECK(same.pixels == img.pixels);
  CHECK_THROWS_WITH(warp_affine(img, 5.0, 0.0), ContainsSubstring("scale must be positive"));
  CHECK_THROWS_WITH(warp_affine(img, 5.0, -1.0), ContainsSubstring("scale must be positive"));
}

TEST_CASE("point and box warps are a rotation then scaling about the center", "[detector]") {
  // pure scaling doubles the offset from the center (16, 16)
  const Point p{20, 10};
  const Point s = warp_point(p, 0.0, 2.0, 32, 32);
  CHECK_THAT(s.x, WithinAbs(24.0, 1e-12));
  CHECK_THAT(s.y, WithinAbs(4.0, 1e-12));

  // 90 degrees: (x,y) -> (cx - dy, cy + dx)
  const Point r = warp_point(p, 90.0, 1.0, 32, 32);
  CHECK_THAT(r.x, WithinAbs(22.0, 1e-9));
  CHECK_THAT(r.y, WithinAbs(20.0, 1e-9));

  const BoundingBox b{10, 20, 20, 40};
  const BoundingBox h = warp_box(b, 90.0, 1.0, 32, 32);
  CHECK_THAT(h.x_min, WithinAbs(-8.0, 1e-9));
  CHECK_THAT(h.x_max, WithinAbs(12.0, 1e-9));
  CHECK_THAT(h.y_min, WithinAbs(10.0, 1e-9));
  CHECK_THAT(h.y_max, WithinAbs(20.0, 1e-9));

  // warping a box by a multiple of 90 degrees preserves its area
  CHECK_THAT(h.area(), WithinRel(b.area(), 1e-9));
}

TEST_CASE("flip augmentation mirrors image and targets together", "[detector]") {
  Sample s;
  s.image = checker_image(32, 32);
  s.boxes = {{4, 8, 12, 16}};
  KeypointSet kp;
  kp.tibial_plateau_left = {6, 20};
  kp.tibial_plateau_right = {26, 21};
  kp.femoral_condyle_left = {7, 10};
  kp.femoral_condyle_right = {25, 11};
  s.keypoints = kp;
  s.varus_angle = 5.0;
  s.width_frac = {0.1, 0.2};
  s.has_widths = true;
  s.mask_image = Image(32, 32);
  s.mask_image->at(3, 5) = 1.0f;

  AugmentConfig a;
  a.flips = true;
  a.prob = 1.0;
  Rng rng(4);
  const Sample out = augment_sample(s, a, rng);
  CHECK(out.image.pixels == hflip(s.image).pixels);
  CHECK(out.mask_image->at(3, 32 - 1 - 5) == 1.0f);
  REQUIRE(out.boxes.size() == 1);
  CHECK_THAT(out.boxes[0].x_min, WithinAbs(32 - 12.0, 1e-12));
  CHECK_THAT(out.boxes[0].x_max, WithinAbs(32 - 4.0, 1e-12));
  CHECK(out.boxes[0].y_min == 8.0);
  // mirroring swaps anatomical sides so left stays left of right
  CHECK_THAT(out.keypoints->tibial_plateau_left.x, WithinAbs(32 - 26.0, 1e-12));
  CHECK_THAT(out.keypoints->tibial_plateau_left.y, WithinAbs(21.0, 1e-12));
  CHECK_THAT(out.keypoints->tibial_plateau_right.x, WithinAbs(32 - 6.0, 1e-12));
  CHECK(out.keypoints->tibial_plateau_left.x < out.keypoints->tibial_plateau_right.x);
  CHECK(out.varus_angle == -5.0);
  CHECK(out.width_frac.medial == 0.2);
  CHECK(out.width_frac.lateral == 0.1);
}

TEST_CASE("geometric augmentation keeps targets coherent with the warp", "[detector]") {
  Sample s;
  s.image = checker_image(32, 32);
  KeypointSet kp;
  kp.tibial_plateau_left = {8, 22};
  kp.tibial_plateau_right = {24, 22};
  kp.femoral_condyle_left = {9, 12};
  kp.femoral_condyle_right = {23, 12};
  s.keypoints = kp;
  s.width_frac = {0.12, 0.18};
  s.has_widths = true;
  s.mask_image = Image(32, 32);
  for (int y = 8; y < 16; ++y)
    for (int x = 8; x < 16; ++x) s.mask_image->at(y, x) = 1.0f;

  SECTION("rotation preserves distance from the center") {
    AugmentConfig a;
    a.rotations = true;
    a.rotation_max_deg = 15.0;
    a.prob = 1.0;
    Rng rng(9);
    const Sample out = augment_sample(s, a, rng);
    const Point c{16, 16};
    const auto before = s.keypoints->points();
    const auto after = out.keypoints->points();
    for (int j = 0; j < 4; ++j) {
      const double d0 = std::hypot(before[j].x - c.x, before[j].y - c.y);
      const double d1 = std::hypot(after[j].x - c.x, after[j].y - c.y);
      CHECK_THAT(d1, WithinAbs(d0, 1e-9));
    }
    CHECK(out.width_frac.medial == s.width_frac.medial);  // rotation keeps scale
    for (float v : out.mask_image->pixels) CHECK((v == 0.0f || v == 1.0f));
  }

  SECTION("scaling stretches keypoints and widths by the same factor") {
    AugmentConfig a;
    a.scaling = true;
    a.scale_delta = 0.1;
    a.prob = 1.0;
    Rng rng(10);
    const Sample out = augment_sample(s, a, rng);
    const double k = out.width_frac.medial / s.width_frac.medial;
    CHECK(k >= 0.9);
    CHECK(k <= 1.1);
    CHECK_THAT(out.width_frac.lateral, WithinRel(s.width_frac.lateral * k, 1e-12));
    const Point c{16, 16};
    const auto before = s.keypoints->points();
    const auto after = out.keypoints->points();
    for (int j = 0; j < 4; ++j) {
      const double d0 = std::hypot(before[j].x - c.x, before[j].y - c.y);
      const double d1 = std::hypot(after[j].x - c.x, after[j].y - c.y);
      CHECK_THAT(d1, WithinRel(d0 * k, 1e-9));
    }
  }

  SECTION("brightness shifts every pixel by one constant") {
    Sample flat;
    flat.image = Image(16, 16);
    for (auto& v : flat.image.pixels) v = 0.5f;
    AugmentConfig a;
    a.brightness = true;
    a.brightness_delta = 0.2;
    a.prob = 1.0;
    Rng rng(11);
    const Sample out = augment_sample(flat, a, rng);
    const float d = out.image.pixels[0] - 0.5f;
    CHECK(std::abs(d) <= 0.2f);
    for (float v : out.image.pixels) CHECK(v == 0.5f + d);
  }

  SECTION("the same rng state reproduces the same augmentation") {
    AugmentConfig a;
    a.rotations = a.flips = a.scaling = a.brightness = true;
    a.prob = 0.5;
    Rng r1(77), r2(77), r3(78);
    const Sample o1 = augment_sample(s, a, r1);
    const Sample o2 = augment_sample(s, a, r2);
    CHECK(o1.image.pixels == o2.image.pixels);
    CHECK(o1.width_frac.medial == o2.width_frac.medial);
    CHECK(o1.keypoints->tibial_plateau_left.x == o2.keypoints->tibial_plateau_left.x);
    const Sample o3 = augment_sample(s, a, r3);
    const bool same = o3.image.pixels == o1.image.pixels &&
                      o3.width_frac.medial == o1.width_frac.medial;
    CHECK_FALSE(same);
  }
}

TEST_CASE("samples carry per-task targets in input coordinates", "[detector]") {
  const Image src = checker_image(100, 100);
  AnnotationSet ann;
  ann.joint_space_widths = JointSpaceWidths{30, 40};
  ann.sclerosis_boxes = {{10, 20, 30, 40}};
  ann.oa_grade = 2;
  AlignmentAnnotation al;
  al.keypoints.tibial_plateau_left = {20, 60};
  al.keypoints.tibial_plateau_right = {80, 60};
  al.keypoints.femoral_condyle_left = {22, 40};
  al.keypoints.femoral_condyle_right = {78, 40};
  al.varus_valgus_angle = -3.0;
  al.misaligned = true;
  ann.alignment = al;
  Mask m;
  m.y0 = 10;
  m.x0 = 10;
  m.height = m.width = 20;
  m.data.assign(400, 1);
  ann.soft_tissue_masks = {m};

  TrainingConfig reg = builtin_config("joint_space");
  reg.input_h = reg.input_w = 50;
  const Sample sr = build_sample(reg, "s1", src, ann);
  CHECK(sr.scan_id == "s1");
  CHECK(sr.has_widths);
  CHECK_THAT(sr.width_frac.medial, WithinRel(0.30, 1e-12));
  CHECK_THAT(sr.width_frac.lateral, WithinRel(0.40, 1e-12));
  CHECK(sr.source_h == 100.0);
  CHECK(sr.image.height == 50);

  TrainingConfig det = builtin_config("sclerosis");
  det.input_h = det.input_w = 50;
  const Sample sd = build_sample(det, "s1", src, ann);
  REQUIRE(sd.boxes.size() == 1);
  CHECK_THAT(sd.boxes[0].x_min, WithinAbs(5.0, 1e-12));
  CHECK_THAT(sd.boxes[0].y_min, WithinAbs(10.0, 1e-12));
  CHECK_THAT(sd.boxes[0].x_max, WithinAbs(15.0, 1e-12));
  CHECK_THAT(sd.boxes[0].y_max, WithinAbs(20.0, 1e-12));

  TrainingConfig seg = builtin_config("soft_tissue");
  seg.input_h = seg.input_w = 50;
  const Sample ss = build_sample(seg, "s1", src, ann);
  REQUIRE(ss.mask_image.has_value());
  CHECK(ss.mask_image->height == 50);
  for (float v : ss.mask_image->pixels) CHECK((v == 0.0f || v == 1.0f));
  CHECK(ss.mask_image->at(10, 10) == 1.0f);  // center of the scaled mask
  CHECK(ss.mask_image->at(40, 40) == 0.0f);

  TrainingConfig kc = builtin_config("alignment");
  kc.input_h = kc.input_w = 50;
  const Sample sk = build_sample(kc, "s1", src, ann);
  REQUIRE(sk.keypoints.has_value());
  CHECK_THAT(sk.keypoints->tibial_plateau_left.x, WithinAbs(10.0, 1e-12));
  CHECK_THAT(sk.keypoints->tibial_plateau_left.y, WithinAbs(30.0, 1e-12));
  CHECK(sk.varus_angle == -3.0);
  CHECK(sk.misaligned);

  TrainingConfig cls = tiny_classifier_config(4);
  const Sample sc = build_sample(cls, "s1", src, ann);
  CHECK(sc.label == 2);

  // the spike detector crops to the plateau band
  TrainingConfig spike = builtin_config("tibial_spike");
  spike.input_h = spike.input_w = 32;
  ann.tibial_spike_boxes = {{45, 58, 55, 62}};
  const Sample sp = build_sample(spike, "s1", src, ann);
  REQUIRE(sp.boxes.size() == 1);
  const CropWindow w = plateau_window(al.keypoints, 100, 100);
  const Frame f = window_frame(w, 32, 32);
  const BoundingBox expect = f.to_input(ann.tibial_spike_boxes[0]);
  CHECK_THAT(sp.boxes[0].x_min, WithinAbs(expect.x_min, 1e-9));
  CHECK_THAT(sp.boxes[0].y_max, WithinAbs(expect.y_max, 1e-9));
}

TEST_CASE("samples require the annotations their task consumes", "[detector]") {
  const Image src = checker_image(100, 100);
  const AnnotationSet empty;
  CHECK_THROWS_WITH(build_sample(builtin_config("joint_space"), "x", src, empty),
                    ContainsSubstring("lacks joint space widths"));
  CHECK_THROWS_WITH(build_sample(builtin_config("alignment"), "x", src, empty),
                    ContainsSubstring("lacks alignment annotations"));
  CHECK_THROWS_WITH(build_sample(tiny_classifier_config(4), "x", src, empty),
                    ContainsSubstring("lacks a grade label"));
  CHECK_THROWS_WITH(build_sample(builtin_config("tibial_spike"), "x", src, empty),
                    ContainsSubstring("needs landmark annotations"));
  // detection and segmentation tolerate empty annotation lists
  CHECK_NOTHROW(build_sample(builtin_config("sclerosis"), "x", src, empty));
  CHECK_NOTHROW(build_sample(builtin_config("soft_tissue"), "x", src, empty));
}

TEST_CASE("in-memory classification samples resize and label", "[detector]") {
  const TrainingConfig cfg = tiny_classifier_config();
  std::vector<std::pair<Image, int>> data;
  data.emplace_back(checker_image(40, 40), 0);
  data.emplace_back(checker_image(24, 24), 1);
  const auto samples = samples_from_images(cfg, data);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].image.height == 16);
  CHECK(samples[1].image.width == 16);
  CHECK(samples[0].label == 0);
  CHECK(samples[1].label == 1);
  CHECK(samples[0].source_h == 40.0);
  CHECK_THROWS_WITH(samples_from_images(cfg, {}), ContainsSubstring("no samples given"));
}

TEST_CASE("photometric normalization keeps geometry", "[detector]") {
  PreprocessSpec spec;
  spec.window_low = 5;
  spec.window_high = 95;
  const Image img = checker_image(48, 72);
  const Image out = normalize_photometric(spec, img);
  CHECK(out.height == 48);
  CHECK(out.width == 72);
  for (float v : out.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("decoded detections come from thresholded, nms-filtered anchors", "[detector]") {
  const TrainingConfig cfg = tiny_detection_config({"bce", "smooth_l1"});
  ForwardOut fo;
  Tensor obj(1, 1, 4, 4), delta(1, 4, 4, 4);
  for (auto& v : obj.v) v = -10.0f;
  obj.at(0, 0, 1, 2) = 2.0f;
  delta.at(0, 0, 1, 2) = 0.25f;
  delta.at(0, 1, 1, 2) = -0.25f;
  delta.at(0, 2, 1, 2) = static_cast<float>(std::log(2.0));
  delta.at(0, 3, 1, 2) = 0.0f;
  fo.outs.emplace_back("obj", obj);
  fo.outs.emplace_back("delta", delta);

  auto kept = decode_detections(cfg, fo);
  REQUIRE(kept.size() == 1);
  // anchor (cx 20, cy 12, 8x8) shifted by (0.25, -0.25) and doubled in width
  CHECK_THAT(kept[0].box.x_min, WithinAbs(14.0, 1e-9));
  CHECK_THAT(kept[0].box.y_min, WithinAbs(6.0, 1e-9));
  CHECK_THAT(kept[0].box.x_max, WithinAbs(30.0, 1e-9));
  CHECK_THAT(kept[0].box.y_max, WithinAbs(14.0, 1e-9));
  CHECK_THAT(kept[0].confidence, WithinAbs(1.0 / (1.0 + std::exp(-2.0)), 1e-12));

  // a lower-scored anchor decoding to the same box is suppressed
  Tensor& obj2 = fo.outs[0].second;
  Tensor& delta2 = fo.outs[1].second;
  obj2.at(0, 0, 1, 1) = 1.0f;
  delta2.at(0, 0, 1, 1) = 1.25f;  // (22 - 12) / 8
  delta2.at(0, 1, 1, 1) = -0.25f;
  delta2.at(0, 2, 1, 1) = static_cast<float>(std::log(2.0));
  kept = decode_detections(cfg, fo);
  REQUIRE(kept.size() == 1);
  CHECK_THAT(kept[0].confidence, WithinAbs(1.0 / (1.0 + std::exp(-2.0)), 1e-12));

  // a probability exactly at the threshold survives; the decoded anchor box
  // at (3,0) has zero deltas
  obj2.at(0, 0, 3, 0) = 0.0f;
  kept = decode_detections(cfg, fo);
  REQUIRE(kept.size() == 2);
  CHECK_THAT(kept[1].confidence, WithinAbs(0.5, 1e-12));
  CHECK_THAT(kept[1].box.x_min, WithinAbs(0.0, 1e-9));
  CHECK_THAT(kept[1].box.y_min, WithinAbs(24.0, 1e-9));
  CHECK_THAT(kept[1].box.x_max, WithinAbs(8.0, 1e-9));

  // a confident anchor pushed fully outside the input is dropped
  obj2.at(0, 0, 0, 3) = 3.0f;
  delta2.at(0, 0, 0, 3) = 10.0f;
  kept = decode_detections(cfg, fo);
  CHECK(kept.size() == 2);
}

TEST_CASE("models save and load bit for bit", "[detector]") {
  TempDir tmp("model");
  TrainingConfig cfg = tiny_classifier_config(4);
  TaskModel m = build_model(cfg, 42);
  const std::string path = tmp.file("grading.kxrc");
  save_model(path, m, json{{"note", "fixture"}});

  TaskModel back = load_model(path);
  CHECK(to_json(back.config).dump() == to_json(cfg).dump());
  auto pa = m.params(), pb = back.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);

  // loaded model predicts identically
  const Image img = checker_image(20, 20);
  const auto g1 = predict(m, img).grade;
  const auto g2 = predict(back, img).grade;
  REQUIRE(g1.has_value());
  CHECK(g1->probs == g2->probs);
  CHECK(g1->grade == g2->grade);

  nn::Param p("w", 2);
  const std::string other = tmp.file("other.kxrc");
  nn::write_checkpoint(other, json{{"format", "something-else"}}, {&p});
  CHECK_THROWS_WITH(load_model(other), ContainsSubstring("not a model file"));
}

TEST_CASE("model seeding is deterministic and head-specific", "[detector]") {
  const TrainingConfig cfg = tiny_classifier_config(4);
  TaskModel a = build_model(cfg, 7), b = build_model(cfg, 7), c = build_model(cfg, 8);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  bool same = true, differs = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    same = same && pa[i]->value == pb[i]->value;
    differs = differs || pa[i]->value != pc[i]->value;
  }
  CHECK(same);
  CHECK(differs);
  CHECK(a.has_head("out"));
  CHECK_FALSE(a.has_head("obj"));
  CHECK_THROWS_WITH(a.head("obj"), ContainsSubstring("no head"));
}

TEST_CASE("regression loss gradients match central differences", "[detector]") {
  const TrainingConfig cfg = builtin_config("joint_space");
  std::vector<Sample> samples(2);
  samples[0].width_frac = {0.125, 0.25};
  samples[0].has_widths = true;
  samples[1].width_frac = {0.0625, 0.1875};
  samples[1].has_widths = true;
  Batch b;
  for (const auto& s : samples) b.samples.push_back(&s);

  ForwardOut fo;
  Tensor out(2, 2, 1, 1);
  Rng rng(3);
  for (auto& v : out.v) v = gridf(rng);
  fo.outs.emplace_back("out", out);
  check_head_gradients(cfg, b, fo, nullptr, 1e-3);
}

TEST_CASE("classification loss gradients match central differences", "[detector]") {
  const TrainingConfig cfg = tiny_classifier_config(4);
  std::vector<Sample> samples(3);
  samples[0].label = 0;
  samples[1].label = 2;
  samples[2].label = 3;
  Batch b;
  for (const auto& s : samples) b.samples.push_back(&s);

  ForwardOut fo;
  Tensor out(3, 4, 1, 1);
  Rng rng(5);
  for (auto& v : out.v) v = 2.0f * gridf(rng);
  fo.outs.emplace_back("out", out);
  check_head_gradients(cfg, b, fo, nullptr, 1e-3);
}

TEST_CASE("keypoint loss gradients match central differences", "[detector]") {
  const TrainingConfig cfg = builtin_config("alignment");
  std::vector<Sample> samples(2);
  for (auto& s : samples) s.image = Image(32, 32);
  KeypointSet kp;
  kp.tibial_plateau_left = {8, 20};
  kp.tibial_plateau_right = {24, 20};
  kp.femoral_condyle_left = {9, 12};
  kp.femoral_condyle_right = {23, 12};
  samples[0].keypoints = kp;
  samples[0].varus_angle = 6.0;
  samples[0].misaligned = true;
  samples[1].keypoints = kp;
  samples[1].varus_angle = -2.0;
  samples[1].misaligned = false;
  Batch b;
  for (const auto& s : samples) b.samples.push_back(&s);

  ForwardOut fo;
  Tensor out(2, 10, 1, 1);
  Rng rng(6);
  for (auto& v : out.v) v = gridf(rng);
  fo.outs.emplace_back("out", out);
  check_head_gradients(cfg, b, fo, nullptr, 1e-3);
}

TEST_CASE("detection loss gradients match central differences", "[detector]") {
  // 4x4 grid of 8x8 anchors; gt0 sits exactly on anchor (1,1); gt1 straddles
  // anchors (1,2) and (1,3) equally, so (1,2) is forced positive and (1,3)
  // lands in the ignore band
  const std::vector<BoundingBox> gts = {{8, 8, 16, 16}, {20, 8, 28, 16}};

  for (const char* kind : {"bce", "focal"}) {
    DYNAMIC_SECTION("objectness term: " << kind) {
      const TrainingConfig cfg = tiny_detection_config({kind, "smooth_l1"});
      const auto anchors = anchor_grid(cfg.input_h, cfg.input_w, cfg.anchors->stride,
                                       cfg.anchors->scales, cfg.anchors->ratios);
      const AnchorMatch match = match_anchors(anchors, gts, 0.5, 0.3);
      REQUIRE(match.assignment[1 * 4 + 1] == 0);
      REQUIRE(match.assignment[1 * 4 + 2] == 1);
      REQUIRE(match.assignment[1 * 4 + 3] == AnchorMatch::Ignore);
      REQUIRE(match.assignment[0] == AnchorMatch::Negative);

      std::vector<Sample> samples(1);
      samples[0].boxes = gts;
      Batch b;
      b.samples.push_back(&samples[0]);

      ForwardOut fo;
      Tensor obj(1, 1, 4, 4), delta(1, 4, 4, 4);
      Rng rng(8);
      for (auto& v : obj.v) v = 2.0f * gridf(rng);
      for (auto& v : delta.v) v = gridf(rng);
      fo.outs.emplace_back("obj", obj);
      fo.outs.emplace_back("delta", delta);
      check_head_gradients(cfg, b, fo, &anchors, 5e-3);

      // ignored anchors contribute nothing
      std::vector<std::pair<std::string, nn::Tensor>> grads;
      task_loss(cfg, b, fo, grads, &anchors);
      CHECK(grads[0].second.at(0, 0, 1, 3) == 0.0f);
    }
  }
}

TEST_CASE("segmentation loss gradients match central differences", "[detector]") {
  std::vector<Sample> samples(1);
  samples[0].image = Image(32, 32);
  samples[0].mask_image = Image(32, 32);
  for (int y = 8; y < 16; ++y)
    for (int x = 12; x < 20; ++x) samples[0].mask_image->at(y, x) = 1.0f;
  Batch b;
  b.samples.push_back(&samples[0]);

  for (auto terms : {std::vector<std::string>{"bce", "smooth_l1"},
                     std::vector<std::string>{"dice", "bce"}}) {
    TrainingConfig cfg = builtin_config("postop");
    cfg.input_h = cfg.input_w = 32;
    cfg.loss_terms = terms;

    ForwardOut fo;
    Tensor mask(1, 1, 8, 8);
    Rng rng(12);
    for (auto& v : mask.v) v = 2.0f * gridf(rng);
    fo.outs.emplace_back("mask", mask);
    if (std::find(terms.begin(), terms.end(), "smooth_l1") != terms.end()) {
      Tensor box(1, 4, 1, 1);
      for (auto& v : box.v) v = 0.25f + 0.5f * gridf(rng);
      fo.outs.emplace_back("box", box);
    }
    check_head_gradients(cfg, b, fo, nullptr, 5e-3);
  }
}

TEST_CASE("predictions map head outputs back to source coordinates", "[detector]") {
  TrainingConfig cfg = builtin_config("alignment");
  cfg.input_h = cfg.input_w = 32;
  TaskModel m = build_model(cfg, 21);
  const Image src = checker_image(64, 64);
  const Prediction pred = predict(m, src);
  REQUIRE(pred.landmarks.has_value());
  REQUIRE(pred.alignment.has_value());

  const Frame f = full_frame(64, 64, 32, 32);
  const ForwardOut fo =
      forward_model(m, nn::tensor_from_image(frame_resize(src, f, 32, 32)), false);
  const nn::Tensor& o = fo.get("out");
  const auto pts = pred.landmarks->points();
  for (int j = 0; j < 4; ++j) {
    const Point expect = f.to_source(Point{o.v[2 * j] * 32.0, o.v[2 * j + 1] * 32.0});
    CHECK_THAT(pts[j].x, WithinAbs(expect.x, 1e-9));
    CHECK_THAT(pts[j].y, WithinAbs(expect.y, 1e-9));
  }
  CHECK_THAT(pred.alignment->angle, WithinAbs(o.v[8] * 45.0, 1e-9));
  CHECK_THAT(pred.alignment->misaligned_prob,
             WithinAbs(1.0 / (1.0 + std::exp(-static_cast<double>(o.v[9]))), 1e-12));

  TrainingConfig reg = builtin_config("joint_space");
  reg.input_h = reg.input_w = 32;
  reg.base_channels = 2;
  TaskModel rm = build_model(reg, 22);
  const Prediction rp = predict(rm, src);
  REQUIRE(rp.widths.has_value());
  const ForwardOut rfo =
      forward_model(rm, nn::tensor_from_image(frame_resize(src, f, 32, 32)), false);
  CHECK_THAT(rp.widths->medial,
             WithinAbs(std::max(0.0, static_cast<double>(rfo.get("out").v[0])) * 64.0, 1e-9));

  TrainingConfig spike = tiny_detection_config({"focal", "smooth_l1"});
  TaskModel sm = build_model(spike, 23);
  CHECK_THROWS_WITH(predict(sm, src), ContainsSubstring("needs landmarks"));
}

TEST_CASE("the validation metric tracks the task", "[detector]") {
  CHECK(std::string(metric_name("regression")) == "val_mse");
  CHECK(std::string(metric_name("detection")) == "val_f1");
  CHECK(std::string(metric_name("classification")) == "val_accuracy");
  CHECK(std::string(metric_name("keypoint+classification")) == "val_keypoint_px");
  CHECK(std::string(metric_name("segmentation")) == "val_dice");
  CHECK(metric_lower_is_better("regression"));
  CHECK(metric_lower_is_better("keypoint+classification"));
  CHECK_FALSE(metric_lower_is_better("detection"));
  CHECK_FALSE(metric_lower_is_better("classification"));
  CHECK_FALSE(metric_lower_is_better("segmentation"));
}

TEST_CASE("training steps reduce the loss on a separable toy set", "[detector]") {
  TrainingConfig cfg = tiny_classifier_config();
  std::vector<std::pair<Image, int>> data;
  Rng rng(14);
  for (int i = 0; i < 12; ++i) {
    Image img(16, 16);
    const float base = (i % 2) ? 0.85f : 0.15f;
    for (auto& v : img.pixels) v = base + 0.05f * gridf(rng);
    data.emplace_back(std::move(img), i % 2);
  }
  auto samples = samples_from_images(cfg, data);
  std::vector<Sample> train(samples.begin(), samples.begin() + 8);
  std::vector<Sample> val(samples.begin() + 8, samples.end());

  const Trained t = train_on_samples(cfg, train, val, 6, 31);
  REQUIRE(t.history.epochs.size() == 6);
  CHECK(t.history.metric == "val_accuracy");
  CHECK(t.history.epochs.front().lr == cfg.schedule.base);
  CHECK(t.history.best_epoch >= 0);
  CHECK(t.history.best_epoch < 6);
  CHECK(t.history.epochs.back().train_loss < t.history.epochs.front().train_loss);

  // the returned parameters are the best epoch's snapshot
  TaskModel model = t.model;
  const double metric = eval_model(model, val);
  CHECK_THAT(metric, WithinAbs(t.history.epochs[t.history.best_epoch].val_metric, 1e-12));
  double best = -1;
  for (const auto& e : t.history.epochs) best = std::max(best, e.val_metric);
  CHECK_THAT(metric, WithinAbs(best, 1e-12));
  CHECK(metric >= 0.5);
}

TEST_CASE("training is reproducible from the seed", "[detector]") {
  TrainingConfig cfg = tiny_classifier_config();
  cfg.augment.flips = true;  // exercise the augmentation path too
  cfg.augment.brightness = true;
  std::vector<std::pair<Image, int>> data;
  Rng rng(15);
  for (int i = 0; i < 6; ++i) {
    Image img(16, 16);
    for (auto& v : img.pixels) v = 0.5f + 0.3f * gridf(rng);
    data.emplace_back(std::move(img), i % 2);
  }
  const auto samples = samples_from_images(cfg, data);

  Trained a = train_on_samples(cfg, samples, {}, 3, 99);
  Trained b = train_on_samples(cfg, samples, {}, 3, 99);
  Trained c = train_on_samples(cfg, samples, {}, 3, 100);
  const auto pa = a.model.params(), pb = b.model.params(), pc = c.model.params();
  bool same = true, differs = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    same = same && pa[i]->value == pb[i]->value;
    differs = differs || pa[i]->value != pc[i]->value;
  }
  CHECK(same);
  CHECK(differs);
  for (size_t e = 0; e < a.history.epochs.size(); ++e)
    CHECK(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);

  // without validation data the last epoch's weights are kept
  CHECK(a.history.best_epoch == 2);
  for (const auto& e : a.history.epochs) CHECK(e.val_metric == 0.0);
}

TEST_CASE("training rejects unusable inputs", "[detector]") {
  const TrainingConfig cfg = tiny_classifier_config();
  std::vector<Sample> none;
  CHECK_THROWS_WITH(train_on_samples(cfg, none, {}, 1, 1), ContainsSubstring("no training samples"));
  std::vector<std::pair<Image, int>> data;
  data.emplace_back(checker_image(16, 16), 0);
  const auto samples = samples_from_images(cfg, data);
  CHECK_THROWS_WITH(train_on_samples(cfg, samples, {}, 0, 1), ContainsSubstring("epochs must be >= 1"));
}
