// Synthetic knee radiographs with exactly known ground truth.
//
// Layout (canonical, unrotated AP frame; x right, y down, all lengths px):
//   femur occupies the top, tibia the bottom, separated by a dark joint gap.
//   The gap height G = 0.17*H is fixed; per-compartment joint-space widths are
//   realized by femoral condyle lobes that dip DOWN into the gap by G - width,
//   so the four landmark points (condyle/plateau pairs) stay horizontally
//   level regardless of widths, alignment tilt, or pathology load.
//   Lateral view = mirrored layout + patella; "rotation" of r degrees maps
//   content and annotations through R(-r) about the image center, so a level
//   landmark pair measures -r afterwards.
#pragma once

#include <filesystem>

#include "kxr/image.hpp"
#include "kxr/manifest.hpp"
#include "kxr/png_io.hpp"
#include "kxr/serialize.hpp"

namespace kxr {

constexpr double kMisalignmentCutDeg = 5.0;  // |varus/valgus| at or past this => misaligned

struct PhantomSpec {
  int height = 256;
  int width = 256;
  JointSpaceWidths joint_space{34.0, 36.0};
  int sclerosis_count = 0;
  double sclerosis_boost = 0.6;  // density boost in (0,1]
  int osteophyte_count = 0;
  double osteophyte_min_size = 8.0;  // protrusion length, px
  double osteophyte_max_size = 15.0;
  bool implants = false;
  double alignment_angle = 0.0;  // varus/valgus, degrees
  int soft_tissue_count = 0;
  double tibial_spike_height = 0.0;  // px, 0 = no spikes
  int oa_grade = 0;
  double noise_sigma = 0.01;
  double rotation = 0.0;  // degrees
  std::string view = "AP";
  std::array<double, 3> grade_cuts{30.0, 22.0, 14.0};  // min-width thresholds at 256-row scale

  double scale() const { return height / 256.0; }
  double max_gap() const { return 0.17 * height; }

  // Grade rule: thresholds on min(medial, lateral); width at a cut takes the
  // milder grade. Cuts are expressed at 256-row scale and scaled with height.
  int grade_for(double min_width) const {
    const double s = scale();
    if (min_width >= grade_cuts[0] * s) return 0;
    if (min_width >= grade_cuts[1] * s) return 1;
    if (min_width >= grade_cuts[2] * s) return 2;
    return 3;
  }
  int derived_grade() const { return grade_for(std::min(joint_space.medial, joint_space.lateral)); }

  void validate() const {
    if (height < 64 || width < 64) throw SpecError("phantom: image below 64x64");
    const double G = max_gap();
    if (joint_space.medial >= height || joint_space.lateral >= height)
      throw SpecError("phantom: joint_space exceeds image height");
    if (joint_space.medial <= 0 || joint_space.lateral <= 0)
      throw SpecError("phantom: joint_space must be positive");
    if (joint_space.medial > G || joint_space.lateral > G)
      throw SpecError("phantom: joint_space exceeds the maximum gap (0.17*height)");
    if (sclerosis_count < 0 || sclerosis_count > 4)
      throw SpecError("phantom: sclerosis count outside [0,4]");
    if (sclerosis_count > 0 && !(sclerosis_boost > 0.0 && sclerosis_boost <= 1.0))
      throw SpecError("phantom: sclerosis density boost outside (0,1]");
    if (osteophyte_count < 0 || osteophyte_count > 4)
      throw SpecError("phantom: osteophyte count outside [0,4]");
    if (osteophyte_count > 0) {
      if (osteophyte_min_size < 3.0 || osteophyte_min_size > osteophyte_max_size)
        throw SpecError("phantom: bad osteophyte size range");
      if (osteophyte_max_size > 0.06 * width)
        throw SpecError("phantom: osteophyte size exceeds margin budget");
    }
    if (std::abs(alignment_angle) > 45.0) throw SpecError("phantom: alignment_angle outside [-45,45]");
    if (soft_tissue_count < 0 || soft_tissue_count > 3)
      throw SpecError("phantom: soft_tissue count outside [0,3]");
    if (tibial_spike_height < 0.0 || tibial_spike_height > 0.5 * G)
      throw SpecError("phantom: tibial_spike_height outside [0, 0.5*gap]");
    if (noise_sigma < 0.0 || noise_sigma > 0.2) throw SpecError("phantom: noise_sigma outside [0,0.2]");
    if (std::abs(rotation) > 30.0) throw SpecError("phantom: rotation outside [-30,30]");
    if (view != "AP" && view != "Lateral") throw SpecError("phantom: view must be AP or Lateral");
    if (!(grade_cuts[0] > grade_cuts[1] && grade_cuts[1] > grade_cuts[2] && grade_cuts[2] > 0))
      throw SpecError("phantom: grade_cuts must be strictly decreasing and positive");
    if (grade_cuts[0] * scale() >= max_gap())
      throw SpecError("phantom: top grade cut is not below the maximum gap");
    if (oa_grade != derived_grade())
      throw SpecError("phantom: oa_grade inconsistent with joint_space widths");
  }
};

inline json to_json(const PhantomSpec& p) {
  return {{"image_size", {p.height, p.width}},
          {"joint_space", {{"medial", p.joint_space.medial}, {"lateral", p.joint_space.lateral}}},
          {"sclerosis", {{"count", p.sclerosis_count}, {"density_boost", p.sclerosis_boost}}},
          {"osteophytes",
           {{"count", p.osteophyte_count}, {"size_range", {p.osteophyte_min_size, p.osteophyte_max_size}}}},
          {"implants", p.implants},
          {"alignment_angle", p.alignment_angle},
          {"soft_tissue", {{"count", p.soft_tissue_count}}},
          {"tibial_spike_height", p.tibial_spike_height},
          {"oa_grade", p.oa_grade},
          {"noise_sigma", p.noise_sigma},
          {"rotation", p.rotation},
          {"view", p.view},
          {"grade_cuts", p.grade_cuts}};
}

inline PhantomSpec phantom_spec_from_json(const json& j) {
  PhantomSpec p;
  if (j.contains("image_size")) {
    p.height = j["image_size"].at(0).get<int>();
    p.width = j["image_size"].at(1).get<int>();
  }
  if (j.contains("joint_space")) {
    p.joint_space.medial = j["joint_space"].at("medial").get<double>();
    p.joint_space.lateral = j["joint_space"].at("lateral").get<double>();
  }
  if (j.contains("sclerosis")) {
    p.sclerosis_count = j["sclerosis"].value("count", 0);
    p.sclerosis_boost = j["sclerosis"].value("density_boost", 0.6);
  }
  if (j.contains("osteophytes")) {
    p.osteophyte_count = j["osteophytes"].value("count", 0);
    if (j["osteophytes"].contains("size_range")) {
      p.osteophyte_min_size = j["osteophytes"]["size_range"].at(0).get<double>();
      p.osteophyte_max_size = j["osteophytes"]["size_range"].at(1).get<double>();
    }
  }
  p.implants = j.value("implants", false);
  p.alignment_angle = j.value("alignment_angle", 0.0);
  if (j.contains("soft_tissue")) p.soft_tissue_count = j["soft_tissue"].value("count", 0);
  p.tibial_spike_height = j.value("tibial_spike_height", 0.0);
  p.oa_grade = j.value("oa_grade", 0);
  p.noise_sigma = j.value("noise_sigma", 0.01);
  p.rotation = j.value("rotation", 0.0);
  p.view = j.value("view", std::string("AP"));
  if (j.contains("grade_cuts"))
    for (int i = 0; i < 3; ++i) p.grade_cuts[i] = j["grade_cuts"].at(i).get<double>();
  return p;
}

namespace detail {

struct Ellipse {
  double cx = 0, cy = 0, a = 1, b = 1;
  bool contains(double x, double y) const {
    const double u = (x - cx) / a, v = (y - cy) / b;
    return u * u + v * v <= 1.0;
  }
};

struct Tri {
  Point v0, v1, v2;
  bool contains(double x, double y) const {
    auto cross = [](double ax, double ay, double bx, double by) { return ax * by - ay * bx; };
    const double d0 = cross(v1.x - v0.x, v1.y - v0.y, x - v0.x, y - v0.y);
    const double d1 = cross(v2.x - v1.x, v2.y - v1.y, x - v1.x, y - v1.y);
    const double d2 = cross(v0.x - v2.x, v0.y - v2.y, x - v2.x, y - v2.y);
    const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
    const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
    return !(neg && pos);
  }
};

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

// Fully sampled scene in canonical layout coordinates.
struct Scene {
  PhantomSpec spec;
  double W = 0, H = 0;
  double xl = 0, xr = 0;     // bone horizontal extent
  double yf = 0;             // femoral condyle shoulder line
  double G = 0;              // gap height
  double yp = 0;             // tibial plateau line
  double band_bot = 0;       // bottom of the level plateau band
  double lobe_cx_m = 0, lobe_cx_l = 0, lobe_a = 0, dip_m = 0, dip_l = 0;
  double shaft_tan = 0;      // tibial shaft tilt (varus/valgus)
  float bg_v = 0.05f, bone_v = 0.55f, soft_v = 0.16f;
  std::vector<Ellipse> sclerosis;
  std::vector<Ellipse> soft;
  std::vector<Tri> osteophytes;
  std::vector<Tri> spikes;
  std::vector<Rect> implants;
  bool lateral = false;
  Ellipse patella;

  bool in_femur(double x, double y) const {
    if (y >= 0.04 * H && y <= 0.30 * H && std::abs(x - 0.5 * W) <= 0.13 * W) return true;
    if (y >= 0.28 * H && y <= yf && x >= xl && x <= xr) return true;
    if (y >= yf) {  // condyle lobes dipping into the gap
      if (dip_m > 1e-9 && y <= yf + dip_m) {
        const double u = (x - lobe_cx_m) / lobe_a, v = (y - yf) / dip_m;
        if (u * u + v * v <= 1.0) return true;
      }
      if (dip_l > 1e-9 && y <= yf + dip_l) {
        const double u = (x - lobe_cx_l) / lobe_a, v = (y - yf) / dip_l;
        if (u * u + v * v <= 1.0) return true;
      }
    }
    return false;
  }
  bool in_tibia(double x, double y) const {
    if (y >= yp && y <= band_bot && x >= xl && x <= xr) return true;
    if (y > band_bot && y <= 0.96 * H &&
        std::abs(x - (0.5 * W + shaft_tan * (y - band_bot))) <= 0.12 * W)
      return true;
    return false;
  }
  bool in_fibula(double x, double y) const {
    return x >= 0.82 * W && x <= 0.875 * W && y >= yp + 0.06 * H && y <= 0.94 * H;
  }

  float value(double x, double y) const {
    float v = bg_v;
    for (const auto& e : soft)
      if (e.contains(x, y)) v = soft_v;
    bool bone = in_femur(x, y) || in_tibia(x, y) || in_fibula(x, y);
    if (!bone)
      for (const auto& t : spikes)
        if (t.contains(x, y)) { bone = true; break; }
    if (!bone)
      for (const auto& t : osteophytes)
        if (t.contains(x, y)) { bone = true; break; }
    if (!bone && lateral && patella.contains(x, y)) bone = true;
    if (bone) {
      v = bone_v;
      for (const auto& e : sclerosis)
        if (e.contains(x, y)) { v += static_cast<float>(spec.sclerosis_boost * 0.35); break; }
    }
    for (const auto& r : implants)
      if (r.contains(x, y)) v = 0.95f;
    return std::clamp(v, 0.0f, 1.0f);
  }
};

inline Scene build_scene(const PhantomSpec& spec, Rng& rng) {
  Scene sc;
  sc.spec = spec;
  sc.W = spec.width;
  sc.H = spec.height;
  sc.xl = 0.20 * sc.W;
  sc.xr = 0.80 * sc.W;
  sc.yf = 0.42 * sc.H;
  sc.G = spec.max_gap();
  sc.yp = sc.yf + sc.G;
  sc.band_bot = sc.yp + 0.10 * sc.H;
  sc.lobe_cx_m = 0.37 * sc.W;
  sc.lobe_cx_l = 0.63 * sc.W;
  sc.lobe_a = 0.10 * sc.W;
  sc.dip_m = sc.G - spec.joint_space.medial;
  sc.dip_l = sc.G - spec.joint_space.lateral;
  sc.shaft_tan = std::tan(deg_to_rad(spec.alignment_angle));
  sc.lateral = spec.view == "Lateral";
  sc.bg_v = static_cast<float>(0.05 + 0.015 * (2.0 * rng.uniform() - 1.0));
  sc.bone_v = static_cast<float>(0.55 + 0.04 * (2.0 * rng.uniform() - 1.0));
  sc.soft_v = static_cast<float>(0.16 + 0.02 * (2.0 * rng.uniform() - 1.0));
  const double s = spec.scale();

  // Sclerosis: bright ellipses hugging the joint surfaces, clipped to bone.
  if (spec.sclerosis_count > 0) {
    const double x_lo = 0.28 * sc.W, x_hi = 0.72 * sc.W;
    const double slot_w = (x_hi - x_lo) / spec.sclerosis_count;
    for (int i = 0; i < spec.sclerosis_count; ++i) {
      Ellipse e;
      e.a = rng.uniform(0.040, 0.058) * sc.W;
      e.b = rng.uniform(0.018, 0.028) * sc.H;
      const double lo = x_lo + i * slot_w + e.a, hi = x_lo + (i + 1) * slot_w - e.a;
      e.cx = hi > lo ? rng.uniform(lo, hi) : 0.5 * (lo + hi);
      const bool on_femur = spec.implants ? true : rng.bernoulli(0.5);
      e.cy = on_femur ? sc.yf - e.b - 2.0 * s : sc.yp + e.b + 2.0 * s;
      sc.sclerosis.push_back(e);
    }
  }

  // Osteophytes: triangles protruding outward from the four joint corners.
  if (spec.osteophyte_count > 0) {
    struct Site { double x, y, dir; };
    std::vector<Site> sites = {{sc.xl, sc.yf - 0.04 * sc.H, -1.0},
                               {sc.xr, sc.yf - 0.04 * sc.H, +1.0},
                               {sc.xl, sc.yp + 0.04 * sc.H, -1.0},
                               {sc.xr, sc.yp + 0.04 * sc.H, +1.0}};
    std::vector<size_t> order = {0, 1, 2, 3};
    rng.shuffle(order);
    for (int i = 0; i < spec.osteophyte_count; ++i) {
      const Site& site = sites[order[i]];
      const double len = rng.uniform(spec.osteophyte_min_size, spec.osteophyte_max_size);
      const double hh = 0.45 * len;
      Tri t;
      t.v0 = {site.x, site.y - hh};
      t.v1 = {site.x, site.y + hh};
      t.v2 = {site.x + site.dir * len, site.y};
      sc.osteophytes.push_back(t);
    }
  }

  // Tibial spikes: two triangles rising from the plateau inside the notch.
  if (spec.tibial_spike_height > 0.0) {
    const double h = spec.tibial_spike_height;
    for (const double c : {0.475, 0.525}) {
      Tri t;
      t.v0 = {(c - 0.02) * sc.W, sc.yp};
      t.v1 = {(c + 0.02) * sc.W, sc.yp};
      t.v2 = {c * sc.W, sc.yp - h};
      sc.spikes.push_back(t);
    }
  }

  if (spec.implants)
    sc.implants.push_back({0.30 * sc.W, sc.yp + 0.012 * sc.H, 0.70 * sc.W, sc.yp + 0.048 * sc.H});

  // Soft tissue: faint blobs in fixed margin slots (kept clear of bone,
  // osteophyte corners, the fibula, and the lateral-view patella).
  if (spec.soft_tissue_count > 0) {
    struct Slot { double x_lo, x_hi, y_lo, y_hi; };
    const std::vector<Slot> ap_slots = {{0.075, 0.115, 0.22, 0.28},
                                        {0.075, 0.115, 0.74, 0.84},
                                        {0.900, 0.945, 0.40, 0.60}};
    const std::vector<Slot> lat_slots = {{0.075, 0.115, 0.74, 0.84},
                                         {0.900, 0.945, 0.46, 0.54},
                                         {0.075, 0.115, 0.46, 0.54}};
    const auto& slots = sc.lateral ? lat_slots : ap_slots;
    for (int i = 0; i < spec.soft_tissue_count; ++i) {
      const Slot& sl = slots[i];
      Ellipse e;
      e.a = rng.uniform(0.028, 0.038) * sc.W;
      e.b = rng.uniform(0.035, 0.050) * sc.H;
      e.cx = rng.uniform(sl.x_lo, sl.x_hi) * sc.W;
      e.cy = rng.uniform(sl.y_lo, sl.y_hi) * sc.H;
      sc.soft.push_back(e);
    }
  }

  if (sc.lateral) sc.patella = {0.12 * sc.W, 0.30 * sc.H, 0.05 * sc.W, 0.08 * sc.H};
  return sc;
}

// 2x supersampled render of the (rotated, possibly mirrored) scene.
inline Image render_scene(const Scene& sc) {
  const int H = sc.spec.height, W = sc.spec.width;
  const double cx = W / 2.0, cy = H / 2.0;
  const double th = deg_to_rad(sc.spec.rotation);
  const double ct = std::cos(th), st = std::sin(th);
  Image img(H, W);
  for (int iy = 0; iy < H; ++iy) {
    for (int ix = 0; ix < W; ++ix) {
      float acc = 0.0f;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = ix + 0.25 + 0.5 * sx;
          const double py = iy + 0.25 + 0.5 * sy;
          const double dx = px - cx, dy = py - cy;
          double qx = cx + ct * dx - st * dy;
          const double qy = cy + st * dx + ct * dy;
          if (sc.lateral) qx = W - qx;
          acc += sc.value(qx, qy);
        }
      }
      img.at(iy, ix) = acc * 0.25f;
    }
  }
  return img;
}

}  // namespace detail

// Layout x-coordinates of the medial/lateral measurement columns.
inline std::array<double, 2> measurement_columns(const PhantomSpec& spec) {
  return {0.37 * spec.width, 0.63 * spec.width};
}

// Re-measure the joint-space widths from a rendered phantom by scanning the
// (rotated, mirrored) measurement columns for the dark-gap run. Test oracle.
inline JointSpaceWidths measure_joint_space(const Image& img, const PhantomSpec& spec) {
  const double W = spec.width, H = spec.height;
  const double cx = W / 2.0, cy = H / 2.0;
  const double yf = 0.42 * H, yp = yf + spec.max_gap();
  const bool lateral = spec.view == "Lateral";
  const auto cols = measurement_columns(spec);
  const double step = 0.2;
  JointSpaceWidths out{0.0, 0.0};
  for (int side = 0; side < 2; ++side) {
    const double x_layout = cols[side];
    double run = 0.0, best = 0.0;
    for (double t = yf - 0.05 * H; t <= yp + 0.05 * H; t += step) {
      const double qx = lateral ? W - x_layout : x_layout;
      const Point p = rotate_point({qx, t}, {cx, cy}, -spec.rotation);
      const float v = img.sample(p.y - 0.5, p.x - 0.5);
      if (v < 0.30f) {
        run += step;
        best = std::max(best, run);
      } else {
        run = 0.0;
      }
    }
    (side == 0 ? out.medial : out.lateral) = best;
  }
  return out;
}

inline std::pair<Scan, AnnotationSet> generate_phantom(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  detail::Scene sc = detail::build_scene(spec, rng);
  const double W = sc.W, H = sc.H;
  const double cx = W / 2.0, cy = H / 2.0;
  const bool lateral = sc.lateral;
  const double th = deg_to_rad(spec.rotation);
  const double ct = std::cos(th), st = std::sin(th);

  // layout -> image (content moves through R(-rotation); mirror first if lateral)
  auto to_image = [&](Point lq) -> Point {
    const double qx = lateral ? W - lq.x : lq.x;
    return rotate_point({qx, lq.y}, {cx, cy}, -spec.rotation);
  };
  // image -> layout (inverse of the above; same map the renderer samples with)
  auto to_layout = [&](double px, double py) -> Point {
    const double dx = px - cx, dy = py - cy;
    double qx = cx + ct * dx - st * dy;
    const double qy = cy + st * dx + ct * dy;
    if (lateral) qx = W - qx;
    return {qx, qy};
  };
  auto clamp_box = [&](BoundingBox b) -> BoundingBox {
    b.x_min = std::clamp(b.x_min, 0.0, W);
    b.x_max = std::clamp(b.x_max, 0.0, W);
    b.y_min = std::clamp(b.y_min, 0.0, H);
    b.y_max = std::clamp(b.y_max, 0.0, H);
    return b;
  };
  auto tri_box = [&](const detail::Tri& t) -> BoundingBox {
    const Point a = to_image(t.v0), b = to_image(t.v1), c = to_image(t.v2);
    return clamp_box({std::min({a.x, b.x, c.x}), std::min({a.y, b.y, c.y}),
                      std::max({a.x, b.x, c.x}), std::max({a.y, b.y, c.y})});
  };
  auto ellipse_box = [&](const detail::Ellipse& e) -> BoundingBox {
    const Point c = to_image({e.cx, e.cy});
    const double ex = std::sqrt(e.a * e.a * ct * ct + e.b * e.b * st * st);
    const double ey = std::sqrt(e.a * e.a * st * st + e.b * e.b * ct * ct);
    return clamp_box({c.x - ex, c.y - ey, c.x + ex, c.y + ey});
  };
  auto make_mask = [&](auto&& contains, const BoundingBox& bb) -> Mask {
    Mask m;
    m.x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)));
    m.y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)));
    const int x1 = std::min(spec.width, static_cast<int>(std::ceil(bb.x_max)));
    const int y1 = std::min(spec.height, static_cast<int>(std::ceil(bb.y_max)));
    m.width = std::max(1, x1 - m.x0);
    m.height = std::max(1, y1 - m.y0);
    m.data.assign(static_cast<size_t>(m.width) * m.height, 0);
    for (int iy = 0; iy < m.height; ++iy)
      for (int ix = 0; ix < m.width; ++ix) {
        const Point lq = to_layout(m.x0 + ix + 0.5, m.y0 + iy + 0.5);
        if (contains(lq.x, lq.y)) m.at(iy, ix) = 1;
      }
    return m;
  };

  AnnotationSet ann;
  ann.joint_space_widths = spec.joint_space;
  for (const auto& e : sc.sclerosis) ann.sclerosis_boxes.push_back(ellipse_box(e));
  for (const auto& t : sc.osteophytes) ann.osteophyte_boxes.push_back(tri_box(t));
  for (const auto& t : sc.spikes) ann.tibial_spike_boxes.push_back(tri_box(t));
  for (const auto& r : sc.implants) {
    const BoundingBox bb = clamp_box([&] {
      const Point a = to_image({r.x0, r.y0}), b = to_image({r.x1, r.y0});
      const Point c = to_image({r.x0, r.y1}), d = to_image({r.x1, r.y1});
      return BoundingBox{std::min({a.x, b.x, c.x, d.x}), std::min({a.y, b.y, c.y, d.y}),
                         std::max({a.x, b.x, c.x, d.x}), std::max({a.y, b.y, c.y, d.y})};
    }());
    ann.implant_masks.push_back(make_mask([&](double x, double y) { return r.contains(x, y); }, bb));
  }
  for (const auto& e : sc.soft) {
    ann.soft_tissue_masks.push_back(
        make_mask([&](double x, double y) { return e.contains(x, y); }, ellipse_box(e)));
  }

  AlignmentAnnotation align;
  const double kp_yf = sc.yf, kp_yp = sc.yp;
  Point fc_l = to_image({0.24 * W, kp_yf}), fc_r = to_image({0.76 * W, kp_yf});
  Point tp_l = to_image({0.27 * W, kp_yp}), tp_r = to_image({0.73 * W, kp_yp});
  if (fc_l.x > fc_r.x) std::swap(fc_l, fc_r);  // keep left.x < right.x after mirroring
  if (tp_l.x > tp_r.x) std::swap(tp_l, tp_r);
  align.keypoints.tibial_plateau_left = tp_l;
  align.keypoints.tibial_plateau_right = tp_r;
  align.keypoints.femoral_condyle_left = fc_l;
  align.keypoints.femoral_condyle_right = fc_r;
  align.varus_valgus_angle = spec.alignment_angle;
  align.misaligned = std::abs(spec.alignment_angle) >= kMisalignmentCutDeg;
  ann.alignment = align;
  ann.oa_grade = spec.oa_grade;

  Scan scan;
  scan.id = "phantom";
  scan.image = detail::render_scene(sc);
  if (spec.noise_sigma > 0.0) {
    for (float& v : scan.image.pixels)
      v = std::clamp(v + static_cast<float>(spec.noise_sigma * rng.normal()), 0.0f, 1.0f);
  }
  scan.meta.age_group = meta::age_groups()[0];
  scan.meta.gender = meta::genders()[0];
  scan.meta.manufacturer = meta::manufacturers()[0];
  scan.meta.view = spec.view;
  return {std::move(scan), std::move(ann)};
}

// ---------------------------------------------------------------------------
// Gate-training negatives.

enum class NegativeKind { Noise, Texture, SingleBone };

inline Image generate_negative(NegativeKind kind, int height, int width, uint64_t seed) {
  Rng rng(seed);
  Image img(height, width);
  switch (kind) {
    case NegativeKind::Noise:
      for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
      return img;
    case NegativeKind::Texture: {
      struct Blob { double cx, cy, r, amp; };
      std::vector<Blob> blobs;
      for (int i = 0; i < 6; ++i)
        blobs.push_back({rng.uniform(0.0, width), rng.uniform(0.0, height),
                         rng.uniform(0.15, 0.45) * std::min(width, height),
                         rng.uniform(-1.0, 1.0)});
      const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
      float lo = 1e30f, hi = -1e30f;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          double v = gx * x / width + gy * y / height;
          for (const auto& b : blobs) {
            const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            v += b.amp * std::exp(-d2 / (2.0 * b.r * b.r));
          }
          img.at(y, x) = static_cast<float>(v);
          lo = std::min(lo, img.at(y, x));
          hi = std::max(hi, img.at(y, x));
        }
      const float span = std::max(hi - lo, 1e-6f);
      for (float& v : img.pixels) v = (v - lo) / span;
      return img;
    }
    case NegativeKind::SingleBone: {
      // One shaft, no joint gap: x-ray-like but not a knee.
      const double cx = width / 2.0 + rng.uniform(-0.06, 0.06) * width;
      const double hw = rng.uniform(0.11, 0.16) * width;
      const double tilt = std::tan(deg_to_rad(rng.uniform(-8.0, 8.0)));
      const float bone = static_cast<float>(0.55 + 0.04 * (2.0 * rng.uniform() - 1.0));
      const float bg = static_cast<float>(0.05 + 0.015 * (2.0 * rng.uniform() - 1.0));
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const bool inside = y >= 0.06 * height && y <= 0.94 * height &&
                              std::abs(x - (cx + tilt * (y - height / 2.0))) <= hw;
          img.at(y, x) = inside ? bone : bg;
        }
      for (float& v : img.pixels)
        v = std::clamp(v + static_cast<float>(0.01 * rng.normal()), 0.0f, 1.0f);
      return img;
    }
  }
  throw UsageError("unknown negative kind");
}

// ---------------------------------------------------------------------------
// Dataset generation.

struct PhantomDistribution {
  int height = 256;
  int width = 256;
  // Metadata category weights (defaults proportional to the clinical cohort).
  std::vector<double> age_weights{542124, 406593, 271062, 135531};
  std::vector<double> gender_weights{664102, 691209};
  std::vector<double> manufacturer_weights{528571, 406593, 325275, 94872};
  std::vector<double> view_weights{1.0, 0.0};  // AP, Lateral
  double p_sclerosis = 0.5;
  double p_osteophytes = 0.5;
  double p_implants = 0.15;
  double p_soft_tissue = 0.4;
  double p_spike = 0.5;
  double p_misaligned = 0.4;
  double alignment_max = 12.0;
  double p_rotated = 0.5;
  double rotation_max = 15.0;
  double noise_sigma = 0.01;
  std::array<double, 3> grade_cuts{30.0, 22.0, 14.0};

  void validate() const {
    auto check_w = [](const std::vector<double>& w, size_t n, const char* what) {
      if (w.size() != n) throw UsageError(std::string("distribution: wrong weight count for ") + what);
      double sum = 0;
      for (double v : w) {
        if (v < 0) throw UsageError(std::string("distribution: negative weight for ") + what);
        sum += v;
      }
      if (sum <= 0) throw UsageError(std::string("distribution: zero weights for ") + what);
    };
    check_w(age_weights, meta::age_groups().size(), "age_group");
    check_w(gender_weights, meta::genders().size(), "gender");
    check_w(manufacturer_weights, meta::manufacturers().size(), "manufacturer");
    check_w(view_weights, 2, "view");
    for (double p : {p_sclerosis, p_osteophytes, p_implants, p_soft_tissue, p_spike, p_misaligned, p_rotated})
      if (p < 0.0 || p > 1.0) throw UsageError("distribution: probability outside [0,1]");
    if (rotation_max < 0.0 || rotation_max > 30.0)
      throw UsageError("distribution: rotation_max outside [0,30]");
    if (alignment_max < 0.0 || alignment_max > 45.0)
      throw UsageError("distribution: alignment_max outside [0,45]");
  }

  ScanMeta sample_meta(Rng& rng, const std::string& view) const {
    ScanMeta m;
    m.age_group = meta::age_groups()[rng.categorical(age_weights)];
    m.gender = meta::genders()[rng.categorical(gender_weights)];
    m.manufacturer = meta::manufacturers()[rng.categorical(manufacturer_weights)];
    m.view = view;
    return m;
  }

  PhantomSpec sample_spec(Rng& rng) const {
    PhantomSpec p;
    p.height = height;
    p.width = width;
    p.grade_cuts = grade_cuts;
    p.noise_sigma = noise_sigma;
    const double s = p.scale();
    const double margin = 1.5 * s;
    // Sample the grade uniformly, then a min-width inside that grade's band
    // (kept clear of the cut edges), then split into medial/lateral.
    const int grade = static_cast<int>(rng.below(4));
    const double bands[4][2] = {{grade_cuts[0] * s + margin, p.max_gap() - margin},
                                {grade_cuts[1] * s + margin, grade_cuts[0] * s - margin},
                                {grade_cuts[2] * s + margin, grade_cuts[1] * s - margin},
                                {6.0 * s, grade_cuts[2] * s - margin}};
    const double min_w = rng.uniform(bands[grade][0], bands[grade][1]);
    const double other = std::min(min_w + rng.uniform(0.0, 8.0 * s), p.max_gap());
    if (rng.bernoulli(0.5)) {
      p.joint_space = {min_w, other};
    } else {
      p.joint_space = {other, min_w};
    }
    p.oa_grade = p.derived_grade();
    if (rng.bernoulli(p_sclerosis)) {
      p.sclerosis_count = 1 + static_cast<int>(rng.below(2));
      p.sclerosis_boost = rng.uniform(0.4, 0.9);
    }
    if (rng.bernoulli(p_osteophytes)) {
      p.osteophyte_count = 1 + static_cast<int>(rng.below(3));
      p.osteophyte_min_size = 8.0 * s;
      p.osteophyte_max_size = 15.0 * s;
    }
    p.implants = rng.bernoulli(p_implants);
    if (rng.bernoulli(p_misaligned)) {
      const double mag = rng.uniform(kMisalignmentCutDeg + 0.5, std::max(alignment_max, kMisalignmentCutDeg + 1.0));
      p.alignment_angle = rng.bernoulli(0.5) ? mag : -mag;
    } else {
      p.alignment_angle = rng.uniform(-3.0, 3.0);
    }
    if (rng.bernoulli(p_soft_tissue)) p.soft_tissue_count = 1 + static_cast<int>(rng.below(2));
    if (rng.bernoulli(p_spike)) p.tibial_spike_height = rng.uniform(0.025, 0.045) * height;
    if (rng.bernoulli(p_rotated) && rotation_max > 0.0)
      p.rotation = rng.uniform(-rotation_max, rotation_max);
    p.view = view_weights[1] > 0.0 && rng.categorical(view_weights) == 1 ? "Lateral" : "AP";
    return p;
  }
};

inline json to_json(const PhantomDistribution& d) {
  return {{"image_size", {d.height, d.width}},
          {"age_weights", d.age_weights},
          {"gender_weights", d.gender_weights},
          {"manufacturer_weights", d.manufacturer_weights},
          {"view_weights", d.view_weights},
          {"p_sclerosis", d.p_sclerosis},
          {"p_osteophytes", d.p_osteophytes},
          {"p_implants", d.p_implants},
          {"p_soft_tissue", d.p_soft_tissue},
          {"p_spike", d.p_spike},
          {"p_misaligned", d.p_misaligned},
          {"alignment_max", d.alignment_max},
          {"p_rotated", d.p_rotated},
          {"rotation_max", d.rotation_max},
          {"noise_sigma", d.noise_sigma},
          {"grade_cuts", d.grade_cuts}};
}

inline PhantomDistribution phantom_distribution_from_json(const json& j) {
  PhantomDistribution d;
  if (j.contains("image_size")) {
    d.height = j["image_size"].at(0).get<int>();
    d.width = j["image_size"].at(1).get<int>();
  }
  if (j.contains("age_weights")) d.age_weights = j["age_weights"].get<std::vector<double>>();
  if (j.contains("gender_weights")) d.gender_weights = j["gender_weights"].get<std::vector<double>>();
  if (j.contains("manufacturer_weights"))
    d.manufacturer_weights = j["manufacturer_weights"].get<std::vector<double>>();
  if (j.contains("view_weights")) d.view_weights = j["view_weights"].get<std::vector<double>>();
  d.p_sclerosis = j.value("p_sclerosis", d.p_sclerosis);
  d.p_osteophytes = j.value("p_osteophytes", d.p_osteophytes);
  d.p_implants = j.value("p_implants", d.p_implants);
  d.p_soft_tissue = j.value("p_soft_tissue", d.p_soft_tissue);
  d.p_spike = j.value("p_spike", d.p_spike);
  d.p_misaligned = j.value("p_misaligned", d.p_misaligned);
  d.alignment_max = j.value("alignment_max", d.alignment_max);
  d.p_rotated = j.value("p_rotated", d.p_rotated);
  d.rotation_max = j.value("rotation_max", d.rotation_max);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  if (j.contains("grade_cuts"))
    for (int i = 0; i < 3; ++i) d.grade_cuts[i] = j["grade_cuts"].at(i).get<double>();
  return d;
}

// Generates n phantoms under out_dir: images/, annotations/, manifest.jsonl.
inline DatasetManifest generate_dataset(int n, const PhantomDistribution& dist, uint64_t seed,
                                        const std::string& out_dir) {
  if (n < 1) throw UsageError("generate_dataset: n must be >= 1");
  dist.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "annotations", ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  manifest.header = {{"count", n}, {"seed", seed}};
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const PhantomSpec spec = dist.sample_spec(rng);
    const uint64_t child_seed = rng.u64();
    auto [scan, ann] = generate_phantom(spec, child_seed);
    char id[32];
    std::snprintf(id, sizeof(id), "phantom-%06d", i + 1);
    scan.id = id;
    scan.meta = dist.sample_meta(rng, spec.view);

    const std::string image_rel = std::string("images/") + id + ".png";
    const std::string ann_rel = std::string("annotations/") + id + ".json";
    write_image((fs::path(out_dir) / image_rel).string(), scan.image);
    write_json_file((fs::path(out_dir) / ann_rel).string(), to_json(ann));

    ManifestEntry entry;
    entry.scan_id = scan.id;
    entry.image_path = image_rel;
    entry.meta = scan.meta;
    entry.annotations_path = ann_rel;
    entry.labeled = true;
    manifest.entries.push_back(std::move(entry));
  }
  write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), manifest);
  return manifest;
}

}  // namespace kxr
