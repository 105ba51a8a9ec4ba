#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "helpers.hpp"
#include "kxr/phantom.hpp"

using namespace kxr;
using Catch::Matchers::WithinAbs;
using kxr::testing::TempDir;

namespace {

PhantomSpec quiet_spec() {
  PhantomSpec s;
  s.noise_sigma = 0.0;
  return s;
}

double pair_angle_deg(const Point& left, const Point& right) {
  return rad_to_deg(std::atan2(right.y - left.y, right.x - left.x));
}

double box_max(const Image& img, const BoundingBox& b) {
  double best = -1.0;
  for (int y = std::max(0, int(b.y_min)); y < std::min(img.height, int(std::ceil(b.y_max))); ++y)
    for (int x = std::max(0, int(b.x_min)); x < std::min(img.width, int(std::ceil(b.x_max))); ++x)
      best = std::max(best, double(img.at(y, x)));
  return best;
}

}  // namespace

TEST_CASE("phantom generation is deterministic", "[phantom]") {
  PhantomSpec spec;
  spec.sclerosis_count = 2;
  spec.osteophyte_count = 2;
  spec.soft_tissue_count = 1;
  spec.tibial_spike_height = 9.0;
  auto [a, ann_a] = generate_phantom(spec, 77);
  auto [b, ann_b] = generate_phantom(spec, 77);
  CHECK(a.image.pixels == b.image.pixels);
  CHECK(to_json(ann_a) == to_json(ann_b));

  auto [c, ann_c] = generate_phantom(spec, 78);
  CHECK(a.image.pixels != c.image.pixels);
}

TEST_CASE("canonical phantom keypoints are level and ordered", "[phantom]") {
  auto [scan, ann] = generate_phantom(quiet_spec(), 1);
  REQUIRE(scan.image.height == 256);
  REQUIRE(scan.image.width == 256);
  REQUIRE(ann.alignment.has_value());
  const auto& kp = ann.alignment->keypoints;
  CHECK(kp.femoral_condyle_left.y == Catch::Approx(kp.femoral_condyle_right.y));
  CHECK(kp.tibial_plateau_left.y == Catch::Approx(kp.tibial_plateau_right.y));
  CHECK(kp.femoral_condyle_left.x < kp.femoral_condyle_right.x);
  CHECK(kp.tibial_plateau_left.x < kp.tibial_plateau_right.x);
  // plateau line sits one full gap below the condyle line
  CHECK_THAT(kp.tibial_plateau_left.y - kp.femoral_condyle_left.y,
             WithinAbs(0.17 * 256, 1e-9));
  CHECK(validate_scan(scan).empty());
  CHECK(validate_annotations(ann, &scan.image).empty());
  CHECK(ann.alignment->varus_valgus_angle == 0.0);
  CHECK_FALSE(ann.alignment->misaligned);
  CHECK(*ann.oa_grade == 0);
}

TEST_CASE("grade rule thresholds on the narrower compartment", "[phantom]") {
  PhantomSpec s;
  CHECK(s.grade_for(34.0) == 0);
  CHECK(s.grade_for(30.0) == 0);  // width at a cut takes the milder grade
  CHECK(s.grade_for(29.9) == 1);
  CHECK(s.grade_for(22.0) == 1);
  CHECK(s.grade_for(21.9) == 2);
  CHECK(s.grade_for(14.0) == 2);
  CHECK(s.grade_for(13.9) == 3);
  CHECK(s.grade_for(2.0) == 3);

  PhantomSpec big;
  big.height = big.width = 512;  // cuts scale with height
  CHECK(big.grade_for(59.0) == 1);
  CHECK(big.grade_for(60.0) == 0);

  s.joint_space = {18.0, 31.0};
  s.oa_grade = 2;
  CHECK(s.derived_grade() == 2);
  auto [scan, ann] = generate_phantom(s, 3);
  CHECK(*ann.oa_grade == 2);
}

TEST_CASE("measured joint space tracks the requested widths", "[phantom]") {
  auto check_widths = [](PhantomSpec spec, uint64_t seed) {
    spec.oa_grade = spec.derived_grade();
    auto [scan, ann] = generate_phantom(spec, seed);
    REQUIRE(ann.joint_space_widths.has_value());
    CHECK(ann.joint_space_widths->medial == spec.joint_space.medial);
    CHECK(ann.joint_space_widths->lateral == spec.joint_space.lateral);
    const JointSpaceWidths got = measure_joint_space(scan.image, spec);
    INFO("medial " << got.medial << " lateral " << got.lateral);
    CHECK_THAT(got.medial, WithinAbs(spec.joint_space.medial, 1.0));
    CHECK_THAT(got.lateral, WithinAbs(spec.joint_space.lateral, 1.0));
  };

  SECTION("defaults") { check_widths(quiet_spec(), 10); }

  SECTION("asymmetric narrowing") {
    PhantomSpec s = quiet_spec();
    s.joint_space = {16.0, 33.0};
    check_widths(s, 11);
  }

  SECTION("under rotation") {
    PhantomSpec s = quiet_spec();
    s.joint_space = {24.0, 28.0};
    s.rotation = 12.0;
    check_widths(s, 12);
  }

  SECTION("lateral view") {
    PhantomSpec s = quiet_spec();
    s.view = "Lateral";
    s.joint_space = {26.0, 35.0};
    check_widths(s, 13);
  }

  SECTION("with pathology load and noise") {
    PhantomSpec s;
    s.joint_space = {20.0, 24.0};
    s.sclerosis_count = 3;
    s.osteophyte_count = 4;
    s.tibial_spike_height = 10.0;
    s.implants = true;
    s.soft_tissue_count = 2;
    check_widths(s, 14);
  }

  SECTION("larger canvas") {
    PhantomSpec s = quiet_spec();
    s.height = s.width = 384;
    s.joint_space = {40.0, 50.0};
    check_widths(s, 15);
  }
}

TEST_CASE("osteophyte boxes enclose bright protrusions", "[phantom]") {
  PhantomSpec s = quiet_spec();
  s.osteophyte_count = 3;
  auto [scan, ann] = generate_phantom(s, 21);
  REQUIRE(ann.osteophyte_boxes.size() == 3);
  for (const auto& b : ann.osteophyte_boxes) {
    CHECK(b.valid());
    CHECK(b.area() >= 9.0);
    CHECK(box_max(scan.image, b) > 0.4);  // bone-bright pixels inside
  }
}

TEST_CASE("sclerosis boxes brighten the bone under them", "[phantom]") {
  PhantomSpec s = quiet_spec();
  s.sclerosis_count = 2;
  s.sclerosis_boost = 0.8;
  auto [scan, ann] = generate_phantom(s, 22);
  auto [plain, plain_ann] = generate_phantom(quiet_spec(), 22);
  REQUIRE(ann.sclerosis_boxes.size() == 2);
  for (const auto& b : ann.sclerosis_boxes) {
    CHECK(box_max(scan.image, b) > box_max(plain.image, b) + 0.1);
  }
}

TEST_CASE("tibial spikes appear only when requested", "[phantom]") {
  PhantomSpec s = quiet_spec();
  s.tibial_spike_height = 12.0;
  auto [scan, ann] = generate_phantom(s, 23);
  REQUIRE(ann.tibial_spike_boxes.size() == 2);
  auto [flat, flat_ann] = generate_phantom(quiet_spec(), 23);
  CHECK(flat_ann.tibial_spike_boxes.empty());
  for (const auto& b : ann.tibial_spike_boxes) {
    // the apex half of the box is pure joint gap when no spike is present
    BoundingBox apex = b;
    apex.y_max = b.y_min + 0.4 * b.height();
    CHECK(box_max(scan.image, apex) > box_max(flat.image, apex) + 0.2);
    CHECK(b.height() >= 0.5 * s.tibial_spike_height);
  }
}

TEST_CASE("implant masks sit on near-saturated pixels", "[phantom]") {
  PhantomSpec s = quiet_spec();
  s.implants = true;
  auto [scan, ann] = generate_phantom(s, 24);
  REQUIRE(ann.implant_masks.size() == 1);
  const Mask& m = ann.implant_masks[0];
  REQUIRE(m.count() > 100);
  size_t bright = 0, total = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        ++total;
        if (scan.image.at(m.y0 + y, m.x0 + x) > 0.85f) ++bright;
      }
  CHECK(double(bright) / double(total) > 0.7);
}

TEST_CASE("soft tissue masks land outside the bone margins", "[phantom]") {
  PhantomSpec s = quiet_spec();
  s.soft_tissue_count = 3;
  auto [scan, ann] = generate_phantom(s, 25);
  REQUIRE(ann.soft_tissue_masks.size() == 3);
  auto [plain, _] = generate_phantom(quiet_spec(), 25);
  for (const auto& m : ann.soft_tissue_masks) {
    REQUIRE(m.count() > 20);
    double diff = 0.0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(y, x))
          diff += scan.image.at(m.y0 + y, m.x0 + x) - plain.image.at(m.y0 + y, m.x0 + x);
    CHECK(diff / double(m.count()) > 0.05);  // visibly denser than the background
  }
}

TEST_CASE("alignment angle drives the misaligned flag", "[phantom]") {
  PhantomSpec tilted = quiet_spec();
  tilted.alignment_angle = 8.0;
  auto [scan, ann] = generate_phantom(tilted, 26);
  CHECK(ann.alignment->varus_valgus_angle == 8.0);
  CHECK(ann.alignment->misaligned);
  // the landmark pairs stay level: tilt lives in the tibial shaft
  const auto& kp = ann.alignment->keypoints;
  CHECK_THAT(pair_angle_deg(kp.femoral_condyle_left, kp.femoral_condyle_right), WithinAbs(0.0, 1e-9));

  PhantomSpec mild = quiet_spec();
  mild.alignment_angle = -3.0;
  auto [scan2, ann2] = generate_phantom(mild, 26);
  CHECK_FALSE(ann2.alignment->misaligned);

  PhantomSpec edge = quiet_spec();
  edge.alignment_angle = kMisalignmentCutDeg;
  auto [scan3, ann3] = generate_phantom(edge, 26);
  CHECK(ann3.alignment->misaligned);
}

TEST_CASE("rotation turns the keypoint pairs by minus the angle", "[phantom]") {
  for (double rot : {-20.0, -5.0, 7.5, 18.0}) {
    PhantomSpec s = quiet_spec();
    s.rotation = rot;
    auto [scan, ann] = generate_phantom(s, 27);
    const auto& kp = ann.alignment->keypoints;
    INFO("rotation " << rot);
    CHECK_THAT(pair_angle_deg(kp.femoral_condyle_left, kp.femoral_condyle_right),
               WithinAbs(-rot, 1e-6));
    CHECK_THAT(pair_angle_deg(kp.tibial_plateau_left, kp.tibial_plateau_right),
               WithinAbs(-rot, 1e-6));
    CHECK(validate_annotations(ann, &scan.image).empty());
  }
}

TEST_CASE("lateral phantoms mirror and add a patella", "[phantom]") {
  PhantomSpec ap = quiet_spec();
  PhantomSpec lat = quiet_spec();
  lat.view = "Lateral";
  auto [a, ann_a] = generate_phantom(ap, 28);
  auto [l, ann_l] = generate_phantom(lat, 28);
  CHECK(a.image.pixels != l.image.pixels);
  // patella: bright mass high on the right margin of the lateral view only
  double ap_sum = 0, lat_sum = 0;
  for (int y = int(0.22 * 256); y < int(0.38 * 256); ++y)
    for (int x = int(0.83 * 256); x < int(0.93 * 256); ++x) {
      ap_sum += a.image.at(y, x);
      lat_sum += l.image.at(y, x);
    }
  CHECK(lat_sum > ap_sum + 50.0);
  CHECK(validate_annotations(ann_l, &l.image).empty());
  const auto& kp = ann_l.alignment->keypoints;
  CHECK(kp.femoral_condyle_left.x < kp.femoral_condyle_right.x);
}

TEST_CASE("phantom spec validation rejects inconsistent requests", "[phantom]") {
  PhantomSpec s;
  s.joint_space = {50.0, 30.0};  // exceeds 0.17*256 = 43.52
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.joint_space = {-1.0, 30.0};
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.osteophyte_count = 2;
  s.osteophyte_max_size = 20.0;  // > 0.06*256
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.rotation = 31.0;
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.tibial_spike_height = 0.6 * s.max_gap();
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.joint_space = {15.0, 15.0};  // derived grade 2
  s.oa_grade = 0;
  CHECK_THROWS_AS(s.validate(), SpecError);
  CHECK_THROWS_AS(generate_phantom(s, 1), SpecError);

  s = PhantomSpec{};
  s.view = "oblique";
  CHECK_THROWS_AS(s.validate(), SpecError);

  s = PhantomSpec{};
  s.height = 48;
  CHECK_THROWS_AS(s.validate(), SpecError);

  CHECK_NOTHROW(PhantomSpec{}.validate());
}

TEST_CASE("phantom specs round-trip through json", "[phantom]") {
  PhantomSpec s;
  s.height = 320;
  s.width = 288;
  s.joint_space = {21.0, 40.0};
  s.sclerosis_count = 1;
  s.sclerosis_boost = 0.45;
  s.osteophyte_count = 4;
  s.implants = true;
  s.alignment_angle = -6.5;
  s.soft_tissue_count = 2;
  s.tibial_spike_height = 7.0;
  s.oa_grade = 2;
  s.noise_sigma = 0.02;
  s.rotation = 9.0;
  s.view = "Lateral";
  const PhantomSpec r = phantom_spec_from_json(to_json(s));
  CHECK(to_json(r) == to_json(s));
  CHECK(r.height == 320);
  CHECK(r.joint_space.lateral == 40.0);
  CHECK(r.view == "Lateral");
}

TEST_CASE("negative images are deterministic and well-formed", "[phantom]") {
  for (auto kind : {NegativeKind::Noise, NegativeKind::Texture, NegativeKind::SingleBone}) {
    const Image a = generate_negative(kind, 128, 96, 5);
    const Image b = generate_negative(kind, 128, 96, 5);
    CHECK(a.pixels == b.pixels);
    CHECK(a.height == 128);
    CHECK(a.width == 96);
    for (float v : a.pixels) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
  const Image noise = generate_negative(NegativeKind::Noise, 128, 128, 1);
  const Image bone = generate_negative(NegativeKind::SingleBone, 128, 128, 1);
  CHECK(noise.pixels != bone.pixels);
}

TEST_CASE("generate_dataset writes a loadable labeled corpus", "[phantom]") {
  TempDir dir("dataset");
  PhantomDistribution dist;
  const DatasetManifest made = generate_dataset(10, dist, 2024, dir.str());
  REQUIRE(made.size() == 10);

  const DatasetManifest loaded = parse_manifest(dir.str() + "/manifest.jsonl");
  REQUIRE(loaded.size() == 10);
  CHECK(loaded.header["count"] == 10);
  for (const auto& e : loaded.entries) {
    CHECK(e.labeled);
    const Image img = read_image(loaded.resolve(e.image_path));
    CHECK(img.height == 256);
    CHECK(img.width == 256);
    const AnnotationSet ann = load_annotations(loaded, e);
    CHECK(validate_annotations(ann, &img).empty());
    CHECK(ann.oa_grade.has_value());
    CHECK(ann.joint_space_widths.has_value());
  }
  // every phantom carries a grade, so grading keeps everything
  CHECK(select_for_pathology(loaded, "grading").size() == 10);

  CHECK_THROWS_AS(generate_dataset(0, dist, 1, dir.str()), UsageError);
}

TEST_CASE("generated datasets are reproducible across calls", "[phantom]") {
  TempDir d1("repro1"), d2("repro2");
  PhantomDistribution dist;
  generate_dataset(4, dist, 555, d1.str());
  generate_dataset(4, dist, 555, d2.str());
  for (int i = 1; i <= 4; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "images/phantom-%06d.png", i);
    const Image a = read_image(d1.str() + "/" + name);
    const Image b = read_image(d2.str() + "/" + name);
    CHECK(a.pixels == b.pixels);
  }
}

TEST_CASE("distribution sampling matches its weights", "[phantom]") {
  PhantomDistribution dist;
  Rng rng(31);
  int female = 0, lateral = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const ScanMeta m = dist.sample_meta(rng, i % 2 == 0 ? "AP" : "Lateral");
    if (m.gender == "Female") ++female;
    if (m.view == "Lateral") ++lateral;
  }
  // weights 664102 : 691209 -> Female share about 51%
  CHECK_THAT(double(female) / n, WithinAbs(0.51, 0.02));
  CHECK(lateral == n / 2);  // view is passed through

  int misaligned = 0;
  for (int i = 0; i < 2000; ++i) {
    const PhantomSpec s = dist.sample_spec(rng);
    CHECK_NOTHROW(s.validate());
    if (std::abs(s.alignment_angle) >= kMisalignmentCutDeg) ++misaligned;
  }
  CHECK_THAT(double(misaligned) / 2000, WithinAbs(dist.p_misaligned, 0.05));
}
