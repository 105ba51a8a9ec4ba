// JSON (de)serialization for domain types and line-delimited record files.
// Field names follow the domain model exactly; masks are run-length encoded.
#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "kxr/types.hpp"

namespace kxr {

using json = nlohmann::json;

// ---- ScanMeta ----
inline json to_json(const ScanMeta& m) {
  return {{"age_group", m.age_group},
          {"gender", m.gender},
          {"manufacturer", m.manufacturer},
          {"view", m.view}};
}
inline ScanMeta meta_from_json(const json& j) {
  ScanMeta m;
  m.age_group = j.at("age_group").get<std::string>();
  m.gender = j.at("gender").get<std::string>();
  m.manufacturer = j.at("manufacturer").get<std::string>();
  m.view = j.at("view").get<std::string>();
  return m;
}

// ---- geometry ----
inline json to_json(const BoundingBox& b) {
  return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}};
}
inline BoundingBox box_from_json(const json& j) {
  return {j.at("x_min").get<double>(), j.at("y_min").get<double>(),
          j.at("x_max").get<double>(), j.at("y_max").get<double>()};
}

inline json to_json(const Mask& m) {
  // run-length encoding over the row-major raster, starting with a 0-run
  json runs = json::array();
  uint8_t current = 0;
  size_t run = 0;
  for (uint8_t v : m.data) {
    if (v == current) {
      ++run;
    } else {
      runs.push_back(run);
      current = v;
      run = 1;
    }
  }
  runs.push_back(run);
  return {{"x", m.x0}, {"y", m.y0}, {"height", m.height}, {"width", m.width}, {"rle", runs}};
}
inline Mask mask_from_json(const json& j) {
  Mask m;
  m.x0 = j.at("x").get<int>();
  m.y0 = j.at("y").get<int>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.data.reserve(static_cast<size_t>(m.height) * m.width);
  uint8_t current = 0;
  for (const auto& r : j.at("rle")) {
    m.data.insert(m.data.end(), r.get<size_t>(), current);
    current = 1 - current;
  }
  if (m.data.size() != static_cast<size_t>(m.height) * m.width)
    throw IntegrityError("mask rle does not match height*width");
  return m;
}

inline json to_json(const KeypointSet& k) {
  json j;
  const auto pts = k.points();
  for (size_t i = 0; i < 4; ++i) j[keypoint_names()[i]] = {{"x", pts[i].x}, {"y", pts[i].y}};
  return j;
}
inline KeypointSet keypoints_from_json(const json& j) {
  KeypointSet k;
  for (size_t i = 0; i < 4; ++i) {
    const auto& p = j.at(keypoint_names()[i]);
    k.set(i, {p.at("x").get<double>(), p.at("y").get<double>()});
  }
  return k;
}

// ---- AnnotationSet ----
inline json to_json(const AnnotationSet& a) {
  json j = json::object();
  if (a.joint_space_widths)
    j["joint_space_widths"] = {{"medial", a.joint_space_widths->medial},
                               {"lateral", a.joint_space_widths->lateral}};
  auto boxes_to_json = [](const std::vector<BoundingBox>& boxes) {
    json arr = json::array();
    for (const auto& b : boxes) arr.push_back(to_json(b));
    return arr;
  };
  auto masks_to_json = [](const std::vector<Mask>& masks) {
    json arr = json::array();
    for (const auto& m : masks) arr.push_back(to_json(m));
    return arr;
  };
  j["sclerosis_boxes"] = boxes_to_json(a.sclerosis_boxes);
  j["osteophyte_boxes"] = boxes_to_json(a.osteophyte_boxes);
  j["implant_masks"] = masks_to_json(a.implant_masks);
  if (a.alignment)
    j["alignment"] = {{"keypoints", to_json(a.alignment->keypoints)},
                      {"varus_valgus_angle", a.alignment->varus_valgus_angle},
                      {"misaligned", a.alignment->misaligned}};
  j["soft_tissue_masks"] = masks_to_json(a.soft_tissue_masks);
  j["tibial_spike_boxes"] = boxes_to_json(a.tibial_spike_boxes);
  if (a.oa_grade) j["oa_grade"] = *a.oa_grade;
  return j;
}
inline AnnotationSet annotations_from_json(const json& j) {
  AnnotationSet a;
  if (j.contains("joint_space_widths")) {
    a.joint_space_widths = JointSpaceWidths{j["joint_space_widths"].at("medial").get<double>(),
                                            j["joint_space_widths"].at("lateral").get<double>()};
  }
  auto boxes = [&](const char* key, std::vector<BoundingBox>& out) {
    if (!j.contains(key)) return;
    for (const auto& b : j[key]) out.push_back(box_from_json(b));
  };
  auto masks = [&](const char* key, std::vector<Mask>& out) {
    if (!j.contains(key)) return;
    for (const auto& m : j[key]) out.push_back(mask_from_json(m));
  };
  boxes("sclerosis_boxes", a.sclerosis_boxes);
  boxes("osteophyte_boxes", a.osteophyte_boxes);
  masks("implant_masks", a.implant_masks);
  if (j.contains("alignment")) {
    AlignmentAnnotation al;
    al.keypoints = keypoints_from_json(j["alignment"].at("keypoints"));
    al.varus_valgus_angle = j["alignment"].at("varus_valgus_angle").get<double>();
    al.misaligned = j["alignment"].at("misaligned").get<bool>();
    a.alignment = al;
  }
  masks("soft_tissue_masks", a.soft_tissue_masks);
  boxes("tibial_spike_boxes", a.tibial_spike_boxes);
  if (j.contains("oa_grade")) a.oa_grade = j["oa_grade"].get<int>();
  return a;
}

// ---- GateResult / FindingReport ----
inline json to_json(const GateResult& g) {
  json j = json::object();
  if (g.is_xray) j["is_xray"] = {{"accept", g.is_xray->accept}, {"confidence", g.is_xray->confidence}};
  if (g.is_knee) j["is_knee"] = {{"accept", g.is_knee->accept}, {"confidence", g.is_knee->confidence}};
  if (g.view) j["view"] = {{"view", g.view->view}, {"confidence", g.view->confidence}};
  if (g.rotation_applied) j["rotation_applied"] = *g.rotation_applied;
  if (g.rejected_at) j["rejected_at"] = *g.rejected_at;
  return j;
}
inline GateResult gate_from_json(const json& j) {
  GateResult g;
  if (j.contains("is_xray"))
    g.is_xray = StageDecision{j["is_xray"].at("accept").get<bool>(),
                              j["is_xray"].at("confidence").get<double>()};
  if (j.contains("is_knee"))
    g.is_knee = StageDecision{j["is_knee"].at("accept").get<bool>(),
                              j["is_knee"].at("confidence").get<double>()};
  if (j.contains("view"))
    g.view = ViewDecision{j["view"].at("view").get<std::string>(),
                          j["view"].at("confidence").get<double>()};
  if (j.contains("rotation_applied")) g.rotation_applied = j["rotation_applied"].get<double>();
  if (j.contains("rejected_at")) g.rejected_at = j["rejected_at"].get<std::string>();
  return g;
}

inline json to_json(const Finding& f) {
  json j;
  if (std::holds_alternative<BoundingBox>(f.region))
    j["box"] = to_json(std::get<BoundingBox>(f.region));
  else
    j["mask"] = to_json(std::get<Mask>(f.region));
  j["confidence"] = f.confidence;
  return j;
}
inline Finding finding_from_json(const json& j) {
  Finding f;
  if (j.contains("box"))
    f.region = box_from_json(j["box"]);
  else
    f.region = mask_from_json(j.at("mask"));
  f.confidence = j.at("confidence").get<double>();
  return f;
}

inline json to_json(const FindingReport& r) {
  json j;
  j["scan_id"] = r.scan_id;
  j["gate"] = to_json(r.gate);
  json fj = json::object();
  for (const auto& [pathology, findings] : r.findings) {
    json arr = json::array();
    for (const auto& f : findings) arr.push_back(to_json(f));
    fj[pathology] = arr;
  }
  j["findings"] = fj;
  if (r.joint_space_pred)
    j["joint_space_pred"] = {{"medial", r.joint_space_pred->medial},
                             {"lateral", r.joint_space_pred->lateral}};
  if (r.alignment_pred)
    j["alignment_pred"] = {{"angle", r.alignment_pred->angle},
                           {"misaligned_prob", r.alignment_pred->misaligned_prob}};
  if (r.grade) {
    j["grade_probs"] = r.grade->probs;
    j["grade"] = r.grade->grade;
  }
  return j;
}
inline FindingReport report_from_json(const json& j) {
  FindingReport r;
  r.scan_id = j.at("scan_id").get<std::string>();
  r.gate = gate_from_json(j.at("gate"));
  for (const auto& [pathology, arr] : j.at("findings").items()) {
    std::vector<Finding> fs;
    for (const auto& f : arr) fs.push_back(finding_from_json(f));
    r.findings[pathology] = std::move(fs);
  }
  if (j.contains("joint_space_pred"))
    r.joint_space_pred = JointSpaceWidths{j["joint_space_pred"].at("medial").get<double>(),
                                          j["joint_space_pred"].at("lateral").get<double>()};
  if (j.contains("alignment_pred"))
    r.alignment_pred = AlignmentPrediction{j["alignment_pred"].at("angle").get<double>(),
                                           j["alignment_pred"].at("misaligned_prob").get<double>()};
  if (j.contains("grade_probs")) {
    GradeOutput g;
    for (int i = 0; i < 4; ++i) g.probs[i] = j["grade_probs"].at(i).get<double>();
    g.grade = j.at("grade").get<int>();
    r.grade = g;
  }
  return r;
}

// ---- line-delimited record files ----

inline std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<json> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<json>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records) out << r.dump() << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IntegrityError(path + ": malformed json: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j, int indent = 1) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(indent) << "\n";
}

}  // namespace kxr
