// Dataset manifests: line-delimited records, one scan per line, with an
// optional leading header record ({"header": {...}}).
#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "kxr/serialize.hpp"

namespace kxr {

struct ManifestEntry {
  std::string scan_id;
  std::string image_path;
  ScanMeta meta;
  std::string annotations_path;  // empty when unlabeled
  bool labeled = false;
};

struct DatasetManifest {
  std::string base_dir;  // directory the manifest was loaded from; "" if in-memory
  json header;           // optional metadata (counts, pixel_spacing_mm, ...)
  std::vector<ManifestEntry> entries;

  size_t size() const { return entries.size(); }

  std::string resolve(const std::string& path) const {
    if (base_dir.empty() || path.empty() || path.front() == '/') return path;
    return (std::filesystem::path(base_dir) / path).string();
  }
};

inline json to_json(const ManifestEntry& e) {
  json j;
  j["scan_id"] = e.scan_id;
  j["image_path"] = e.image_path;
  j["meta"] = to_json(e.meta);
  if (!e.annotations_path.empty()) j["annotations_path"] = e.annotations_path;
  j["labeled"] = e.labeled;
  return j;
}

inline DatasetManifest parse_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  DatasetManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::set<std::string> seen;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    if (j.contains("header")) {
      m.header = j["header"];
      continue;
    }
    ManifestEntry e;
    try {
      e.scan_id = j.at("scan_id").get<std::string>();
      e.image_path = j.at("image_path").get<std::string>();
      e.meta = meta_from_json(j.at("meta"));
      if (j.contains("annotations_path")) e.annotations_path = j["annotations_path"].get<std::string>();
      e.labeled = j.at("labeled").get<bool>();
    } catch (const json::exception& ex) {
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": malformed record: " + ex.what());
    }
    if (e.scan_id.empty())
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": empty scan_id");
    if (!seen.insert(e.scan_id).second)
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": duplicate scan_id \"" +
                           e.scan_id + "\"");
    const auto violations = validate_meta(e.meta);
    if (!violations.empty())
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": " + violations.front());
    if (e.labeled != !e.annotations_path.empty())
      throw IntegrityError(path + ":" + std::to_string(line_no) +
                           ": labeled flag inconsistent with annotations_path");
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::vector<json> records;
  records.reserve(m.entries.size() + 1);
  if (!m.header.is_null()) records.push_back(json{{"header", m.header}});
  for (const auto& e : m.entries) records.push_back(to_json(e));
  write_jsonl(path, records);
}

// Partition by view. Every view key is present, possibly empty.
inline std::map<std::string, DatasetManifest> segregate_by_view(const DatasetManifest& m) {
  std::map<std::string, DatasetManifest> out;
  for (const auto& v : meta::views()) {
    out[v].base_dir = m.base_dir;
    out[v].header = m.header;
  }
  for (const auto& e : m.entries) out[e.meta.view].entries.push_back(e);
  return out;
}

inline const std::vector<std::string>& pathology_ids() {
  static const std::vector<std::string> v{"joint_space", "sclerosis",   "osteophytes",
                                          "postop",      "alignment",   "soft_tissue",
                                          "tibial_spike"};
  return v;
}

// True when the annotation set carries a usable label for the pathology.
inline bool annotation_covers(const AnnotationSet& a, const std::string& pathology) {
  if (pathology == "joint_space") return a.joint_space_widths.has_value();
  if (pathology == "sclerosis") return !a.sclerosis_boxes.empty();
  if (pathology == "osteophytes") return !a.osteophyte_boxes.empty();
  if (pathology == "postop") return !a.implant_masks.empty();
  if (pathology == "alignment") return a.alignment.has_value();
  if (pathology == "soft_tissue") return !a.soft_tissue_masks.empty();
  if (pathology == "tibial_spike") return !a.tibial_spike_boxes.empty();
  if (pathology == "grading") return a.oa_grade.has_value();
  throw UsageError("unknown pathology \"" + pathology + "\"");
}

inline AnnotationSet load_annotations(const DatasetManifest& m, const ManifestEntry& e) {
  if (!e.labeled) throw UsageError("entry " + e.scan_id + " is unlabeled");
  return annotations_from_json(read_json_file(m.resolve(e.annotations_path)));
}

inline DatasetManifest select_for_pathology(const DatasetManifest& m, const std::string& pathology) {
  bool known = pathology == "grading";
  for (const auto& p : pathology_ids()) known = known || p == pathology;
  if (!known) throw UsageError("unknown pathology \"" + pathology + "\"");
  DatasetManifest out;
  out.base_dir = m.base_dir;
  out.header = m.header;
  for (const auto& e : m.entries) {
    if (!e.labeled) continue;
    if (annotation_covers(load_annotations(m, e), pathology)) out.entries.push_back(e);
  }
  return out;
}

}  // namespace kxr
