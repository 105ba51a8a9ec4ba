// Aggregation of per-scan outcomes into per-pathology and per-subgroup
// confusion tables, plus the text/CSV renderings of those tables.
#pragma once

#include "kxr/metrics.hpp"
#include "kxr/serialize.hpp"

namespace kxr {

inline std::string pathology_label(const std::string& id) {
  if (id == "joint_space") return "Reducing Joint Space";
  if (id == "sclerosis") return "Sclerosis";
  if (id == "osteophytes") return "Osteophytes";
  if (id == "tibial_spike") return "Prominent Tibial Spike";
  if (id == "alignment") return "Alignment Issues in Bone";
  if (id == "soft_tissue") return "Soft Tissue Anomaly";
  if (id == "grading") return "Grading of Osteoarthritis";
  throw UsageError("unknown pathology \"" + id + "\"");
}

// Pathologies in report order.
inline const std::vector<std::string>& report_pathologies() {
  static const std::vector<std::string> ids{"joint_space", "sclerosis",    "osteophytes",
                                            "tibial_spike", "alignment",   "soft_tissue",
                                            "grading"};
  return ids;
}

struct MetricRow {
  std::string id;
  std::string label;
  ConfusionMatrix cm;
};

struct EvalReport {
  std::vector<MetricRow> pathologies;
  std::vector<std::pair<std::string, std::vector<MetricRow>>> subgroups;  // axis -> rows
};

// One scan's outcome: per-pathology presence calls (predicted, actual).
struct ScanEval {
  ScanMeta meta;
  std::map<std::string, std::pair<bool, bool>> presence;
};

inline EvalReport aggregate(const std::vector<ScanEval>& scans) {
  EvalReport r;
  for (const auto& id : report_pathologies()) r.pathologies.push_back({id, pathology_label(id), {}});
  const std::vector<std::pair<std::string, std::vector<std::string>>> axes{
      {"age_group", {meta::age_groups().begin(), meta::age_groups().end()}},
      {"gender", {meta::genders().begin(), meta::genders().end()}},
      {"manufacturer", {meta::manufacturers().begin(), meta::manufacturers().end()}}};
  for (const auto& [axis, groups] : axes) {
    std::vector<MetricRow> rows;
    for (const auto& g : groups) rows.push_back({g, g, {}});
    r.subgroups.emplace_back(axis, std::move(rows));
  }
  for (const ScanEval& s : scans) {
    for (auto& row : r.pathologies) {
      const auto it = s.presence.find(row.id);
      if (it == s.presence.end()) continue;
      tally_presence(row.cm, it->second.first, it->second.second);
    }
    for (auto& [axis, rows] : r.subgroups) {
      const std::string& value = axis == "age_group" ? s.meta.age_group
                                 : axis == "gender"  ? s.meta.gender
                                                     : s.meta.manufacturer;
      for (auto& row : rows) {
        if (row.id != value) continue;
        for (const auto& [pathology, pa] : s.presence)
          tally_presence(row.cm, pa.first, pa.second);
      }
    }
  }
  return r;
}

inline EvalReport report_from_fixture(const json& j) {
  EvalReport r;
  auto cm_of = [](const json& row) {
    return ConfusionMatrix{row.at("tp").get<uint64_t>(), row.at("fp").get<uint64_t>(),
                           row.at("tn").get<uint64_t>(), row.at("fn").get<uint64_t>()};
  };
  for (const auto& row : j.at("pathologies"))
    r.pathologies.push_back(
        {row.at("id").get<std::string>(), row.at("label").get<std::string>(), cm_of(row)});
  for (const auto& axis : {"age_group", "gender", "manufacturer"}) {
    std::vector<MetricRow> rows;
    for (const auto& row : j.at("subgroups").at(axis)) {
      const std::string g = row.at("group").get<std::string>();
      rows.push_back({g, g, cm_of(row)});
    }
    r.subgroups.emplace_back(axis, std::move(rows));
  }
  return r;
}

inline EvalReport load_fixture(const std::filesystem::path& path) {
  return report_from_fixture(read_json_file(path));
}

// ---- Rendering ----

namespace detail {

inline std::string metric_cell(const MetricValue& v) {
  if (!v.present()) return "n/a";
  return format_percent(v.get());
}

inline void render_rows(std::string& out, const std::vector<MetricRow>& rows) {
  size_t width = 12;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-*s %9s %9s %9s\n", static_cast<int>(width), "",
                "Precision", "Recall", "NPV");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s %9s %9s %9s\n", static_cast<int>(width),
                  r.label.c_str(), metric_cell(precision(r.cm)).c_str(),
                  metric_cell(recall(r.cm)).c_str(), metric_cell(npv(r.cm)).c_str());
    out += buf;
  }
}

inline std::string axis_title(const std::string& axis) {
  if (axis == "age_group") return "By age group";
  if (axis == "gender") return "By gender";
  if (axis == "manufacturer") return "By manufacturer";
  return "By " + axis;
}

}  // namespace detail

inline std::string render_tables(const EvalReport& r) {
  std::string out = "Per-pathology performance\n";
  detail::render_rows(out, r.pathologies);
  for (const auto& [axis, rows] : r.subgroups) {
    out += "\n" + detail::axis_title(axis) + "\n";
    detail::render_rows(out, rows);
  }
  return out;
}

inline std::string render_csv(const EvalReport& r) {
  std::string out = "section,id,label,tp,fp,fn,tn,precision,recall,npv\n";
  auto emit = [&out](const std::string& section, const MetricRow& row) {
    out += section + "," + row.id + ",\"" + row.label + "\"," + std::to_string(row.cm.tp) + "," +
           std::to_string(row.cm.fp) + "," + std::to_string(row.cm.fn) + "," +
           std::to_string(row.cm.tn) + "," + detail::metric_cell(precision(row.cm)) + "," +
           detail::metric_cell(recall(row.cm)) + "," + detail::metric_cell(npv(row.cm)) + "\n";
  };
  for (const auto& row : r.pathologies) emit("pathology", row);
  for (const auto& [axis, rows] : r.subgroups)
    for (const auto& row : rows) emit(axis, row);
  return out;
}

// JSON round trip for evaluation artifacts.
inline json to_json(const EvalReport& r) {
  json p = json::array();
  for (const auto& row : r.pathologies)
    p.push_back({{"id", row.id},
                 {"label", row.label},
                 {"tp", row.cm.tp},
                 {"fp", row.cm.fp},
                 {"fn", row.cm.fn},
                 {"tn", row.cm.tn}});
  json sub = json::object();
  for (const auto& [axis, rows] : r.subgroups) {
    json a = json::array();
    for (const auto& row : rows)
      a.push_back({{"group", row.id},
                   {"tp", row.cm.tp},
                   {"fp", row.cm.fp},
                   {"fn", row.cm.fn},
                   {"tn", row.cm.tn}});
    sub[axis] = a;
  }
  return {{"pathologies", p}, {"subgroups", sub}};
}

inline EvalReport eval_report_from_json(const json& j) { return report_from_fixture(j); }

}  // namespace kxr
