// Orchestration layer behind the CLI verbs. Every command reads and writes
// artifacts on disk and drops a run manifest next to its outputs so a run can
// be traced from any artifact back to its inputs and configuration.
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kxr/ensemble.hpp"
#include "kxr/gatekeeper.hpp"
#include "kxr/phantom.hpp"
#include "kxr/split.hpp"
#include "kxr/subgroup.hpp"

namespace kxr {

// ---- Configuration ----

// Decision thresholds used when findings are reduced to present/absent labels
// for the evaluation tables.
struct EvalCuts {
  double narrow_fraction = 30.0 / 256.0;  // min joint width below this x image height
  double misaligned_prob = 0.5;
  double finding_confidence = 0.5;

  void validate() const {
    if (narrow_fraction <= 0 || narrow_fraction >= 1)
      throw UsageError("evaluate: narrow_fraction outside (0,1)");
    if (misaligned_prob < 0 || misaligned_prob > 1)
      throw UsageError("evaluate: misaligned_prob outside [0,1]");
    if (finding_confidence < 0 || finding_confidence > 1)
      throw UsageError("evaluate: finding_confidence outside [0,1]");
  }
};

inline json to_json(const EvalCuts& c) {
  return json{{"narrow_fraction", c.narrow_fraction},
              {"misaligned_prob", c.misaligned_prob},
              {"finding_confidence", c.finding_confidence}};
}

inline EvalCuts eval_cuts_from_json(const json& j) {
  EvalCuts c;
  if (j.contains("narrow_fraction")) c.narrow_fraction = j["narrow_fraction"].get<double>();
  if (j.contains("misaligned_prob")) c.misaligned_prob = j["misaligned_prob"].get<double>();
  if (j.contains("finding_confidence"))
    c.finding_confidence = j["finding_confidence"].get<double>();
  return c;
}

// How the intake classifiers are trained: they learn from generated scenes,
// so the corpus size and thumbnail resolution are knobs, not data paths.
struct GateTrainSpec {
  int per_stage = 320;        // images synthesized per stage
  double val_fraction = 0.2;  // held out for the per-epoch metric
  int input = 64;             // thumbnail edge length
  int epochs = 8;
  int scene_size = 256;       // resolution scenes are rendered at

  void validate() const {
    if (per_stage < 10) throw UsageError("gate training: per_stage must be >= 10");
    if (val_fraction <= 0 || val_fraction >= 1)
      throw UsageError("gate training: val_fraction outside (0,1)");
    if (input < 16) throw UsageError("gate training: input below 16");
    if (epochs < 1) throw UsageError("gate training: epochs must be >= 1");
    if (scene_size < 64) throw UsageError("gate training: scene_size below 64");
  }
};

inline json to_json(const GateTrainSpec& g) {
  return json{{"per_stage", g.per_stage},
              {"val_fraction", g.val_fraction},
              {"input", g.input},
              {"epochs", g.epochs},
              {"scene_size", g.scene_size}};
}

inline GateTrainSpec gate_train_spec_from_json(const json& j) {
  GateTrainSpec g;
  if (j.contains("per_stage")) g.per_stage = j["per_stage"].get<int>();
  if (j.contains("val_fraction")) g.val_fraction = j["val_fraction"].get<double>();
  if (j.contains("input")) g.input = j["input"].get<int>();
  if (j.contains("epochs")) g.epochs = j["epochs"].get<int>();
  if (j.contains("scene_size")) g.scene_size = j["scene_size"].get<int>();
  return g;
}

struct PipelineConfig {
  std::string data_dir = "data";
  std::string models_dir = "models";
  std::string reports_dir = "reports";
  uint64_t seed = 0;
  int epochs = 10;
  bool deterministic = true;  // serial execution; kept for interface stability
  int workers = 1;
  PreprocessSpec preprocess;  // photometric windowing applied before the gate
  SplitSpec split;
  GateThresholds gate;
  GateTrainSpec gate_train;
  EnsembleSpec ensemble = default_ensemble_spec();
  EvalCuts cuts;
  PhantomDistribution phantoms;
  std::map<std::string, json> training_overrides;  // pathology -> full recipe

  // The training recipe for one pathology: an override if the config carries
  // one, otherwise the built-in recipe.
  TrainingConfig config_for(const std::string& pathology) const {
    auto it = training_overrides.find(pathology);
    if (it != training_overrides.end()) return training_config_from_json(it->second);
    return builtin_config(pathology);
  }
};

inline json to_json(const PipelineConfig& c) {
  json j{{"data_dir", c.data_dir},
         {"models_dir", c.models_dir},
         {"reports_dir", c.reports_dir},
         {"seed", c.seed},
         {"epochs", c.epochs},
         {"deterministic", c.deterministic},
         {"workers", c.workers},
         {"preprocess", to_json(c.preprocess)},
         {"split", to_json(c.split)},
         {"gate_thresholds",
          {{"modality", c.gate.modality}, {"anatomy", c.gate.anatomy}, {"view", c.gate.view}}},
         {"gate_train", to_json(c.gate_train)},
         {"ensemble", to_json(c.ensemble)},
         {"evaluate", to_json(c.cuts)},
         {"phantoms", to_json(c.phantoms)}};
  if (!c.training_overrides.empty()) {
    json o = json::object();
    for (const auto& [k, v] : c.training_overrides) o[k] = v;
    j["training_overrides"] = o;
  }
  return j;
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
  if (j.contains("models_dir")) c.models_dir = j["models_dir"].get<std::string>();
  if (j.contains("reports_dir")) c.reports_dir = j["reports_dir"].get<std::string>();
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("deterministic")) c.deterministic = j["deterministic"].get<bool>();
  if (j.contains("workers")) c.workers = j["workers"].get<int>();
  if (j.contains("preprocess")) c.preprocess = preprocess_spec_from_json(j["preprocess"]);
  if (j.contains("split")) c.split = split_spec_from_json(j["split"]);
  if (j.contains("gate_thresholds")) {
    const json& g = j["gate_thresholds"];
    if (g.contains("modality")) c.gate.modality = g["modality"].get<double>();
    if (g.contains("anatomy")) c.gate.anatomy = g["anatomy"].get<double>();
    if (g.contains("view")) c.gate.view = g["view"].get<double>();
  }
  if (j.contains("gate_train")) c.gate_train = gate_train_spec_from_json(j["gate_train"]);
  if (j.contains("ensemble")) c.ensemble = ensemble_spec_from_json(j["ensemble"]);
  if (j.contains("evaluate")) c.cuts = eval_cuts_from_json(j["evaluate"]);
  if (j.contains("phantoms")) c.phantoms = phantom_distribution_from_json(j["phantoms"]);
  if (j.contains("training_overrides")) {
    for (const auto& [k, v] : j["training_overrides"].items()) c.training_overrides[k] = v;
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  try {
    return pipeline_config_from_json(read_json_file(path));
  } catch (const json::exception& e) {
    throw IntegrityError("config: malformed JSON in " + path + ": " + e.what());
  }
}

// Hash over the canonical serialized form, so semantically equal configs
// (regardless of key order or whitespace in the source file) agree.
inline std::string config_hash(const PipelineConfig& c) { return to_hex(fnv1a64(to_json(c).dump())); }

// ---- Run manifests ----

namespace detail {

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return to_hex(fnv1a64(bytes));
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

struct RunManifest {
  std::string run_id;
  std::string command;
  std::string timestamp;  // informational; not part of the run id
  std::string config_hash;
  std::string input_hash;  // hash of the primary input file, "" when none
  uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
};

inline json to_json(const RunManifest& r) {
  return json{{"run_id", r.run_id},
              {"command", r.command},
              {"timestamp", r.timestamp},
              {"config_hash", r.config_hash},
              {"input_hash", r.input_hash},
              {"seed", r.seed},
              {"inputs", r.inputs},
              {"outputs", r.outputs},
              {"versions",
               {{"kxr", kLibraryVersion}, {"checkpoint_format", nn::kCheckpointVersion}}}};
}

inline RunManifest make_run_manifest(const std::string& command, const PipelineConfig& cfg,
                                     std::vector<std::string> inputs,
                                     std::vector<std::string> outputs) {
  RunManifest r;
  r.command = command;
  r.timestamp = detail::utc_timestamp();
  r.config_hash = config_hash(cfg);
  r.input_hash = inputs.empty() ? "" : detail::file_hash(inputs.front());
  r.seed = cfg.seed;
  r.inputs = std::move(inputs);
  r.outputs = std::move(outputs);
  r.run_id = command + "-" + r.config_hash.substr(0, 8) +
             (r.input_hash.empty() ? "" : "-" + r.input_hash.substr(0, 8));
  return r;
}

inline void write_run_manifest(const std::string& dir, const RunManifest& r) {
  write_json_file((std::filesystem::path(dir) / "run.json").string(), to_json(r));
}

// ---- gen-phantoms ----

struct GenPhantomsResult {
  std::string manifest_path;
  int count = 0;
};

inline GenPhantomsResult cmd_gen_phantoms(const PipelineConfig& cfg, const std::string& out_dir,
                                          int n, uint64_t seed) {
  const DatasetManifest m = generate_dataset(n, cfg.phantoms, seed, out_dir);
  GenPhantomsResult res;
  res.manifest_path = (std::filesystem::path(out_dir) / "manifest.jsonl").string();
  res.count = static_cast<int>(m.entries.size());
  PipelineConfig stamped = cfg;
  stamped.seed = seed;
  write_run_manifest(out_dir, make_run_manifest("gen-phantoms", stamped, {},
                                                {res.manifest_path, out_dir + "/images",
                                                 out_dir + "/annotations"}));
  return res;
}

// ---- ingest ----

struct IngestSummary {
  int total = 0, labeled = 0;
  std::map<std::string, int> by_view;
  std::vector<std::string> issues;  // "scan_id: message"
};

inline json to_json(const IngestSummary& s) {
  return json{{"total", s.total},
              {"labeled", s.labeled},
              {"by_view", s.by_view},
              {"issues", s.issues}};
}

inline IngestSummary cmd_ingest(const std::string& manifest_path, bool check_images) {
  const DatasetManifest m = parse_manifest(manifest_path);
  IngestSummary s;
  s.total = static_cast<int>(m.entries.size());
  for (const ManifestEntry& e : m.entries) {
    s.labeled += e.labeled ? 1 : 0;
    ++s.by_view[e.meta.view];
    if (!check_images) continue;
    // Deep check: every problem becomes a report line, never an abort.
    try {
      Scan scan;
      scan.id = e.scan_id;
      scan.meta = e.meta;
      scan.image = read_image(m.resolve(e.image_path));
      for (const std::string& msg : validate_scan(scan)) s.issues.push_back(e.scan_id + ": " + msg);
      if (e.labeled) {
        const AnnotationSet ann = load_annotations(m, e);
        for (const std::string& msg : validate_annotations(ann, &scan.image))
          s.issues.push_back(e.scan_id + ": " + msg);
      }
    } catch (const std::runtime_error& err) {
      s.issues.push_back(e.scan_id + ": " + std::string(err.what()));
    }
  }
  return s;
}

// ---- split ----

struct SplitResult {
  std::string train_path, trial_path;
  int train_count = 0, trial_count = 0;
};

namespace detail {

// Entry paths are relative to the manifest they live in; rewriting them keeps
// them valid when the split manifests land in a different directory.
inline void rebase_entries(DatasetManifest& m, const std::string& from_dir,
                           const std::string& to_dir) {
  namespace fs = std::filesystem;
  if (fs::absolute(from_dir) == fs::absolute(to_dir)) return;
  auto rebase = [&](std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return;
    p = fs::relative(fs::absolute(fs::path(from_dir) / p), fs::absolute(to_dir))
            .generic_string();
  };
  for (ManifestEntry& e : m.entries) {
    rebase(e.image_path);
    rebase(e.annotations_path);
  }
}

}  // namespace detail

inline SplitResult cmd_split(const PipelineConfig& cfg, const std::string& manifest_path,
                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  const DatasetManifest m = parse_manifest(manifest_path);
  SplitSpec spec = cfg.split;
  spec.seed ^= cfg.seed;
  auto [train, trial] = stratified_split(m, spec);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);
  detail::rebase_entries(train, m.base_dir, out_dir);
  detail::rebase_entries(trial, m.base_dir, out_dir);

  SplitResult res;
  res.train_path = (fs::path(out_dir) / "train.jsonl").string();
  res.trial_path = (fs::path(out_dir) / "trial.jsonl").string();
  res.train_count = static_cast<int>(train.entries.size());
  res.trial_count = static_cast<int>(trial.entries.size());
  write_manifest(res.train_path, train);
  write_manifest(res.trial_path, trial);
  write_run_manifest(out_dir, make_run_manifest("split", cfg, {manifest_path},
                                                {res.train_path, res.trial_path}));
  return res;
}

// ---- train ----

inline const std::vector<std::string>& trainable_components() {
  static const std::vector<std::string> v{"joint_space", "sclerosis",   "osteophytes",
                                          "postop",      "alignment",   "soft_tissue",
                                          "tibial_spike", "grading",    "gate"};
  return v;
}

namespace detail {

inline json history_to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const EpochStat& e : h.epochs)
    epochs.push_back(json{{"epoch", e.epoch},
                          {"lr", e.lr},
                          {"train_loss", e.train_loss},
                          {"val_metric", e.val_metric}});
  return json{{"metric", h.metric}, {"best_epoch", h.best_epoch}, {"epochs", epochs}};
}

inline DatasetManifest load_split_manifest(const std::string& path, const char* role) {
  if (!std::filesystem::exists(path))
    throw IoError(std::string(role) + " manifest not found: " + path +
                  " (run `kxr split` first)");
  return parse_manifest(path);
}

// A stage's training corpus: rendered scenes plus the off-distribution images
// the stage must reject, interleaved so class balance holds in any prefix.
inline std::vector<std::pair<Image, int>> gate_stage_images(const std::string& stage, int n,
                                                            int scene_size, uint64_t seed) {
  PhantomDistribution dist;
  dist.height = dist.width = scene_size;
  dist.view_weights = {0.5, 0.5};
  Rng rng(mix_seed(seed ^ fnv1a64(stage)));

  std::vector<std::pair<Image, int>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const uint64_t child = rng.u64();
    if (stage == "modality") {
      // Radiograph-like content (scenes, lone bones) vs noise and texture.
      switch (i % 6) {
        case 0:
        case 1:
        case 2: {
          auto [scan, ann] = generate_phantom(dist.sample_spec(rng), child);
          out.emplace_back(std::move(scan.image), 1);
          break;
        }
        case 3:
          out.emplace_back(generate_negative(NegativeKind::SingleBone, scene_size, scene_size, child),
                           1);
          break;
        case 4:
          out.emplace_back(generate_negative(NegativeKind::Noise, scene_size, scene_size, child), 0);
          break;
        default:
          out.emplace_back(generate_negative(NegativeKind::Texture, scene_size, scene_size, child),
                           0);
      }
    } else if (stage == "anatomy") {
      // A joint scene vs radiograph-like content that is not a knee.
      switch (i % 4) {
        case 0:
        case 2: {
          auto [scan, ann] = generate_phantom(dist.sample_spec(rng), child);
          out.emplace_back(std::move(scan.image), 1);
          break;
        }
        case 1:
          out.emplace_back(generate_negative(NegativeKind::SingleBone, scene_size, scene_size, child),
                           0);
          break;
        default:
          out.emplace_back(generate_negative(NegativeKind::Texture, scene_size, scene_size, child),
                           0);
      }
    } else if (stage == "view") {
      PhantomSpec spec = dist.sample_spec(rng);
      spec.view = (i % 2 == 0) ? "AP" : "Lateral";
      auto [scan, ann] = generate_phantom(spec, child);
      out.emplace_back(std::move(scan.image), i % 2);
    } else {
      throw UsageError("gate training: unknown stage \"" + stage + "\"");
    }
  }
  return out;
}

}  // namespace detail

struct TrainOutcome {
  std::string component;
  std::vector<std::string> checkpoints;
  std::string history_path;
  json summary;
};

inline TrainOutcome cmd_train(const PipelineConfig& cfg, const std::string& component,
                              const std::string& train_manifest, const std::string& val_manifest,
                              const std::string& out_dir, int epochs, uint64_t seed) {
  namespace fs = std::filesystem;
  const auto& known = trainable_components();
  if (std::find(known.begin(), known.end(), component) == known.end()) {
    std::string names;
    for (const auto& k : known) names += (names.empty() ? "" : ", ") + k;
    throw UsageError("train: unknown component \"" + component + "\" (valid: " + names + ")");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  TrainOutcome res;
  res.component = component;
  res.history_path = (fs::path(out_dir) / (component + "_history.json")).string();
  const uint64_t component_seed = mix_seed(seed ^ fnv1a64(component));
  json history;

  if (component == "gate") {
    cfg.gate_train.validate();
    history = json{{"component", "gate"}, {"stages", json::object()}};
    for (const std::string stage : {"modality", "anatomy", "view"}) {
      auto images = detail::gate_stage_images(stage, cfg.gate_train.per_stage,
                                              cfg.gate_train.scene_size, component_seed);
      // Deterministic interleaved hold-out keeps both classes in both halves.
      const int stride = std::max(2, static_cast<int>(std::lround(1.0 / cfg.gate_train.val_fraction)));
      std::vector<std::pair<Image, int>> train_imgs, val_imgs;
      for (size_t i = 0; i < images.size(); ++i)
        (static_cast<int>(i) % stride == stride - 1 ? val_imgs : train_imgs)
            .push_back(std::move(images[i]));
      const TrainingConfig stage_cfg = gate_stage_config(cfg.gate_train.input);
      Trained t = train_on_samples(stage_cfg, samples_from_images(stage_cfg, train_imgs),
                                   samples_from_images(stage_cfg, val_imgs),
                                   cfg.gate_train.epochs, mix_seed(component_seed ^ fnv1a64(stage)));
      const std::string path = (fs::path(out_dir) / ("gate_" + stage + ".kxrc")).string();
      save_model(path, t.model,
                 json{{"component", "gate_" + stage}, {"best_epoch", t.history.best_epoch}});
      res.checkpoints.push_back(path);
      history["stages"][stage] = detail::history_to_json(t.history);
    }
  } else {
    const DatasetManifest train = detail::load_split_manifest(train_manifest, "training");
    DatasetManifest val;
    if (!val_manifest.empty()) val = detail::load_split_manifest(val_manifest, "validation");

    if (component == "grading") {
      std::vector<TrainHistory> histories;
      TrainedEnsemble ens = train_ensemble(cfg.ensemble, train, val, epochs, component_seed,
                                           &cfg.preprocess, &histories);
      json members = json::array();
      json hist_members = json::array();
      for (size_t i = 0; i < ens.members.size(); ++i) {
        const std::string name = "grading_member" + std::to_string(i) + ".kxrc";
        const std::string path = (fs::path(out_dir) / name).string();
        save_model(path, ens.members[i],
                   json{{"component", "grading"},
                        {"member", i},
                        {"best_epoch", histories[i].best_epoch}});
        res.checkpoints.push_back(path);
        members.push_back(name);
        hist_members.push_back(detail::history_to_json(histories[i]));
      }
      const std::string spec_path = (fs::path(out_dir) / "grading_ensemble.json").string();
      write_json_file(spec_path, json{{"weights", ens.weights}, {"members", members}});
      res.checkpoints.push_back(spec_path);
      history = json{{"component", "grading"}, {"members", hist_members}};
    } else {
      const TrainingConfig tc = cfg.config_for(component);
      Trained t = train_detector(tc, train, val, epochs, component_seed, &cfg.preprocess);
      const std::string path = (fs::path(out_dir) / (component + ".kxrc")).string();
      const TrainHistory& h = t.history;
      save_model(path, t.model,
                 json{{"component", component},
                      {"best_epoch", h.best_epoch},
                      {"metric", h.metric},
                      {"val", h.epochs.empty() ? 0.0 : h.epochs[h.best_epoch].val_metric}});
      res.checkpoints.push_back(path);
      history = detail::history_to_json(h);
      history["component"] = component;
    }
  }

  write_json_file(res.history_path, history);
  res.summary = history;
  std::vector<std::string> outputs = res.checkpoints;
  outputs.push_back(res.history_path);
  PipelineConfig stamped = cfg;
  stamped.seed = seed;
  write_run_manifest(out_dir, make_run_manifest("train", stamped,
                                                {train_manifest, val_manifest}, outputs));
  return res;
}

// ---- predict ----

struct ModelStore {
  std::map<std::string, TaskModel> detectors;  // the seven per-pathology models
  TrainedEnsemble grading;
  TaskModel gate_modality, gate_anatomy, gate_view;
};

inline ModelStore load_model_store(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::vector<std::string> pathology_files{"joint_space.kxrc", "sclerosis.kxrc",
                                                 "osteophytes.kxrc", "postop.kxrc",
                                                 "alignment.kxrc",   "soft_tissue.kxrc",
                                                 "tibial_spike.kxrc"};
  std::vector<std::string> required = pathology_files;
  required.insert(required.end(), {"gate_modality.kxrc", "gate_anatomy.kxrc", "gate_view.kxrc",
                                   "grading_ensemble.json"});

  std::vector<std::string> member_files;
  if (fs::exists(fs::path(dir) / "grading_ensemble.json")) {
    const json spec = read_json_file((fs::path(dir) / "grading_ensemble.json").string());
    if (!spec.contains("members") || !spec.contains("weights"))
      throw IntegrityError("predict: malformed ensemble spec in " + dir);
    for (const auto& m : spec["members"]) member_files.push_back(m.get<std::string>());
    required.insert(required.end(), member_files.begin(), member_files.end());
  }

  std::vector<std::string> missing;
  for (const std::string& f : required)
    if (!fs::exists(fs::path(dir) / f)) missing.push_back(f);
  if (!missing.empty()) {
    std::string names;
    for (const auto& f : missing) names += (names.empty() ? "" : ", ") + f;
    throw IntegrityError("predict: missing checkpoints in " + dir + ": " + names +
                         " (run `kxr train` first)");
  }

  ModelStore store;
  for (const std::string& f : pathology_files) {
    TaskModel m = load_model((fs::path(dir) / f).string());
    store.detectors.emplace(m.config.pathology, std::move(m));
  }
  store.gate_modality = load_model((fs::path(dir) / "gate_modality.kxrc").string());
  store.gate_anatomy = load_model((fs::path(dir) / "gate_anatomy.kxrc").string());
  store.gate_view = load_model((fs::path(dir) / "gate_view.kxrc").string());

  const json spec = read_json_file((fs::path(dir) / "grading_ensemble.json").string());
  store.grading.weights = spec["weights"].get<std::vector<double>>();
  for (const std::string& f : member_files)
    store.grading.members.push_back(load_model((fs::path(dir) / f).string()));
  if (store.grading.weights.size() != store.grading.members.size())
    throw IntegrityError("predict: ensemble weight count differs from member count in " + dir);
  return store;
}

// One scan through the full cascade: gate, rotation fix, every detector, the
// grading ensemble. Rejected scans come back with the gate verdict only.
inline FindingReport predict_scan(const PipelineConfig& cfg, ModelStore& store,
                                  const std::string& scan_id, const Image& source) {
  FindingReport r;
  r.scan_id = scan_id;

  const Image prepped = normalize_photometric(cfg.preprocess, source);
  GateHooks hooks;
  hooks.modality = stage_hook(store.gate_modality);
  hooks.anatomy = stage_hook(store.gate_anatomy);
  hooks.view = view_hook(store.gate_view);
  hooks.landmarks = landmark_hook(store.detectors.at("alignment"));

  const GateOutcome gate = run_gate(prepped, hooks, cfg.gate);
  r.gate = gate.result;
  if (gate.result.rejected_at) return r;

  const Image& cor = *gate.corrected;
  const Prediction align = predict(store.detectors.at("alignment"), cor);
  r.alignment_pred = align.alignment;
  r.joint_space_pred = predict(store.detectors.at("joint_space"), cor).widths;
  r.findings["sclerosis"] = predict(store.detectors.at("sclerosis"), cor).findings;
  r.findings["osteophytes"] = predict(store.detectors.at("osteophytes"), cor).findings;
  r.findings["postop"] = predict(store.detectors.at("postop"), cor).findings;
  r.findings["soft_tissue"] = predict(store.detectors.at("soft_tissue"), cor).findings;
  try {
    const KeypointSet lm = align.landmarks->points;
    r.findings["tibial_spike"] = predict(store.detectors.at("tibial_spike"), cor, &lm).findings;
  } catch (const UsageError&) {
    // Degenerate landmark prediction: no usable plateau crop, so no findings.
    r.findings["tibial_spike"] = {};
  }
  r.grade = predict_ensemble(store.grading, cor);
  return r;
}

struct PredictResult {
  std::string findings_path;
  int total = 0, accepted = 0, rejected = 0;
};

inline PredictResult cmd_predict(const PipelineConfig& cfg, const std::string& manifest_path,
                                 const std::string& models_dir, const std::string& out_path) {
  namespace fs = std::filesystem;
  const DatasetManifest m = parse_manifest(manifest_path);
  ModelStore store = load_model_store(models_dir);

  if (fs::path(out_path).has_parent_path()) {
    std::error_code ec;
    fs::create_directories(fs::path(out_path).parent_path(), ec);
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + out_path);

  PredictResult res;
  res.findings_path = out_path;
  for (const ManifestEntry& e : m.entries) {
    const Image src = read_image(m.resolve(e.image_path));
    const FindingReport r = predict_scan(cfg, store, e.scan_id, src);
    (r.gate.rejected_at ? res.rejected : res.accepted) += 1;
    ++res.total;
    out << to_json(r).dump() << "\n";
  }
  out.flush();
  if (!out) throw IoError("write failed: " + out_path);

  if (fs::path(out_path).has_parent_path())
    write_run_manifest(fs::path(out_path).parent_path().string(),
                       make_run_manifest("predict", cfg, {manifest_path, models_dir}, {out_path}));
  return res;
}

// ---- evaluate ----

namespace detail {

// Reduce one pathology on one scan to (predicted, actual) presence; nullopt
// when the ground truth does not cover the pathology for this scan.
inline std::optional<std::pair<bool, bool>> presence_for(const std::string& pathology,
                                                         const FindingReport& r,
                                                         const AnnotationSet& ann, double height,
                                                         const EvalCuts& cuts) {
  auto any_finding = [&](const std::string& key) {
    auto it = r.findings.find(key);
    if (it == r.findings.end()) return false;
    for (const Finding& f : it->second)
      if (f.confidence >= cuts.finding_confidence) return true;
    return false;
  };

  if (pathology == "joint_space") {
    if (!ann.joint_space_widths) return std::nullopt;
    const double cut = cuts.narrow_fraction * height;
    const bool actual =
        std::min(ann.joint_space_widths->medial, ann.joint_space_widths->lateral) < cut;
    const bool pred = r.joint_space_pred &&
                      std::min(r.joint_space_pred->medial, r.joint_space_pred->lateral) < cut;
    return std::make_pair(pred, actual);
  }
  if (pathology == "sclerosis")
    return std::make_pair(any_finding("sclerosis"), !ann.sclerosis_boxes.empty());
  if (pathology == "osteophytes")
    return std::make_pair(any_finding("osteophytes"), !ann.osteophyte_boxes.empty());
  if (pathology == "tibial_spike")
    return std::make_pair(any_finding("tibial_spike"), !ann.tibial_spike_boxes.empty());
  if (pathology == "soft_tissue")
    return std::make_pair(any_finding("soft_tissue"), !ann.soft_tissue_masks.empty());
  if (pathology == "alignment") {
    if (!ann.alignment) return std::nullopt;
    const bool pred = r.alignment_pred && r.alignment_pred->misaligned_prob >= cuts.misaligned_prob;
    return std::make_pair(pred, ann.alignment->misaligned);
  }
  if (pathology == "grading") {
    if (!ann.oa_grade) return std::nullopt;
    const bool pred = r.grade && r.grade->grade >= 1;
    return std::make_pair(pred, *ann.oa_grade >= 1);
  }
  return std::nullopt;
}

}  // namespace detail

struct EvalCounts {
  int total = 0, scored = 0, rejected = 0, unlabeled = 0;
};

struct EvalArtifacts {
  EvalReport report;
  EvalCounts counts;
  std::string eval_json, tables_txt, tables_csv;
};

namespace detail {

inline void write_eval_artifacts(EvalArtifacts& art, const json& eval_payload,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);
  art.eval_json = (fs::path(out_dir) / "eval.json").string();
  art.tables_txt = (fs::path(out_dir) / "tables.txt").string();
  art.tables_csv = (fs::path(out_dir) / "tables.csv").string();
  write_json_file(art.eval_json, eval_payload);
  std::ofstream txt(art.tables_txt, std::ios::binary);
  std::ofstream csv(art.tables_csv, std::ios::binary);
  if (!txt || !csv) throw IoError("cannot open for writing in " + out_dir);
  txt << render_tables(art.report);
  csv << render_csv(art.report);
  txt.flush();
  csv.flush();
  if (!txt || !csv) throw IoError("write failed in " + out_dir);
}

}  // namespace detail

inline EvalArtifacts cmd_evaluate(const PipelineConfig& cfg, const std::string& findings_path,
                                  const std::string& manifest_path, const std::string& out_dir) {
  cfg.cuts.validate();
  const DatasetManifest m = parse_manifest(manifest_path);

  std::ifstream in(findings_path, std::ios::binary);
  if (!in) throw IoError("cannot open findings: " + findings_path + " (run `kxr predict` first)");
  std::map<std::string, FindingReport> reports;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      FindingReport r = report_from_json(json::parse(line));
      reports[r.scan_id] = std::move(r);
    } catch (const json::exception& e) {
      throw IntegrityError("findings: malformed record at line " + std::to_string(lineno) + ": " +
                           e.what());
    }
  }

  std::set<std::string> manifest_ids;
  for (const ManifestEntry& e : m.entries) manifest_ids.insert(e.scan_id);
  std::string unknown;
  for (const auto& [id, r] : reports)
    if (!manifest_ids.count(id)) unknown += (unknown.empty() ? "" : ", ") + id;
  if (!unknown.empty())
    throw IntegrityError("evaluate: findings reference scan ids missing from the manifest: " +
                         unknown);

  EvalArtifacts art;
  std::vector<ScanEval> scans;
  for (const ManifestEntry& e : m.entries) {
    auto it = reports.find(e.scan_id);
    if (it == reports.end()) continue;
    ++art.counts.total;
    if (it->second.gate.rejected_at) {
      ++art.counts.rejected;
      continue;
    }
    if (!e.labeled) {
      ++art.counts.unlabeled;
      continue;
    }
    const AnnotationSet ann = load_annotations(m, e);
    // The narrowing cut scales with the source image, so fetch its height
    // only when the scan actually carries width ground truth.
    double height = 0;
    if (ann.joint_space_widths) height = read_image(m.resolve(e.image_path)).height;

    ScanEval se;
    se.meta = e.meta;
    for (const std::string& id : report_pathologies()) {
      const auto p = detail::presence_for(id, it->second, ann, height, cfg.cuts);
      if (p) se.presence[id] = *p;
    }
    scans.push_back(std::move(se));
    ++art.counts.scored;
  }

  art.report = aggregate(scans);
  const json payload{{"source", "records"},
                     {"counts",
                      {{"total", art.counts.total},
                       {"scored", art.counts.scored},
                       {"rejected", art.counts.rejected},
                       {"unlabeled", art.counts.unlabeled}}},
                     {"report", to_json(art.report)}};
  detail::write_eval_artifacts(art, payload, out_dir);
  write_run_manifest(out_dir, make_run_manifest("evaluate", cfg, {findings_path, manifest_path},
                                                {art.eval_json, art.tables_txt, art.tables_csv}));
  return art;
}

// Evaluation tables straight from a bundled tally fixture, bypassing records.
inline EvalArtifacts cmd_evaluate_fixture(const PipelineConfig& cfg,
                                          const std::string& fixture_path,
                                          const std::string& out_dir) {
  EvalArtifacts art;
  art.report = load_fixture(fixture_path);
  for (const MetricRow& row : art.report.pathologies)
    art.counts.total = std::max(art.counts.total, static_cast<int>(row.cm.total()));
  art.counts.scored = art.counts.total;
  const json payload{{"source", "fixture"}, {"report", to_json(art.report)}};
  detail::write_eval_artifacts(art, payload, out_dir);
  write_run_manifest(out_dir, make_run_manifest("evaluate", cfg, {fixture_path},
                                                {art.eval_json, art.tables_txt, art.tables_csv}));
  return art;
}

// ---- report ----

namespace chart {

// 5x7 bitmap glyphs, one byte per row, low five bits used (bit 4 = leftmost).
inline const uint8_t* glyph(char c) {
  static const std::map<char, std::array<uint8_t, 7>> table{
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F}},
      {'3', {0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
  };
  const char up = (c >= 'a' && c <= 'z') ? static_cast<char>(c - 'a' + 'A') : c;
  auto it = table.find(up);
  return (it == table.end() ? table.at(' ') : it->second).data();
}

inline void fill_rect(Image& im, int y0, int x0, int h, int w, float v) {
  for (int y = std::max(0, y0); y < std::min(im.height, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(im.width, x0 + w); ++x) im.at(y, x) = v;
}

inline void draw_text(Image& im, int y, int x, const std::string& text, float v) {
  for (char c : text) {
    const uint8_t* g = glyph(c);
    for (int gy = 0; gy < 7; ++gy)
      for (int gx = 0; gx < 5; ++gx)
        if (g[gy] & (1 << (4 - gx))) {
          const int py = y + gy, px = x + gx;
          if (py >= 0 && py < im.height && px >= 0 && px < im.width) im.at(py, px) = v;
        }
    x += 6;
  }
}

struct ChartRow {
  std::string label;
  std::array<std::optional<double>, 3> values;  // precision, recall, npv in [0,1]
};

// Horizontal grouped bars, one group per row, percent axis along the top.
inline Image bar_chart(const std::string& title, const std::vector<ChartRow>& rows) {
  size_t label_chars = 0;
  for (const ChartRow& r : rows) label_chars = std::max(label_chars, r.label.size());
  const int label_w = static_cast<int>(label_chars) * 6 + 12;
  const int plot_w = 300;
  const int row_h = 3 * 8 + 10;
  const int top = 42, left = label_w, bottom = 8, right = 36;
  const int H = top + static_cast<int>(rows.size()) * row_h + bottom;
  const int W = left + plot_w + right;

  Image im(H, W);
  for (float& p : im.pixels) p = 1.0f;

  draw_text(im, 6, 8, title, 0.0f);
  const std::array<float, 3> shade{0.10f, 0.42f, 0.68f};
  const std::array<const char*, 3> series{"PRECISION", "RECALL", "NPV"};
  int lx = 8;
  for (int s = 0; s < 3; ++s) {
    fill_rect(im, 18, lx, 7, 7, shade[s]);
    draw_text(im, 18, lx + 10, series[s], 0.2f);
    lx += 10 + static_cast<int>(std::string(series[s]).size()) * 6 + 14;
  }
  for (int tick = 0; tick <= 4; ++tick) {
    const int x = left + tick * plot_w / 4;
    fill_rect(im, top - 4, x, H - top - bottom + 4, 1, 0.85f);
    draw_text(im, top - 13, x - 6, std::to_string(25 * tick), 0.4f);
  }
  fill_rect(im, top - 4, left, H - top - bottom + 4, 1, 0.0f);

  for (size_t i = 0; i < rows.size(); ++i) {
    const int y0 = top + static_cast<int>(i) * row_h;
    draw_text(im, y0 + row_h / 2 - 4, 6, rows[i].label, 0.0f);
    for (int s = 0; s < 3; ++s) {
      if (!rows[i].values[s]) continue;
      const double v = std::clamp(*rows[i].values[s], 0.0, 1.0);
      const int bar = static_cast<int>(std::lround(v * plot_w));
      fill_rect(im, y0 + s * 8, left + 1, 6, bar, shade[s]);
    }
  }
  return im;
}

inline std::vector<ChartRow> chart_rows(const std::vector<MetricRow>& rows) {
  std::vector<ChartRow> out;
  for (const MetricRow& r : rows) {
    ChartRow c;
    c.label = r.id;
    for (char& ch : c.label)
      if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
    const std::array<MetricValue, 3> vals{precision(r.cm), recall(r.cm), npv(r.cm)};
    for (int s = 0; s < 3; ++s)
      if (vals[s].present()) c.values[s] = vals[s].get();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace chart

struct ReportResult {
  std::string summary_path;
  std::vector<std::string> plot_paths;
};

inline ReportResult cmd_report(const PipelineConfig& cfg, const std::string& eval_dir,
                               const std::string& out_dir) {
  namespace fs = std::filesystem;
  const std::string eval_path = (fs::path(eval_dir) / "eval.json").string();
  if (!fs::exists(eval_path))
    throw UsageError("report: no evaluation artifacts at " + eval_dir +
                     " (run `kxr evaluate` first)");
  const json payload = read_json_file(eval_path);
  if (!payload.contains("report"))
    throw IntegrityError("report: eval.json has no report section: " + eval_path);
  const EvalReport rep = eval_report_from_json(payload["report"]);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  ReportResult res;
  const std::string chart_path = (fs::path(out_dir) / "pathology_metrics.png").string();
  write_png16(chart_path, chart::bar_chart("PER-PATHOLOGY METRICS", chart::chart_rows(rep.pathologies)));
  res.plot_paths.push_back(chart_path);
  for (const auto& [axis, rows] : rep.subgroups) {
    const std::string path = (fs::path(out_dir) / ("subgroup_" + axis + ".png")).string();
    std::string title = "BY " + axis;
    for (char& ch : title)
      if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
    write_png16(path, chart::bar_chart(title, chart::chart_rows(rows)));
    res.plot_paths.push_back(path);
  }

  res.summary_path = (fs::path(out_dir) / "summary.txt").string();
  std::ofstream out(res.summary_path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + res.summary_path);
  out << "Evaluation summary\n==================\n\n";
  out << render_tables(rep);
  if (payload.contains("counts")) {
    const json& c = payload["counts"];
    out << "\nScans: " << c.value("total", 0) << " total, " << c.value("scored", 0)
        << " scored, " << c.value("rejected", 0) << " gate-rejected, "
        << c.value("unlabeled", 0) << " unlabeled\n";
  }
  out << "\nArtifacts\n---------\n";
  out << "  " << (fs::path(eval_dir) / "tables.txt").string() << "\n";
  out << "  " << (fs::path(eval_dir) / "tables.csv").string() << "\n";
  for (const std::string& p : res.plot_paths) out << "  " << p << "\n";
  out.flush();
  if (!out) throw IoError("write failed: " + res.summary_path);

  std::vector<std::string> outputs = res.plot_paths;
  outputs.push_back(res.summary_path);
  write_run_manifest(out_dir, make_run_manifest("report", cfg, {eval_path}, outputs));
  return res;
}

}  // namespace kxr
