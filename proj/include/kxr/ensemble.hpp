// Grade ensemble: multiple classifier capacities fused by weighted
// probability averaging; ties break toward the milder grade.
#pragma once

#include "kxr/detector.hpp"

namespace kxr {

inline TrainingConfig grading_config(int capacity_tier = 0) {
  TrainingConfig c;
  c.pathology = "grading";
  c.task = "classification";
  c.input_h = c.input_w = 512;
  c.num_classes = 4;
  c.loss_terms = {"cross_entropy"};
  c.optimizer.kind = "adamw";
  c.schedule = {"step", 0.001, 0.1, 10};
  c.batch_size = 32;
  c.augment.rotations = true;
  c.augment.flips = true;
  c.augment.brightness = true;
  switch (capacity_tier) {
    case 0: c.base_channels = 8; break;
    case 1: c.base_channels = 12; break;
    case 2: c.base_channels = 16; break;
    default: throw UsageError("grading: capacity tier must be 0, 1, or 2");
  }
  c.validate();
  return c;
}

struct EnsembleSpec {
  std::vector<TrainingConfig> members;
  std::vector<double> weights;

  void validate() const {
    if (members.empty()) throw UsageError("ensemble: no members");
    if (weights.size() != members.size())
      throw UsageError("ensemble: weight count differs from member count");
    double sum = 0;
    for (double w : weights) {
      if (w < 0) throw UsageError("ensemble: negative weight");
      sum += w;
    }
    if (!(sum > 0)) throw UsageError("ensemble: weights sum to zero");
    for (const auto& m : members) {
      m.validate();
      if (m.task != "classification" || m.num_classes != 4)
        throw UsageError("ensemble: members must be 4-class grade classifiers");
    }
  }
};

inline EnsembleSpec default_ensemble_spec() {
  EnsembleSpec s;
  for (int tier = 0; tier < 3; ++tier) s.members.push_back(grading_config(tier));
  s.weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  return s;
}

inline json to_json(const EnsembleSpec& s) {
  json members = json::array();
  for (const auto& m : s.members) members.push_back(to_json(m));
  return {{"members", members}, {"weights", s.weights}};
}

inline EnsembleSpec ensemble_spec_from_json(const json& j) {
  EnsembleSpec s;
  for (const auto& m : j.at("members")) s.members.push_back(training_config_from_json(m));
  s.weights = j.at("weights").get<std::vector<double>>();
  return s;
}

// Weighted mean of member probability rows; weights are renormalized so only
// their proportions matter.
inline std::array<double, 4> fuse(const std::vector<std::array<double, 4>>& member_probs,
                                  const std::vector<double>& weights) {
  if (member_probs.empty()) throw UsageError("fuse: no member outputs");
  if (weights.size() != member_probs.size())
    throw UsageError("fuse: weight count differs from member count");
  double sum = 0;
  for (double w : weights) {
    if (w < 0) throw UsageError("fuse: negative weight");
    sum += w;
  }
  if (!(sum > 0)) throw UsageError("fuse: weights sum to zero");
  std::array<double, 4> out{};
  for (size_t i = 0; i < member_probs.size(); ++i)
    for (int j = 0; j < 4; ++j) out[j] += weights[i] / sum * member_probs[i][j];
  return out;
}

// First index attaining the maximum: ties resolve to the milder grade.
inline GradeOutput grade_from_probs(const std::array<double, 4>& probs) {
  GradeOutput g;
  g.probs = probs;
  g.grade = 0;
  for (int i = 1; i < 4; ++i)
    if (probs[i] > probs[g.grade]) g.grade = i;
  return g;
}

struct TrainedEnsemble {
  std::vector<TaskModel> members;
  std::vector<double> weights;
};

inline TrainedEnsemble train_ensemble(const EnsembleSpec& spec, const DatasetManifest& train,
                                      const DatasetManifest& val, int epochs, uint64_t seed,
                                      const PreprocessSpec* photometric = nullptr,
                                      std::vector<TrainHistory>* histories = nullptr) {
  spec.validate();
  TrainedEnsemble out;
  out.weights = spec.weights;
  for (size_t i = 0; i < spec.members.size(); ++i) {
    Trained t = train_detector(spec.members[i], train, val, epochs, mix_seed(seed ^ (i + 1)),
                               photometric);
    if (histories != nullptr) histories->push_back(t.history);
    out.members.push_back(std::move(t.model));
  }
  return out;
}

inline GradeOutput predict_ensemble(TrainedEnsemble& ens, const Image& img) {
  if (ens.members.empty()) throw UsageError("ensemble: no members");
  std::vector<std::array<double, 4>> probs;
  for (TaskModel& m : ens.members) probs.push_back(predict(m, img).grade->probs);
  return grade_from_probs(fuse(probs, ens.weights));
}

}  // namespace kxr
