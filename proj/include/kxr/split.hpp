// Stratified train/trial splitting over demographic metadata.
#pragma once

#include <algorithm>
#include <map>

#include "kxr/manifest.hpp"

namespace kxr {

struct SplitSpec {
  double trial_fraction = 0.0382;  // ~3.8% held out by default
  std::vector<std::string> strata{"age_group", "gender", "manufacturer"};
  uint64_t seed = 0;
};

inline json to_json(const SplitSpec& s) {
  return {{"trial_fraction", s.trial_fraction}, {"strata", s.strata}, {"seed", s.seed}};
}
inline SplitSpec split_spec_from_json(const json& j) {
  SplitSpec s;
  if (j.contains("trial_fraction")) s.trial_fraction = j["trial_fraction"].get<double>();
  if (j.contains("strata")) s.strata = j["strata"].get<std::vector<std::string>>();
  if (j.contains("seed")) s.seed = j["seed"].get<uint64_t>();
  return s;
}

inline std::string stratum_key(const ScanMeta& meta, const std::vector<std::string>& strata) {
  std::string key;
  // fixed field order keeps the key independent of how strata were listed
  if (std::find(strata.begin(), strata.end(), "age_group") != strata.end())
    key += meta.age_group + "|";
  if (std::find(strata.begin(), strata.end(), "gender") != strata.end()) key += meta.gender + "|";
  if (std::find(strata.begin(), strata.end(), "manufacturer") != strata.end())
    key += meta.manufacturer + "|";
  return key;
}

// Deterministic joint-stratified split. Within every stratum the trial side
// receives round(trial_fraction * stratum_size) entries, chosen by a
// per-stratum shuffle keyed on (seed, stratum). Entry order is preserved.
inline std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& m,
                                                                    const SplitSpec& spec) {
  if (spec.strata.empty()) throw UsageError("split: strata must be non-empty");
  if (spec.trial_fraction < 0.0 || spec.trial_fraction >= 1.0)
    throw UsageError("split: trial_fraction must be in [0,1)");
  for (const auto& s : spec.strata)
    if (s != "age_group" && s != "gender" && s != "manufacturer")
      throw UsageError("split: unknown stratum field \"" + s + "\"");

  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < m.entries.size(); ++i)
    groups[stratum_key(m.entries[i].meta, spec.strata)].push_back(i);

  std::vector<bool> is_trial(m.entries.size(), false);
  for (auto& [key, indices] : groups) {
    const size_t want = static_cast<size_t>(
        std::llround(spec.trial_fraction * static_cast<double>(indices.size())));
    Rng rng(spec.seed ^ fnv1a64(key));
    rng.shuffle(indices);
    for (size_t k = 0; k < want && k < indices.size(); ++k) is_trial[indices[k]] = true;
  }

  DatasetManifest train, trial;
  train.base_dir = trial.base_dir = m.base_dir;
  train.header = trial.header = m.header;
  for (size_t i = 0; i < m.entries.size(); ++i)
    (is_trial[i] ? trial : train).entries.push_back(m.entries[i]);
  return {std::move(train), std::move(trial)};
}

}  // namespace kxr
