#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "canet/data.hpp"
#include "canet/model.hpp"
#include "canet/training.hpp"
#include "json.hpp"

namespace canet {

struct DataConfig {
  std::string source = "synth";  // "synth" or "manifest"
  std::string manifest;          // training manifest (source = manifest)
  std::string eval_manifest;     // optional held-out manifest
  std::vector<int> grade_a_map;  // raw grade -> class for disease a
  std::string norm_cache;        // optional normalization cache JSON
  std::size_t synth_n = 2000;
  std::size_t kfold = 0;          // > 1 trains one model per fold
  std::size_t holdout_folds = 5;  // without kfold or eval_manifest: fold 0 of this split is held out
  std::uint64_t split_seed = 0;
};

// Everything one invocation needs. JSON sections: model, ablation, train,
// data, synth. Unknown keys are rejected.
struct RunConfig {
  CanetConfig model;
  TrainConfig train;
  SynthSpec synth;
  DataConfig data;
  std::string synth_preset = "binary";

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  void validate() const;  // throws ConfigError / UsageError
};

nlohmann::json read_json_file(const std::filesystem::path& path);

// Every accepted dotted key, e.g. "model.lambda", "train.seed".
std::vector<std::string> config_keys();

// Resolves a dotted key, or a bare key that names exactly one setting
// ("lambda" -> "model.lambda"). Throws UsageError when unknown or ambiguous.
std::string resolve_config_key(const std::string& key);

// `value` is parsed as JSON when possible and taken as a string otherwise.
nlohmann::json parse_override_value(const std::string& text);

void set_config_value(nlohmann::json& cfg, const std::string& dotted_key, const nlohmann::json& value);

}  // namespace canet
