#include "canet/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>

#include "canet/errors.hpp"

namespace canet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Field {
  std::function<void(RunConfig&, const json&)> read;
  std::function<ordered_json(const RunConfig&)> write;
};

template <typename V>
V as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("");
    }
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    }
    if constexpr (std::is_same_v<V, double>) {
      if (!v.is_number()) throw ConfigError("");
    }
    if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<V>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has an invalid value " + v.dump());
  }
}

// Binds a dotted key to a member reached through `get`.
template <typename V, typename Get>
Field bind(const std::string& key, Get get) {
  return Field{[key, get](RunConfig& c, const json& v) { get(c) = as<V>(v, key); },
               [get](const RunConfig& c) { return ordered_json(get(const_cast<RunConfig&>(c))); }};
}

using CountRanges = std::vector<std::array<int, 2>>;
using Triple = std::array<double, 3>;
using TripleRows = std::vector<Triple>;

#define CANET_FIELD(type, key, member) \
  {key, bind<type>(key, [](RunConfig& c) -> type& { return c.member; })}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      CANET_FIELD(std::size_t, "model.num_classes_a", model.num_classes_a),
      CANET_FIELD(std::size_t, "model.num_classes_b", model.num_classes_b),
      CANET_FIELD(double, "model.lambda", model.lambda),
      CANET_FIELD(std::size_t, "model.proj_dim", model.proj_dim),
      CANET_FIELD(double, "model.dropout", model.dropout),
      CANET_FIELD(double, "model.proj_dropout", model.proj_dropout),
      CANET_FIELD(std::size_t, "model.reduction", model.reduction),
      CANET_FIELD(std::size_t, "model.spatial_kernel", model.spatial_kernel),
      CANET_FIELD(bool, "model.mlp_bias", model.mlp_bias),
      CANET_FIELD(std::vector<std::size_t>, "model.backbone_widths", model.backbone.widths),
      CANET_FIELD(std::vector<std::size_t>, "model.backbone_strides", model.backbone.strides),
      CANET_FIELD(std::size_t, "model.in_channels", model.backbone.in_channels),
      CANET_FIELD(std::size_t, "model.kernel", model.backbone.kernel),
      CANET_FIELD(bool, "ablation.individual_a", model.ablation.individual_a),
      CANET_FIELD(bool, "ablation.individual_b", model.ablation.individual_b),
      CANET_FIELD(bool, "ablation.joint_baseline", model.ablation.joint_baseline),
      CANET_FIELD(bool, "ablation.d_specific", model.ablation.d_specific),
      CANET_FIELD(bool, "ablation.dep_a_to_b", model.ablation.dep_a_to_b),
      CANET_FIELD(bool, "ablation.dep_b_to_a", model.ablation.dep_b_to_a),
      CANET_FIELD(std::size_t, "train.epochs", train.epochs),
      CANET_FIELD(std::size_t, "train.batch_size", train.batch_size),
      CANET_FIELD(double, "train.lr", train.lr),
      CANET_FIELD(std::size_t, "train.resize_to", train.resize_to),
      CANET_FIELD(std::size_t, "train.crop_to", train.crop_to),
      CANET_FIELD(double, "train.scale_min", train.scale_min),
      CANET_FIELD(bool, "train.augment", train.augment),
      CANET_FIELD(std::size_t, "train.restart_period", train.restart_period),
      CANET_FIELD(std::uint64_t, "train.seed", train.seed),
      CANET_FIELD(std::size_t, "train.eval_every", train.eval_every),
      CANET_FIELD(double, "train.adam_beta1", train.adam_beta1),
      CANET_FIELD(double, "train.adam_beta2", train.adam_beta2),
      CANET_FIELD(double, "train.adam_eps", train.adam_eps),
      CANET_FIELD(std::string, "data.source", data.source),
      CANET_FIELD(std::string, "data.manifest", data.manifest),
      CANET_FIELD(std::string, "data.eval_manifest", data.eval_manifest),
      CANET_FIELD(std::vector<int>, "data.grade_a_map", data.grade_a_map),
      CANET_FIELD(std::string, "data.norm_cache", data.norm_cache),
      CANET_FIELD(std::size_t, "data.synth_n", data.synth_n),
      CANET_FIELD(std::size_t, "data.kfold", data.kfold),
      CANET_FIELD(std::size_t, "data.holdout_folds", data.holdout_folds),
      CANET_FIELD(std::uint64_t, "data.split_seed", data.split_seed),
      CANET_FIELD(std::string, "synth.preset", synth_preset),
      CANET_FIELD(std::size_t, "synth.image_size", synth.image_size),
      CANET_FIELD(std::vector<double>, "synth.grade_a_probs", synth.grade_a_probs),
      CANET_FIELD(CountRanges, "synth.count_ranges", synth.count_ranges),
      CANET_FIELD(Triple, "synth.base_b", synth.base_b),
      CANET_FIELD(double, "synth.near_px", synth.near_px),
      CANET_FIELD(double, "synth.far_px", synth.far_px),
      CANET_FIELD(double, "synth.rho", synth.rho),
      CANET_FIELD(TripleRows, "synth.b_given_a", synth.b_given_a),
      CANET_FIELD(double, "synth.marker_radius", synth.marker_radius),
      CANET_FIELD(double, "synth.lesion_radius", synth.lesion_radius),
      CANET_FIELD(double, "synth.marker_jitter", synth.marker_jitter),
      CANET_FIELD(double, "synth.noise", synth.noise),
      CANET_FIELD(std::uint64_t, "synth.seed", synth.seed),
  };
  return table;
}

#undef CANET_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return &f;
  return nullptr;
}

SynthSpec preset(const std::string& name) {
  if (name == "binary") return SynthSpec::binary_preset();
  if (name == "messidor") return SynthSpec::messidor_preset();
  throw ConfigError("synth.preset must be \"binary\" or \"messidor\", got \"" + name + "\"");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

std::string resolve_config_key(const std::string& key) {
  if (find_field(key)) return key;
  std::vector<std::string> matches;
  if (key.find('.') == std::string::npos) {
    for (const auto& [k, f] : fields())
      if (k.substr(k.find('.') + 1) == key) matches.push_back(k);
  }
  if (matches.size() == 1) return matches.front();
  if (matches.empty()) throw UsageError("unknown config key '" + key + "'");
  std::string list;
  for (const std::string& m : matches) list += (list.empty() ? "" : ", ") + m;
  throw UsageError("config key '" + key + "' is ambiguous: " + list);
}

json parse_override_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return json(text);
  return v;
}

void set_config_value(json& cfg, const std::string& dotted_key, const json& value) {
  const std::string key = resolve_config_key(dotted_key);
  const std::size_t dot = key.find('.');
  const std::string section = key.substr(0, dot), name = key.substr(dot + 1);
  if (!cfg.is_object()) cfg = json::object();
  if (cfg.contains(section) && !cfg[section].is_object()) {
    throw ConfigError("config section '" + section + "' must be an object");
  }
  cfg[section][name] = value;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> sections{"model", "ablation", "train", "data", "synth"};
  for (const auto& [section, body] : j.items()) {
    if (std::find(sections.begin(), sections.end(), section) == sections.end()) {
      throw ConfigError("unknown config section '" + section + "'");
    }
    if (!body.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [name, value] : body.items()) {
      if (!find_field(section + "." + name)) throw ConfigError("unknown config key '" + section + "." + name + "'");
    }
  }
  auto has = [&](const char* section, const char* name) {
    return j.contains(section) && j.at(section).contains(name);
  };

  RunConfig c;
  if (has("synth", "preset")) c.synth_preset = as<std::string>(j["synth"]["preset"], "synth.preset");
  c.synth = preset(c.synth_preset);
  for (const auto& [section, body] : j.items()) {
    for (const auto& [name, value] : body.items()) find_field(section + "." + name)->read(c, value);
  }

  // Selecting a baseline row switches the attention flags off unless they
  // were given explicitly.
  AblationFlags& a = c.model.ablation;
  if (a.individual_a || a.individual_b || a.joint_baseline) {
    if (!has("ablation", "d_specific")) a.d_specific = false;
    if (!has("ablation", "dep_a_to_b")) a.dep_a_to_b = false;
    if (!has("ablation", "dep_b_to_a")) a.dep_b_to_a = false;
  } else if (!a.d_specific) {
    if (!has("ablation", "dep_a_to_b")) a.dep_a_to_b = false;
    if (!has("ablation", "dep_b_to_a")) a.dep_b_to_a = false;
  }
  if (c.data.source == "synth" && !has("model", "num_classes_a")) c.model.num_classes_a = c.synth.num_classes_a();
  return c;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  for (const auto& [k, f] : fields()) {
    const std::size_t dot = k.find('.');
    j[k.substr(0, dot)][k.substr(dot + 1)] = f.write(*this);
  }
  return j;
}

void RunConfig::validate() const {
  model.ablation.validate();
  model.validate();
  train.validate();
  if (data.source != "synth" && data.source != "manifest") {
    throw ConfigError("data.source must be \"synth\" or \"manifest\", got \"" + data.source + "\"");
  }
  if (data.source == "manifest" && data.manifest.empty()) throw ConfigError("data.manifest is required");
  if (data.source == "synth") {
    synth.validate();
    if (synth.num_classes_a() != model.num_classes_a) {
      throw ConfigError("model.num_classes_a (" + std::to_string(model.num_classes_a) +
                        ") does not match the synthetic generator's " + std::to_string(synth.num_classes_a()) +
                        " grades");
    }
    if (model.num_classes_b != SynthSpec::num_classes_b()) {
      throw ConfigError("model.num_classes_b must be 3 for synthetic data");
    }
  }
  if (model.backbone.in_channels != 3) throw ConfigError("model.in_channels must be 3 for RGB images");
  if (data.kfold == 1) throw ConfigError("data.kfold must be 0 (off) or >= 2");
  if (data.holdout_folds < 2) throw ConfigError("data.holdout_folds must be >= 2");
  if (train.crop_to < model.backbone.min_input()) {
    throw ConfigError("train.crop_to (" + std::to_string(train.crop_to) + ") is below the backbone minimum " +
                      std::to_string(model.backbone.min_input()));
  }
}

}  // namespace canet
