#include "canet/experiment.hpp"

#include <fstream>

#include "canet/errors.hpp"
#include "canet/image.hpp"
#include "canet/ops.hpp"

namespace canet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ManifestOptions manifest_options(const RunConfig& cfg) {
  ManifestOptions opt;
  opt.num_classes_a = cfg.model.num_classes_a;
  opt.num_classes_b = cfg.model.num_classes_b;
  opt.grade_a_map = cfg.data.grade_a_map;
  opt.resize_to = cfg.train.resize_to;
  return opt;
}

void resize_all(std::vector<GradingSample>& samples, std::size_t side) {
  if (side == 0) return;
  for (GradingSample& s : samples) {
    if (s.image.dim(1) != side || s.image.dim(2) != side) s.image = resize_bilinear(s.image, side, side);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text << '\n';
}

// Averages numeric leaves; a leaf that is null in any report stays null.
ordered_json mean_of(const std::vector<ordered_json>& docs) {
  const ordered_json& first = docs.front();
  if (first.is_object()) {
    ordered_json out = ordered_json::object();
    for (const auto& [key, value] : first.items()) {
      std::vector<ordered_json> column;
      for (const ordered_json& d : docs) column.push_back(d.contains(key) ? d.at(key) : ordered_json(nullptr));
      if (value.is_array()) continue;
      out[key] = mean_of(column);
    }
    return out;
  }
  double total = 0;
  for (const ordered_json& d : docs) {
    if (!d.is_number()) return nullptr;
    total += d.get<double>();
  }
  return total / static_cast<double>(docs.size());
}

}  // namespace

std::vector<GradingSample> load_dataset(const RunConfig& cfg) {
  std::vector<GradingSample> samples;
  if (cfg.data.source == "synth") {
    samples = synth_generate(cfg.synth, cfg.data.synth_n);
    resize_all(samples, cfg.train.resize_to);
  } else {
    samples = load_manifest(cfg.data.manifest, manifest_options(cfg));
  }
  if (samples.empty()) throw DataError("dataset is empty");
  return samples;
}

std::vector<GradingSample> load_eval_dataset(const RunConfig& cfg) {
  if (cfg.data.eval_manifest.empty()) return {};
  return load_manifest(cfg.data.eval_manifest, manifest_options(cfg));
}

TrainEvalSplit holdout_split(const RunConfig& cfg, std::vector<GradingSample> samples) {
  TrainEvalSplit split;
  if (!cfg.data.eval_manifest.empty()) {
    split.train = std::move(samples);
    split.eval = load_eval_dataset(cfg);
    return split;
  }
  const std::vector<GradePair> labels = labels_of(samples);
  const std::vector<Fold> folds = kfold_split(labels, cfg.data.holdout_folds, cfg.data.split_seed);
  for (std::size_t i : folds.front().train) split.train.push_back(samples[i]);
  for (std::size_t i : folds.front().test) split.eval.push_back(samples[i]);
  return split;
}

void check_labels(std::span<const GradingSample> samples, const CanetConfig& model) {
  for (const GradingSample& s : samples) {
    if (s.grade_a < 0 || static_cast<std::size_t>(s.grade_a) >= model.num_classes_a || s.grade_b < 0 ||
        static_cast<std::size_t>(s.grade_b) >= model.num_classes_b) {
      throw ConfigError("sample '" + s.id + "' has grades (" + std::to_string(s.grade_a) + ", " +
                        std::to_string(s.grade_b) + ") outside the model's " +
                        std::to_string(model.num_classes_a) + "x" + std::to_string(model.num_classes_b) +
                        " classes");
    }
  }
}

ordered_json checkpoint_config(const RunConfig& cfg, const NormStats& norm) {
  ordered_json j;
  j["run"] = cfg.to_json();
  j["norm"] = {{"mean", norm.mean}, {"std", norm.std}};
  return j;
}

std::pair<RunConfig, NormStats> parse_checkpoint_config(const std::string& config_json) {
  const json j = json::parse(config_json, nullptr, false);
  if (j.is_discarded() || !j.contains("run") || !j.contains("norm")) {
    throw ConfigError("checkpoint manifest does not carry a run configuration");
  }
  NormStats norm;
  try {
    norm.mean = j["norm"]["mean"].get<std::array<double, 3>>();
    norm.std = j["norm"]["std"].get<std::array<double, 3>>();
  } catch (const json::exception&) {
    throw ConfigError("checkpoint normalization statistics are malformed");
  }
  return {RunConfig::from_json(j["run"]), norm};
}

RunOutcome run_training(const RunConfig& cfg, std::vector<GradingSample> train_set,
                        std::vector<GradingSample> eval_set, const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  check_labels(train_set, cfg.model);
  check_labels(eval_set, cfg.model);

  RunOutcome outcome;
  outcome.norm = cfg.data.norm_cache.empty() ? compute_norm_stats(train_set)
                                             : cached_norm_stats(cfg.data.norm_cache, train_set);
  for (GradingSample& s : train_set) normalize(s.image, outcome.norm);
  for (GradingSample& s : eval_set) normalize(s.image, outcome.norm);

  RngState init = RngState(cfg.train.seed).split(4);
  CanetParams<float> params = CanetParams<float>::init(cfg.model, init);
  TrainOptions opt;
  opt.out_dir = out_dir;
  opt.config_json = checkpoint_config(cfg, outcome.norm).dump();
  outcome.train = train(params, cfg.model, cfg.train, train_set, eval_set, opt);

  outcome.params = outcome.train.best_params;
  const std::vector<GradingSample>& scored = eval_set.empty() ? train_set : eval_set;
  std::vector<GradingSample> views = scored;
  resize_all(views, cfg.train.resize_to);
  outcome.eval = evaluate(outcome.params, cfg.model, views, cfg.train.crop_to);
  if (out_dir) write_text(*out_dir / "metrics.json", outcome.eval.report.to_json());
  return outcome;
}

LoadedRun load_run(const std::filesystem::path& checkpoint_dir) {
  const CheckpointMeta meta = read_checkpoint_meta(checkpoint_dir);
  auto [cfg, norm] = parse_checkpoint_config(meta.config_json);
  RngState unused(0);
  LoadedRun run{cfg, norm, CanetParams<float>::init(cfg.model, unused)};
  load_checkpoint(checkpoint_dir, run.params);
  return run;
}

Evaluation evaluate_run(LoadedRun& run, std::vector<GradingSample> samples) {
  check_labels(samples, run.cfg.model);
  for (GradingSample& s : samples) normalize(s.image, run.norm);
  return evaluate(run.params, run.cfg.model, samples, run.cfg.train.crop_to);
}

ImageScores predict_image(LoadedRun& run, const std::filesystem::path& image) {
  Tensor<float> img = image_to_tensor(read_pnm(image));
  const std::size_t side = run.cfg.train.resize_to;
  if (side != 0 && (img.dim(1) != side || img.dim(2) != side)) img = resize_bilinear(img, side, side);
  normalize(img, run.norm);
  img = eval_view(img, run.cfg.train.crop_to);
  GradTape<float> tape;
  RngState unused(0);
  const CanetOutput<float> out = canet_forward(
      tape.constant(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})), run.params, run.cfg.model, unused);
  ImageScores scores;
  auto fill = [](const std::optional<Var<float>>& logits, std::vector<double>& probs, int& grade) {
    if (!logits) return;
    const Tensor<double> p = softmax_rows(logits->value().cast<double>());
    probs.assign(p.data().begin(), p.data().end());
    grade = static_cast<int>(argmax_row(std::span<const double>(probs)));
  };
  fill(out.logits_a_refined, scores.probs_a, scores.grade_a);
  fill(out.logits_b_refined, scores.probs_b, scores.grade_b);
  return scores;
}

ordered_json mean_report(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw UndefinedMetricError("mean_report: no reports");
  std::vector<ordered_json> docs;
  for (const MetricsReport& r : reports) docs.push_back(ordered_json::parse(r.to_json(-1)));
  ordered_json out = mean_of(docs);
  out["folds"] = reports.size();
  return out;
}

double implied_joint_accuracy(std::span<const Prediction> preds_a, std::span<const Prediction> preds_b,
                              std::span<const GradePair> labels) {
  if (preds_a.size() != labels.size() || preds_b.size() != labels.size()) {
    throw UsageError("implied_joint_accuracy: prediction and label counts differ");
  }
  std::vector<GradePair> combined(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) combined[i] = GradePair{preds_a[i].a, preds_b[i].b};
  return joint_accuracy(combined, labels);
}

}  // namespace canet
