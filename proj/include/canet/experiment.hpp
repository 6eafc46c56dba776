#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "canet/data.hpp"
#include "canet/run_config.hpp"
#include "canet/training.hpp"

namespace canet {

struct TrainEvalSplit {
  std::vector<GradingSample> train;
  std::vector<GradingSample> eval;
};

// Loads (or synthesizes) the dataset and resizes images to train.resize_to.
std::vector<GradingSample> load_dataset(const RunConfig& cfg);
std::vector<GradingSample> load_eval_dataset(const RunConfig& cfg);  // data.eval_manifest

// Fold 0 of a stratified data.holdout_folds split, or data.eval_manifest when set.
TrainEvalSplit holdout_split(const RunConfig& cfg, std::vector<GradingSample> samples);

// Throws ConfigError when a label does not fit the model's class counts.
void check_labels(std::span<const GradingSample> samples, const CanetConfig& model);

struct RunOutcome {
  TrainResult train;
  Evaluation eval;  // best checkpoint on the eval split
  NormStats norm;
  CanetParams<float> params;  // best checkpoint
};

// Normalizes with training-split statistics, trains, and evaluates the best
// checkpoint. With out_dir, writes history.csv, best/ and metrics.json there.
RunOutcome run_training(const RunConfig& cfg, std::vector<GradingSample> train, std::vector<GradingSample> eval,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Run-config echo stored with checkpoints: the config plus normalization stats.
nlohmann::ordered_json checkpoint_config(const RunConfig& cfg, const NormStats& norm);
// Inverse of checkpoint_config.
std::pair<RunConfig, NormStats> parse_checkpoint_config(const std::string& config_json);

// A checkpoint with the configuration and normalization it was trained with.
struct LoadedRun {
  RunConfig cfg;
  NormStats norm;
  CanetParams<float> params;
};
LoadedRun load_run(const std::filesystem::path& checkpoint_dir);

// Normalizes raw samples (already at train.resize_to) and scores them.
Evaluation evaluate_run(LoadedRun& run, std::vector<GradingSample> samples);

struct ImageScores {
  std::vector<double> probs_a;  // empty when the model has no disease-a head
  std::vector<double> probs_b;
  int grade_a = -1;
  int grade_b = -1;
};
// Decodes a P5/P6 file and runs the evaluation view through the model.
ImageScores predict_image(LoadedRun& run, const std::filesystem::path& image);

// Mean of every numeric field across per-fold reports.
nlohmann::ordered_json mean_report(std::span<const MetricsReport> reports);

// Joint accuracy of pairing disease-a predictions from one model with
// disease-b predictions from another, as for two individually trained models.
double implied_joint_accuracy(std::span<const Prediction> preds_a, std::span<const Prediction> preds_b,
                              std::span<const GradePair> labels);

}  // namespace canet
