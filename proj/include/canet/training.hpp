#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "canet/data.hpp"
#include "canet/metrics.hpp"
#include "canet/model.hpp"

namespace canet {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One bias-corrected Adam update at learning rate lr, reading each tensor's
// grad buffer. Throws UsageError if a parameter has no gradient.
void adam_step(std::span<const ParamRef<float>> params, AdamState& state, double lr);
void adam_step(std::span<const ParamRef<double>> params, AdamState& state, double lr);

// lr_base·(1 + cos(π·step/total))/2. With restart_period > 0 the phase restarts
// every restart_period steps; steps past total clamp to the floor of 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_base, std::size_t restart_period = 0);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  std::size_t resize_to = 72;
  std::size_t crop_to = 64;
  double scale_min = 0.8;  // smallest random-crop area fraction
  bool augment = true;
  std::size_t restart_period = 0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;  // throws ConfigError
};

struct AugmentDraw {
  double area = 1.0;  // area scale factor; sides scale by sqrt(area)
  std::size_t y0 = 0, x0 = 0;
  bool flip_h = false;
  bool flip_v = false;
};

// Side lengths after scaling an h×w image by an area factor.
std::pair<std::size_t, std::size_t> scaled_size(std::size_t height, std::size_t width, double area);

AugmentDraw draw_augment(std::size_t height, std::size_t width, std::size_t crop_to, double scale_min,
                         RngState& rng);
Tensor<float> apply_augment(const Tensor<float>& img, const AugmentDraw& d, std::size_t crop_to);
// Bilinear rescale by a random area factor in [scale_min, 1], random
// crop_to×crop_to window, then independent horizontal and vertical flips.
// Throws ParameterError when the scaled image can be smaller than the crop.
Tensor<float> augment(const Tensor<float>& img, RngState& rng, std::size_t crop_to, double scale_min);
// Deterministic evaluation path: centre crop, no flips.
Tensor<float> eval_view(const Tensor<float>& img, std::size_t crop_to);

struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> eval_joint_ac;
  std::optional<double> eval_ac_a;
  std::optional<double> eval_ac_b;
};

std::string history_csv_header();
std::string history_csv_line(const HistoryRow& row);

struct Evaluation {
  MetricsReport report;
  std::vector<Prediction> predictions;
  std::vector<double> probs_a;  // row-major [n × Ka], empty when the head is absent
  std::vector<double> probs_b;
};

Evaluation evaluate(CanetParams<float>& params, const CanetConfig& cfg, std::span<const GradingSample> samples,
                    std::size_t crop_to, std::size_t batch_size = 32);

// Scalar used to pick the best checkpoint: joint accuracy, or the single
// disease's accuracy for individual variants.
double selection_score(const MetricsReport& report);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // history.csv + best/ checkpoint
  std::string config_json = "{}";                // echoed into checkpoints
  std::function<void(const HistoryRow&)> on_epoch;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::optional<double> best_score;
  std::size_t best_epoch = 0;
  CanetParams<float> best_params;
  std::size_t steps = 0;
};

// Trains params in place. eval may be empty, in which case the training set
// is evaluated (centre crop) at each evaluation point.
TrainResult train(CanetParams<float>& params, const CanetConfig& cfg, const TrainConfig& tc,
                  std::span<const GradingSample> train_set, std::span<const GradingSample> eval_set,
                  const TrainOptions& opt = {});

}  // namespace canet
