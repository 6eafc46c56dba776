#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canet/attention.hpp"
#include "canet/autodiff.hpp"
#include "canet/metrics.hpp"
#include "canet/rng.hpp"

namespace canet {

// Strided 3×3 conv + bias + ReLU stages standing in for a deep pretrained trunk.
struct BackboneConfig {
  std::vector<std::size_t> widths{32, 64, 96, 128};
  std::vector<std::size_t> strides{2, 2, 2, 2};
  std::size_t in_channels = 3;
  std::size_t kernel = 3;

  void validate() const;
  std::size_t out_channels() const { return widths.empty() ? in_channels : widths.back(); }
  std::size_t total_stride() const;
  // Smallest input side that still leaves a 2×2 feature map.
  std::size_t min_input() const { return 2 * total_stride(); }
  // Feature-map side produced for an input side (ceil division at every stage).
  std::size_t output_side(std::size_t input) const;
};

enum class Variant { canet, individual_a, individual_b, joint_baseline };

// One row of the ablation grid. d_specific with no dependent direction is the
// "specific attention only" row; the dependent flags require d_specific.
struct AblationFlags {
  bool individual_a = false;
  bool individual_b = false;
  bool joint_baseline = false;
  bool d_specific = true;
  bool dep_a_to_b = true;
  bool dep_b_to_a = true;

  void validate() const;  // throws UsageError
  Variant variant() const;
  std::string label() const;
};

struct CanetConfig {
  std::size_t num_classes_a = 2;
  std::size_t num_classes_b = 3;
  double lambda = 0.25;
  std::size_t proj_dim = 1024;
  double dropout = 0.3;       // after the backbone
  double proj_dropout = 0.3;  // before each projection FC
  std::size_t reduction = 16;
  std::size_t spatial_kernel = 7;
  bool mlp_bias = true;
  BackboneConfig backbone;
  AblationFlags ablation;

  void validate() const;
};

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [out × in]
  Tensor<T> b;  // [out]
};

template <typename T>
struct CanetParams {
  std::vector<Tensor<T>> backbone_w;  // stage i: [w_i × w_{i-1} × k × k]
  std::vector<Tensor<T>> backbone_b;
  // Index 0 is disease a (DR), index 1 disease b (DME). Present per variant.
  std::optional<SpecificAttentionParams<T>> specific[2];
  std::optional<LinearParams<T>> project[2];
  std::optional<DependentAttentionParams<T>> dep_a_to_b;  // gate from G_a added into G_b
  std::optional<DependentAttentionParams<T>> dep_b_to_a;
  std::optional<LinearParams<T>> head_refined[2];
  std::optional<LinearParams<T>> head_specific[2];

  static CanetParams init(const CanetConfig& cfg, RngState& rng);
  // Stable checkpoint names, e.g. "specific.dr.w0", "dependent.dr2dme.w1".
  std::vector<ParamRef<T>> named_parameters();
  std::size_t count() const;
  template <typename U>
  CanetParams<U> cast() const;
};

template <typename T>
struct CanetOutput {
  std::optional<Var<T>> logits_a_refined;  // prediction heads
  std::optional<Var<T>> logits_b_refined;
  std::optional<Var<T>> logits_a_specific;
  std::optional<Var<T>> logits_b_specific;
  // Inspection handles, present for the attention variants.
  std::optional<Var<T>> features;  // backbone output
  std::optional<SpecificAttentionOutput<T>> specific[2];
  std::optional<Var<T>> g[2];        // G_a, G_b
  std::optional<Var<T>> g_prime[2];  // G_a′, G_b′
  std::optional<Var<T>> dep_gate_a_to_b;
  std::optional<Var<T>> dep_gate_b_to_a;
};

struct ForwardOptions {
  bool training = false;
  // Replaces both dependent gates with exact zeros (ablation identity check).
  bool zero_dependent_gates = false;
};

// x: [N×in×H×W] -> [N×C×H′×W′]
template <typename T>
Var<T> backbone_forward(Var<T> x, CanetParams<T>& p, const BackboneConfig& cfg);

// g = FC(dropout(global_avg(f′)))
template <typename T>
Var<T> project_features(Var<T> f_prime, LinearParams<T>& proj, double dropout_rate, RngState& rng,
                        bool training);

template <typename T>
CanetOutput<T> canet_forward(Var<T> x, CanetParams<T>& p, const CanetConfig& cfg, RngState& rng,
                             const ForwardOptions& opt = {});

// CE(a′) + CE(b′) on refined heads + λ·(CE on specific heads). Heads absent
// from the variant contribute nothing. Labels may be empty for a missing disease.
template <typename T>
Var<T> joint_loss(const CanetOutput<T>& out, std::span<const int> labels_a,
                  std::span<const int> labels_b, double lambda);

// a or b is -1 when the variant has no head for that disease.
using Prediction = GradePair;

// Argmax of the refined heads, ties to the lowest class index.
template <typename T>
std::vector<Prediction> predict(const CanetOutput<T>& out);

std::size_t argmax_row(std::span<const float> row);
std::size_t argmax_row(std::span<const double> row);

// Closed-form parameter count of the attention stack: two specific blocks,
// two dependent blocks.
std::size_t attention_stack_param_count(std::size_t channels, std::size_t dim,
                                        std::size_t reduction, std::size_t kernel, bool mlp_bias);
// Closed-form count for a config (backbone + variant modules).
std::size_t closed_form_param_count(const CanetConfig& cfg);

// Checkpoint: one CANT file per parameter plus manifest.json.
struct CheckpointMeta {
  std::string config_json;  // echo of the run config
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::string metrics_json = "{}";
};

void save_checkpoint(const std::filesystem::path& dir, CanetParams<float>& params,
                     const CheckpointMeta& meta);
// Loads tensors into params (names and shapes must match) and returns the meta.
CheckpointMeta load_checkpoint(const std::filesystem::path& dir, CanetParams<float>& params);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

}  // namespace canet
