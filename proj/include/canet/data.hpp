#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canet/metrics.hpp"
#include "canet/rng.hpp"
#include "canet/tensor.hpp"

namespace canet {

struct GradingSample {
  Tensor<float> image;  // [3×H×W]
  int grade_a = 0;
  int grade_b = 0;
  std::string id;
};

struct ManifestOptions {
  std::size_t num_classes_a = 2;
  std::size_t num_classes_b = 3;
  // Optional raw-grade -> class mapping for disease a, e.g. {0,0,1,1} groups
  // four severity stages into a binary referable/non-referable label.
  std::vector<int> grade_a_map;
  // Images are resampled to resize_to×resize_to when non-zero.
  std::size_t resize_to = 0;
};

// CSV `filename,grade_a,grade_b`; images are P5/P6 files relative to the manifest.
std::vector<GradingSample> load_manifest(const std::filesystem::path& path, const ManifestOptions& opt);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, GradePair>>& rows);

struct NormStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

NormStats compute_norm_stats(std::span<const GradingSample> samples);
// Reads `{mean:[3], std:[3]}` from cache_path if present, else computes and writes it.
NormStats cached_norm_stats(const std::filesystem::path& cache_path, std::span<const GradingSample> samples);
void normalize(Tensor<float>& image, const NormStats& stats);

// Synthetic fundus-like images carrying two correlated grades. Disease a is
// the bucketed count of bright lesions; disease b is the bucketed distance from
// the nearest lesion to a marker (near -> 2, middle -> 1, far or no lesion -> 0).
struct SynthSpec {
  std::size_t image_size = 64;
  std::vector<double> grade_a_probs{0.5, 0.5};
  // Inclusive lesion-count range for each grade of disease a.
  std::vector<std::array<int, 2>> count_ranges{{0, 4}, {5, 10}};
  // P(grade b | at least one lesion) before coupling.
  std::array<double, 3> base_b{0.4, 0.3, 0.3};
  double near_px = 10.0;
  double far_px = 18.0;
  // Coupling: P(b) = (1 - rho·s)·base_b + rho·s·[b == 2], s = a / (Ka - 1).
  double rho = 0.0;
  // When non-empty, row a replaces the coupled formula with an explicit
  // P(grade b | grade a, at least one lesion).
  std::vector<std::array<double, 3>> b_given_a;
  double marker_radius = 3.5;
  double lesion_radius = 1.5;
  double marker_jitter = 6.0;
  double noise = 0.02;
  std::uint64_t seed = 0;

  std::size_t num_classes_a() const { return grade_a_probs.size(); }
  static constexpr std::size_t num_classes_b() { return 3; }
  void validate() const;  // throws ParameterError

  // Two-grade disease a, lesion count 0–4 vs 5–10.
  static SynthSpec binary_preset();
  // Four-grade disease a with label marginals of a public two-disease
  // screening set; zero lesions exactly when grade a is 0.
  static SynthSpec messidor_preset();
};

struct SynthSample {
  GradingSample sample;
  int lesions = 0;
  double min_distance = 0;  // +inf without lesions
};

// Sample i depends only on (spec.seed, i).
SynthSample synth_one(const SynthSpec& spec, std::size_t index);
std::vector<GradingSample> synth_generate(const SynthSpec& spec, std::size_t n);
// Writes img_XXXXX.ppm files and manifest.csv into dir; returns the samples.
std::vector<GradingSample> synth_generate_to_disk(const SynthSpec& spec, std::size_t n,
                                                  const std::filesystem::path& dir);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified by the joint (a, b) label: folds are disjoint, cover every index
// and differ in size by at most one.
std::vector<Fold> kfold_split(std::span<const GradePair> labels, std::size_t k, std::uint64_t seed);

std::vector<GradePair> labels_of(std::span<const GradingSample> samples);

}  // namespace canet
