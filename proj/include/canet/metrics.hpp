#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canet {

// A (disease a, disease b) grade pair. -1 marks a disease with no prediction.
struct GradePair {
  int a = -1;
  int b = -1;
  bool operator==(const GradePair&) const = default;
};

// Fraction of samples whose predicted pair matches both labels.
double joint_accuracy(std::span<const GradePair> preds, std::span<const GradePair> labels);

double accuracy(std::span<const int> preds, std::span<const int> labels);

// Mann–Whitney AUC: P(score_pos > score_neg) + ½·P(equal). Labels are 0/1.
double auc(std::span<const double> scores, std::span<const int> labels);

// Macro one-vs-rest AUC over the classes that have both positives and
// negatives. scores is row-major [n × num_classes].
double auc_ovr_macro(std::span<const double> scores, std::span<const int> labels,
                     std::size_t num_classes);

struct Prf1 {
  double precision = 0;  // macro
  double recall = 0;
  double f1 = 0;
  std::vector<double> class_precision;
  std::vector<double> class_recall;
  std::vector<double> class_f1;
  // matrix[i][j] = count(label i, pred j)
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<std::size_t> zero_support;  // classes absent from the labels
  bool warning() const { return !zero_support.empty(); }
};

Prf1 prf1_confusion(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes);

struct DiseaseMetrics {
  std::size_t num_classes = 0;
  double accuracy = 0;
  std::optional<double> auc;  // empty when undefined on this split
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  // Positive-class (grade 1) figures, binary diseases only.
  std::optional<double> precision_pos;
  std::optional<double> recall_pos;
  std::optional<double> f1_pos;
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<std::size_t> zero_support;
};

// scores: row-major class probabilities [n × num_classes].
DiseaseMetrics disease_metrics(std::span<const double> scores, std::span<const int> preds,
                               std::span<const int> labels, std::size_t num_classes);

struct MetricsReport {
  std::optional<DiseaseMetrics> a;
  std::optional<DiseaseMetrics> b;
  std::optional<double> joint_accuracy;  // both diseases predicted
  std::size_t n = 0;

  std::string to_json(int indent = 2) const;
  static std::string csv_header();
  std::string csv_row() const;
};

}  // namespace canet
