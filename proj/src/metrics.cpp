#include "canet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "canet/errors.hpp"
#include "json.hpp"

namespace canet {

using nlohmann::ordered_json;

double joint_accuracy(std::span<const GradePair> preds, std::span<const GradePair> labels) {
  if (preds.size() != labels.size()) {
    throw UsageError("joint_accuracy: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw UndefinedMetricError("joint_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw UsageError("accuracy: length mismatch");
  if (preds.empty()) throw UndefinedMetricError("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw UsageError("auc: length mismatch");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("auc: labels must be 0 or 1");
    pos += l == 1;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auc: labels contain a single class");

  // Rank-sum formulation; tied scores share their average rank.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) pos_rank_sum += labels[order[t]] == 1 ? avg_rank : 0.0;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1) / 2) / (p * n);
}

double auc_ovr_macro(std::span<const double> scores, std::span<const int> labels,
                     std::size_t num_classes) {
  if (scores.size() != labels.size() * num_classes) throw UsageError("auc_ovr_macro: score matrix shape mismatch");
  if (num_classes == 2) {
    std::vector<double> s(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) s[i] = scores[i * 2 + 1];
    return auc(s, labels);
  }
  double total = 0;
  std::size_t used = 0;
  std::vector<double> s(labels.size());
  std::vector<int> y(labels.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = scores[i * num_classes + c];
      y[i] = labels[i] == static_cast<int>(c);
      pos += y[i];
    }
    if (pos == 0 || pos == labels.size()) continue;
    total += auc(s, y);
    ++used;
  }
  if (used == 0) throw UndefinedMetricError("auc_ovr_macro: no class has both positives and negatives");
  return total / static_cast<double>(used);
}

Prf1 prf1_confusion(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes) {
  if (preds.size() != labels.size()) throw UsageError("prf1_confusion: length mismatch");
  if (num_classes == 0) throw ParameterError("prf1_confusion: num_classes must be >= 1");
  Prf1 r;
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  const int k = static_cast<int>(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || preds[i] < 0 || preds[i] >= k) {
      throw DataError("prf1_confusion: sample " + std::to_string(i) + " has a class outside [0, " +
                      std::to_string(k) + ")");
    }
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t support = 0, predicted = 0;
    for (std::size_t j = 0; j < num_classes; ++j) {
      support += r.confusion[c][j];
      predicted += r.confusion[j][c];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    const double p = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double rec = support ? tp / static_cast<double>(support) : 0.0;
    if (support == 0) r.zero_support.push_back(c);
    r.class_precision.push_back(p);
    r.class_recall.push_back(rec);
    r.class_f1.push_back(p + rec > 0 ? 2 * p * rec / (p + rec) : 0.0);
  }
  const double kd = static_cast<double>(num_classes);
  r.precision = std::accumulate(r.class_precision.begin(), r.class_precision.end(), 0.0) / kd;
  r.recall = std::accumulate(r.class_recall.begin(), r.class_recall.end(), 0.0) / kd;
  r.f1 = std::accumulate(r.class_f1.begin(), r.class_f1.end(), 0.0) / kd;
  return r;
}

DiseaseMetrics disease_metrics(std::span<const double> scores, std::span<const int> preds,
                               std::span<const int> labels, std::size_t num_classes) {
  DiseaseMetrics m;
  m.num_classes = num_classes;
  m.accuracy = accuracy(preds, labels);
  try {
    m.auc = auc_ovr_macro(scores, labels, num_classes);
  } catch (const UndefinedMetricError&) {
    m.auc.reset();
  }
  Prf1 r = prf1_confusion(preds, labels, num_classes);
  m.precision = r.precision;
  m.recall = r.recall;
  m.f1 = r.f1;
  if (num_classes == 2) {
    m.precision_pos = r.class_precision[1];
    m.recall_pos = r.class_recall[1];
    m.f1_pos = r.class_f1[1];
  }
  m.confusion = std::move(r.confusion);
  m.zero_support = std::move(r.zero_support);
  return m;
}

namespace {

ordered_json disease_json(const DiseaseMetrics& m) {
  ordered_json j;
  j["num_classes"] = m.num_classes;
  j["accuracy"] = m.accuracy;
  j["auc"] = m.auc ? ordered_json(*m.auc) : ordered_json(nullptr);
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  if (m.precision_pos) {
    j["precision_pos"] = *m.precision_pos;
    j["recall_pos"] = *m.recall_pos;
    j["f1_pos"] = *m.f1_pos;
  }
  j["confusion"] = m.confusion;
  j["zero_support_classes"] = m.zero_support;
  return j;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

}  // namespace

std::string MetricsReport::to_json(int indent) const {
  ordered_json j;
  j["n"] = n;
  j["joint_accuracy"] = joint_accuracy ? ordered_json(*joint_accuracy) : ordered_json(nullptr);
  if (a) j["disease_a"] = disease_json(*a);
  if (b) j["disease_b"] = disease_json(*b);
  return j.dump(indent);
}

std::string MetricsReport::csv_header() {
  return "n,joint_ac,ac_a,auc_a,pre_a,rec_a,f1_a,ac_b,auc_b,pre_b,rec_b,f1_b";
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << n << ',' << fmt(joint_accuracy);
  for (const auto* d : {&a, &b}) {
    if (*d) {
      const DiseaseMetrics& m = **d;
      os << ',' << fmt(m.accuracy) << ',' << fmt(m.auc) << ',' << fmt(m.precision) << ','
         << fmt(m.recall) << ',' << fmt(m.f1);
    } else {
      os << ",,,,,";
    }
  }
  return os.str();
}

}  // namespace canet
