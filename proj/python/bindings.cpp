// Python bindings. Structured values cross the boundary as JSON text; the
// canet package wraps them into dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "canet/errors.hpp"
#include "canet/experiment.hpp"
#include "canet/gradcheck_suite.hpp"
#include "canet/metrics.hpp"

namespace py = pybind11;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace canet;

namespace {

RunConfig parse_config(const std::string& config_json) {
  const json j = json::parse(config_json, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  RunConfig cfg = RunConfig::from_json(j);
  cfg.validate();
  return cfg;
}

std::string train_run(const std::string& config_json, const std::optional<std::string>& out_dir) {
  const RunConfig cfg = parse_config(config_json);
  std::optional<std::filesystem::path> dir;
  if (out_dir) {
    dir = *out_dir;
    std::filesystem::create_directories(*dir);
  }
  TrainEvalSplit split = holdout_split(cfg, load_dataset(cfg));
  RunOutcome o;
  {
    py::gil_scoped_release release;
    o = run_training(cfg, std::move(split.train), std::move(split.eval), dir);
  }
  ordered_json out;
  out["config"] = cfg.to_json();
  out["metrics"] = ordered_json::parse(o.eval.report.to_json(-1));
  out["best_epoch"] = o.train.best_epoch;
  out["steps"] = o.train.steps;
  ordered_json rows = ordered_json::array();
  for (const HistoryRow& h : o.train.history) {
    ordered_json r{{"epoch", h.epoch}, {"step", h.step}, {"lr", h.lr}, {"train_loss", h.train_loss}};
    r["eval_joint_ac"] = h.eval_joint_ac ? ordered_json(*h.eval_joint_ac) : ordered_json(nullptr);
    rows.push_back(r);
  }
  out["history"] = rows;
  return out.dump();
}

std::string evaluate_checkpoint(const std::string& checkpoint, const std::optional<std::string>& manifest) {
  LoadedRun run = load_run(checkpoint);
  std::vector<GradingSample> samples;
  if (manifest) {
    ManifestOptions opt;
    opt.num_classes_a = opt.num_classes_b = 1 << 16;
    opt.grade_a_map = run.cfg.data.grade_a_map;
    opt.resize_to = run.cfg.train.resize_to;
    samples = load_manifest(*manifest, opt);
  } else {
    samples = holdout_split(run.cfg, load_dataset(run.cfg)).eval;
  }
  return evaluate_run(run, std::move(samples)).report.to_json(-1);
}

py::dict predict_file(const std::string& checkpoint, const std::string& image) {
  LoadedRun run = load_run(checkpoint);
  const ImageScores s = predict_image(run, image);
  py::dict out;
  if (!s.probs_a.empty()) {
    out["disease_a"] = py::dict(py::arg("scores") = s.probs_a, py::arg("grade") = s.grade_a);
  }
  if (!s.probs_b.empty()) {
    out["disease_b"] = py::dict(py::arg("scores") = s.probs_b, py::arg("grade") = s.grade_b);
  }
  return out;
}

std::string param_count(const std::string& config_json) {
  const json j = json::parse(config_json, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  const RunConfig cfg = RunConfig::from_json(j);
  cfg.model.ablation.validate();
  cfg.model.validate();
  RngState rng(0);
  ordered_json out;
  out["variant"] = cfg.model.ablation.label();
  out["parameters"] = CanetParams<float>::init(cfg.model, rng).count();
  out["closed_form"] = closed_form_param_count(cfg.model);
  return out.dump();
}

py::list gradcheck(std::uint64_t seed, bool include_model) {
  std::vector<SuiteEntry> entries;
  {
    py::gil_scoped_release release;
    entries = run_gradcheck_suite(SuiteOptions{.seed = seed, .include_model = include_model});
  }
  py::list out;
  for (const SuiteEntry& e : entries) {
    out.append(py::dict(py::arg("op") = e.op, py::arg("passed") = e.passed(), py::arg("checked") = e.report.checked,
                        py::arg("max_rel_err") = e.report.max_rel_err, py::arg("tol") = e.tol));
  }
  return out;
}

py::list synth(const std::string& config_json, std::size_t n, const std::string& out_dir) {
  const json j = json::parse(config_json, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  const RunConfig cfg = RunConfig::from_json(j);
  cfg.synth.validate();
  py::list out;
  for (const GradingSample& s : synth_generate_to_disk(cfg.synth, n, out_dir)) {
    out.append(py::make_tuple(s.id, s.grade_a, s.grade_b));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cross-disease attention network core";

  // Later registrations are tried first, so the subclasses shadow the base.
  auto& base = py::register_exception<Error>(m, "CanetError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base.ptr());

  m.def("train", &train_run, py::arg("config_json"), py::arg("out_dir") = std::nullopt);
  m.def("evaluate", &evaluate_checkpoint, py::arg("checkpoint"), py::arg("manifest") = std::nullopt);
  m.def("predict", &predict_file, py::arg("checkpoint"), py::arg("image"));
  m.def("param_count", &param_count, py::arg("config_json"));
  m.def("gradcheck", &gradcheck, py::arg("seed") = 0, py::arg("include_model") = true);
  m.def("synth", &synth, py::arg("config_json"), py::arg("n"), py::arg("out_dir"));
  m.def("resolve_key", &resolve_config_key, py::arg("key"));
  m.def("default_config", [] { return RunConfig{}.to_json().dump(); });

  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "joint_accuracy",
      [](const std::vector<std::pair<int, int>>& preds, const std::vector<std::pair<int, int>>& labels) {
        std::vector<GradePair> p, l;
        for (auto [a, b] : preds) p.push_back({a, b});
        for (auto [a, b] : labels) l.push_back({a, b});
        return joint_accuracy(p, l);
      },
      py::arg("preds"), py::arg("labels"));
}
