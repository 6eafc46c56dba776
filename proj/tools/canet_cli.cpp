// canet: train / eval / predict / synth / gradcheck / param-count.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "canet/attention.hpp"
#include "canet/errors.hpp"
#include "canet/experiment.hpp"
#include "canet/gradcheck_suite.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace canet;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
  cmd->add_option("-c,--config", c.config, "JSON run configuration");
  cmd->add_option("--set", c.sets, "Override KEY=VALUE (dotted or unique short key); repeatable")
      ->take_all();
  if (with_out) cmd->add_option("-o,--out", c.out, "Run directory for all artifacts");
}

struct Override {
  std::string key;
  json value;
};

std::vector<Override> parse_sets(const std::vector<std::string>& sets) {
  std::vector<Override> out;
  for (const std::string& s : sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + s + "'");
    out.push_back({resolve_config_key(s.substr(0, eq)), parse_override_value(s.substr(eq + 1))});
  }
  return out;
}

bool has_key(const json& j, const std::string& dotted) {
  const std::size_t dot = dotted.find('.');
  const std::string section = dotted.substr(0, dot), name = dotted.substr(dot + 1);
  return j.contains(section) && j[section].is_object() && j[section].contains(name);
}

// Config file, then --set overrides, then CANET_SEED when no seed was given.
json merged_json(const Common& c, const std::vector<Override>& overrides) {
  json j = c.config.empty() ? json::object() : read_json_file(c.config);
  for (const Override& o : overrides) set_config_value(j, o.key, o.value);
  if (!has_key(j, "train.seed")) {
    if (const char* env = std::getenv("CANET_SEED")) {
      const json seed = parse_override_value(env);
      if (!seed.is_number_unsigned()) throw UsageError(std::string("CANET_SEED must be a non-negative integer, got '") + env + "'");
      set_config_value(j, "train.seed", seed);
    }
  }
  return j;
}

// A list given for a scalar setting turns the run into a sweep over that key.
std::optional<Override> sweep_of(const std::vector<Override>& overrides) {
  const ordered_json defaults = RunConfig{}.to_json();
  std::optional<Override> sweep;
  for (const Override& o : overrides) {
    const std::size_t dot = o.key.find('.');
    const bool scalar = !defaults[o.key.substr(0, dot)][o.key.substr(dot + 1)].is_array();
    if (scalar && o.value.is_array()) {
      if (sweep) throw UsageError("only one swept key per invocation (got " + sweep->key + " and " + o.key + ")");
      if (o.value.empty()) throw UsageError("sweep over " + o.key + " has no values");
      sweep = o;
    }
  }
  return sweep;
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw UsageError("--out DIR is required");
  fs::create_directories(c.out);
  return c.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text << '\n';
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string summary(const MetricsReport& r) {
  std::string s = "n=" + std::to_string(r.n);
  if (r.joint_accuracy) s += " joint_ac=" + fixed(*r.joint_accuracy);
  if (r.a) s += " ac_a=" + fixed(r.a->accuracy) + (r.a->auc ? " auc_a=" + fixed(*r.a->auc) : "");
  if (r.b) s += " ac_b=" + fixed(r.b->accuracy) + (r.b->auc ? " auc_b=" + fixed(*r.b->auc) : "");
  return s;
}

// One training run (holdout or k-fold) into dir; returns the reported metrics row.
std::string train_one(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "config.json", cfg.to_json().dump(2));
  std::vector<GradingSample> samples = load_dataset(cfg);
  if (cfg.data.kfold >= 2) {
    const std::vector<GradePair> labels = labels_of(samples);
    const std::vector<Fold> folds = kfold_split(labels, cfg.data.kfold, cfg.data.split_seed);
    std::vector<MetricsReport> reports;
    for (std::size_t k = 0; k < folds.size(); ++k) {
      std::vector<GradingSample> tr, te;
      for (std::size_t i : folds[k].train) tr.push_back(samples[i]);
      for (std::size_t i : folds[k].test) te.push_back(samples[i]);
      RunOutcome o = run_training(cfg, std::move(tr), std::move(te), dir / ("fold_" + std::to_string(k)));
      std::cout << "fold " << k << ": " << summary(o.eval.report) << std::endl;
      reports.push_back(o.eval.report);
    }
    const ordered_json mean = mean_report(reports);
    write_text(dir / "metrics_mean.json", mean.dump(2));
    std::cout << "mean over " << folds.size() << " folds: " << mean.dump() << std::endl;
    auto num = [](const ordered_json& v) { return v.is_number() ? fixed(v.get<double>(), 6) : std::string(); };
    std::string row = std::to_string(samples.size()) + "," + num(mean["joint_accuracy"]);
    for (const char* d : {"disease_a", "disease_b"}) {
      if (mean.contains(d)) {
        const ordered_json& m = mean[d];
        row += "," + num(m["accuracy"]) + "," + num(m["auc"]) + "," + num(m["precision"]) + "," +
               num(m["recall"]) + "," + num(m["f1"]);
      } else {
        row += ",,,,,";
      }
    }
    return row;
  }
  TrainEvalSplit split = holdout_split(cfg, std::move(samples));
  RunOutcome o = run_training(cfg, std::move(split.train), std::move(split.eval), dir);
  std::cout << cfg.model.ablation.label() << " best epoch " << o.train.best_epoch << ": " << summary(o.eval.report)
            << std::endl;
  return o.eval.report.csv_row();
}

int cmd_train(const Common& c) {
  const std::vector<Override> overrides = parse_sets(c.sets);
  const json base = merged_json(c, overrides);
  const std::optional<Override> sweep = sweep_of(overrides);

  // Validate every configuration before any work starts.
  std::vector<std::pair<std::string, RunConfig>> runs;
  if (sweep) {
    for (const json& v : sweep->value) {
      json j = base;
      set_config_value(j, sweep->key, v);
      RunConfig cfg = RunConfig::from_json(j);
      cfg.validate();
      runs.emplace_back(v.dump(), std::move(cfg));
    }
  } else {
    RunConfig cfg = RunConfig::from_json(base);
    cfg.validate();
    runs.emplace_back("", std::move(cfg));
  }
  const fs::path out = require_out(c);

  if (!sweep) {
    train_one(runs.front().second, out);
    return 0;
  }
  std::ofstream results(out / "results.csv");
  results << "key,value," << MetricsReport::csv_header() << '\n';
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& [value, cfg] = runs[i];
    std::cout << sweep->key << "=" << value << std::endl;
    const std::string row = train_one(cfg, out / ("sweep_" + std::to_string(i)));
    results << sweep->key << ',' << value << ',' << row << '\n' << std::flush;
  }
  std::cout << "results: " << (out / "results.csv").string() << std::endl;
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& manifest, const std::string& which) {
  if (checkpoint.empty()) throw UsageError("--checkpoint DIR is required");
  LoadedRun l = load_run(checkpoint);
  std::vector<GradingSample> samples;
  if (!manifest.empty()) {
    ManifestOptions opt;
    opt.num_classes_a = opt.num_classes_b = 1 << 16;  // class counts are checked against the model below
    opt.grade_a_map = l.cfg.data.grade_a_map;
    opt.resize_to = l.cfg.train.resize_to;
    samples = load_manifest(manifest, opt);
  } else {
    // Data settings may be overridden; the model always comes from the checkpoint.
    json j = ordered_json::parse(l.cfg.to_json().dump());
    for (const Override& o : parse_sets(c.sets)) {
      if (o.key.rfind("data.", 0) != 0 && o.key.rfind("synth.", 0) != 0) {
        throw UsageError("eval only accepts data.* and synth.* overrides, got " + o.key);
      }
      set_config_value(j, o.key, o.value);
    }
    RunConfig data_cfg = RunConfig::from_json(j);
    TrainEvalSplit split = holdout_split(data_cfg, load_dataset(data_cfg));
    if (which == "train") samples = std::move(split.train);
    else if (which == "eval") samples = std::move(split.eval);
    else {
      samples = std::move(split.train);
      samples.insert(samples.end(), split.eval.begin(), split.eval.end());
    }
  }
  const Evaluation ev = evaluate_run(l, std::move(samples));
  const std::string report = ev.report.to_json();
  std::cout << report << std::endl;
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "metrics.json", report);
  }
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::vector<std::string>& images) {
  if (images.empty()) throw UsageError("--image PATH is required");
  LoadedRun run = load_run(checkpoint);
  for (const std::string& path : images) {
    const ImageScores scores = predict_image(run, path);
    std::cout << "image " << path << '\n';
    auto emit = [](const char* name, const std::vector<double>& probs, int grade) {
      if (probs.empty()) return;
      std::cout << name << " scores";
      for (double p : probs) std::cout << ' ' << fixed(p, 9);
      std::cout << '\n' << name << " grade " << grade << '\n';
    };
    emit("disease_a", scores.probs_a, scores.grade_a);
    emit("disease_b", scores.probs_b, scores.grade_b);
  }
  std::cout << std::flush;
  return 0;
}

int cmd_synth(const Common& c, std::size_t n) {
  const std::vector<Override> overrides = parse_sets(c.sets);
  const json j = merged_json(c, overrides);
  RunConfig cfg = RunConfig::from_json(j);
  cfg.synth.validate();
  const fs::path out = require_out(c);
  const std::size_t count = n ? n : cfg.data.synth_n;
  const std::vector<GradingSample> samples = synth_generate_to_disk(cfg.synth, count, out);
  std::vector<std::vector<std::size_t>> table(cfg.synth.num_classes_a(), std::vector<std::size_t>(3, 0));
  for (const GradingSample& s : samples) ++table[s.grade_a][s.grade_b];
  std::cout << "wrote " << count << " images and manifest.csv to " << out.string() << "\njoint label counts (rows a, cols b):\n";
  for (std::size_t a = 0; a < table.size(); ++a) {
    std::cout << "  a=" << a << ':';
    for (std::size_t v : table[a]) std::cout << ' ' << v;
    std::cout << '\n';
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool no_model, bool flip) {
  canet::testing::set_dependent_fuse_sign_flip(flip);
  const std::vector<SuiteEntry> entries = run_gradcheck_suite(SuiteOptions{.seed = seed, .include_model = !no_model});
  canet::testing::set_dependent_fuse_sign_flip(false);
  std::size_t failed = 0;
  std::cout << std::left << std::setw(28) << "op" << std::setw(9) << "checked" << std::setw(8) << "kinks"
            << std::setw(14) << "max_rel_err" << std::setw(9) << "tol" << "result\n";
  for (const SuiteEntry& e : entries) {
    std::ostringstream err, tol;
    err << std::scientific << std::setprecision(2) << e.report.max_rel_err;
    tol << std::scientific << std::setprecision(0) << e.tol;
    std::cout << std::setw(28) << e.op << std::setw(9) << e.report.checked << std::setw(8) << e.report.kinks_excluded
              << std::setw(14) << err.str() << std::setw(9) << tol.str() << (e.passed() ? "PASS" : "FAIL") << '\n';
    if (!e.passed()) {
      ++failed;
      for (const GradCheckFailure& f : e.report.failures) {
        std::cout << "  " << e.op << ": " << f.param << "[" << f.index << "] analytic " << f.analytic << " numeric "
                  << f.numeric << '\n';
        break;
      }
    }
  }
  std::cout << (failed ? "FAIL" : "PASS") << ": " << entries.size() - failed << "/" << entries.size()
            << " checks passed" << std::endl;
  return failed ? 4 : 0;
}

int cmd_param_count(const Common& c) {
  const json j = merged_json(c, parse_sets(c.sets));
  RunConfig cfg = RunConfig::from_json(j);
  cfg.model.ablation.validate();
  cfg.model.validate();
  RngState rng(0);
  const CanetParams<float> p = CanetParams<float>::init(cfg.model, rng);
  ordered_json out;
  out["variant"] = cfg.model.ablation.label();
  out["parameters"] = p.count();
  out["closed_form"] = closed_form_param_count(cfg.model);
  out["attention_stack"] =
      attention_stack_param_count(cfg.model.backbone.out_channels(), cfg.model.proj_dim, cfg.model.reduction,
                                  cfg.model.spatial_kernel, cfg.model.mlp_bias);
  std::cout << out.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-disease attention network: training and evaluation"};
  app.require_subcommand(1);

  Common train_c, eval_c, synth_c, count_c;
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model, a k-fold set, or a sweep");
  add_common(train_cmd, train_c);

  std::string checkpoint, manifest, split = "eval";
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and print metrics JSON");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--manifest", manifest, "Manifest CSV to score (default: the run's own data)");
  eval_cmd->add_option("--split", split, "Split of the run's data: train, eval or all")
      ->check(CLI::IsMember({"train", "eval", "all"}));

  std::string predict_ckpt;
  std::vector<std::string> images;
  CLI::App* predict_cmd = app.add_subcommand("predict", "Print per-class scores and grades for images");
  predict_cmd->add_option("--checkpoint", predict_ckpt, "Checkpoint directory")->required();
  predict_cmd->add_option("--image", images, "P5/P6 image; repeatable")->required();

  std::size_t synth_n = 0;
  CLI::App* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset (PPM images + manifest.csv)");
  add_common(synth_cmd, synth_c);
  synth_cmd->add_option("-n,--count", synth_n, "Number of images (default data.synth_n)");

  std::uint64_t gc_seed = 0;
  bool gc_no_model = false, gc_flip = false;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
  gc_cmd->add_option("--seed", gc_seed, "Seed for inputs and sampled coordinates");
  gc_cmd->add_flag("--no-model", gc_no_model, "Skip the end-to-end model loss");
  gc_cmd->add_flag("--inject-fuse-sign-flip", gc_flip, "Test hook: corrupt the dependent-fuse backward")
      ->group("");

  CLI::App* count_cmd = app.add_subcommand("param-count", "Print instantiated and closed-form parameter counts");
  add_common(count_cmd, count_c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_c);
    if (*eval_cmd) return cmd_eval(eval_c, checkpoint, manifest, split);
    if (*predict_cmd) return cmd_predict(predict_ckpt, images);
    if (*synth_cmd) return cmd_synth(synth_c, synth_n);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_no_model, gc_flip);
    if (*count_cmd) return cmd_param_count(count_c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
