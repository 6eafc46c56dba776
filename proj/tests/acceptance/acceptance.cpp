// Acceptance gate. Prints one PASS/FAIL line per criterion; detail lines are
// indented. With arguments, runs only the listed criteria ("5", "1 2 3").

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "../scalar_oracles.hpp"
#include "canet/attention.hpp"
#include "canet/errors.hpp"
#include "canet/experiment.hpp"
#include "canet/gradcheck_suite.hpp"
#include "canet/metrics.hpp"
#include "canet/ops.hpp"

#ifndef CANET_SOURCE_DIR
#error "CANET_SOURCE_DIR must point at the repository root"
#endif

namespace fs = std::filesystem;
using namespace canet;
using namespace canet::oracle;

namespace {

// Pinned tolerances.
constexpr double kPrimitiveTol = 1e-5;
constexpr double kCompositeTol = 1e-4;
constexpr double kGradcheckSeconds = 120.0;
constexpr double kOracleTol = 1e-6;
constexpr int kOracleInstances = 100;
constexpr double kAucTol = 1e-12;
constexpr int kAucInstances = 200;
constexpr double kConstantJointAc = 0.455;
constexpr double kConstantJointTol = 0.02;
constexpr std::size_t kConstantSamples = 5000;
constexpr double kDsSlack = 0.005;       // full ≥ d-S − 0.5 points
constexpr double kFullMargin = 0.010;    // full ≥ baseline + 1.0 points
constexpr double kAblationSeconds = 1800.0;
constexpr double kLambdaSpread = 0.03;
constexpr double kOverfitJointAc = 0.95;
constexpr std::size_t kOverfitSamples = 32;
constexpr std::size_t kOverfitSteps = 300;

struct Outcome {
  bool passed = true;
  std::string summary;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(2);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RunConfig desk_config() {
  return RunConfig::from_json(read_json_file(fs::path(CANET_SOURCE_DIR) / "configs" / "desk.json"));
}

Tensor<double> random_tensor(Shape shape, RngState& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double worst_gap(std::span<const double> got, std::span<const double> want) {
  if (got.size() != want.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    worst = std::max(worst, std::abs(got[i] - want[i]) / std::max(1.0, std::abs(want[i])));
  }
  return worst;
}

// Random small instance of the specific block with every bias nonzero.
SpecificAttentionParams<double> random_specific(std::size_t c, std::size_t red, std::size_t k, bool bias,
                                                RngState& rng) {
  auto p = SpecificAttentionParams<double>::init(c, red, k, bias, rng);
  p.w0_bias = random_tensor(p.w0_bias.shape(), rng, -0.3, 0.3);
  p.w1_bias = random_tensor(p.w1_bias.shape(), rng, -0.3, 0.3);
  p.conv_bias = random_tensor(p.conv_bias.shape(), rng, -0.3, 0.3);
  return p;
}

DependentAttentionParams<double> random_dependent(std::size_t d, std::size_t red, bool bias, RngState& rng) {
  auto p = DependentAttentionParams<double>::init(d, red, bias, rng);
  p.w0_bias = random_tensor(p.w0_bias.shape(), rng, -0.3, 0.3);
  p.w1_bias = random_tensor(p.w1_bias.shape(), rng, -0.3, 0.3);
  return p;
}

struct SpecificInstance {
  Tensor<double> f;
  SpecificAttentionParams<double> p;
};

SpecificInstance specific_instance(RngState& rng) {
  static const std::size_t channels[] = {4, 6, 8, 12, 16};
  const std::size_t c = channels[rng.below(5)];
  std::vector<std::size_t> reds;
  for (std::size_t r = 1; r <= c; ++r)
    if (c % r == 0 && c / r >= 1) reds.push_back(r);
  const std::size_t red = reds[rng.below(reds.size())];
  const std::size_t k = 1 + 2 * rng.below(4);
  const std::size_t h = 2 + rng.below(6), w = 2 + rng.below(6);
  return {random_tensor({c, h, w}, rng, -2, 2), random_specific(c, red, k, rng.bernoulli(0.8), rng)};
}

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<SuiteEntry> entries = run_gradcheck_suite(SuiteOptions{});
  const double elapsed = seconds_since(t0);
  Outcome o;
  double worst_primitive = 0, worst_composite = 0;
  for (const SuiteEntry& e : entries) {
    const bool composite = e.tol > kPrimitiveTol;
    const double limit = composite ? kCompositeTol : kPrimitiveTol;
    (composite ? worst_composite : worst_primitive) =
        std::max(composite ? worst_composite : worst_primitive, e.report.max_rel_err);
    if (!e.passed() || e.report.max_rel_err >= limit || e.tol > limit) {
      o.passed = false;
      std::cout << "  " << e.op << " max rel-err " << sci(e.report.max_rel_err) << " over " << e.report.checked
                << " coordinates\n";
    }
  }
  const bool has_model = std::any_of(entries.begin(), entries.end(), [](const SuiteEntry& e) {
    return e.op == "canet.joint_loss" && e.passed();
  });
  o.passed = o.passed && has_model && elapsed < kGradcheckSeconds;
  o.summary = std::to_string(entries.size()) + " ops, primitive max rel-err " + sci(worst_primitive) +
              " (< 1e-5), composite " + sci(worst_composite) + " (< 1e-4), " + num(elapsed, 1) + " s (< 120 s)";
  return o;
}

Outcome equation_oracles() {
  RngState rng(2024);
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  auto record = [&](const std::string& eq, double gap) {
    worst[eq] = std::max(worst[eq], gap);
    ++count[eq];
  };
  for (int trial = 0; trial < kOracleInstances; ++trial) {
    SpecificInstance s = specific_instance(rng);
    GradTape<double> tape;
    const Var<double> f = tape.constant(s.f);
    const std::vector<double> a_c = loop_channel_gate(s.f, s.p);
    record("channel gate", worst_gap(channel_attention(f, s.p).value().data(), a_c));

    const std::vector<double> f_i = loop_apply_channel(a_c, s.f);
    const Var<double> gate = tape.constant(Tensor<double>({s.f.dim(0)}, a_c));
    record("channel apply", worst_gap(apply_channel(gate, f).value().data(), f_i));

    const Tensor<double> f_i_t(s.f.shape(), f_i);
    const std::vector<double> a_s = loop_spatial_gate(f_i_t, s.p);
    record("spatial gate", worst_gap(spatial_attention(tape.constant(f_i_t), s.p).value().data(), a_s));

    const SpecificAttentionOutput<double> block = disease_specific_forward(f, s.p);
    record("spatial apply", worst_gap(block.features.value().data(), loop_apply_spatial(a_s, f_i_t)));

    const std::size_t d = 4 * (1 + rng.below(8));
    const std::size_t red = (d % 8 == 0 && rng.bernoulli(0.5)) ? 8 : 4;
    auto dp = random_dependent(d, red, rng.bernoulli(0.8), rng);
    const Tensor<double> src = random_tensor({d}, rng, -2, 2), dst = random_tensor({d}, rng, -2, 2);
    const std::vector<double> a_dep = loop_dependent_gate(src.storage(), dp);
    const Var<double> gate_dep = dependent_attention(tape.constant(src), dp);
    record("dependent gate", worst_gap(gate_dep.value().data(), a_dep));
    record("dependent fuse",
           worst_gap(dependent_fuse(tape.constant(dst), gate_dep, tape.constant(src)).value().data(),
                     loop_fuse(dst.storage(), a_dep, src.storage())));

    const std::size_t n = 1 + rng.below(8), ka = 2 + rng.below(4), kb = 3;
    const double lambda = rng.uniform(0.0, 1.0);
    CanetOutput<double> out;
    Tensor<double> logits[4] = {random_tensor({n, ka}, rng, -4, 4), random_tensor({n, kb}, rng, -4, 4),
                                random_tensor({n, ka}, rng, -4, 4), random_tensor({n, kb}, rng, -4, 4)};
    out.logits_a_refined = tape.constant(logits[0]);
    out.logits_b_refined = tape.constant(logits[1]);
    out.logits_a_specific = tape.constant(logits[2]);
    out.logits_b_specific = tape.constant(logits[3]);
    std::vector<int> la(n), lb(n);
    for (std::size_t i = 0; i < n; ++i) {
      la[i] = static_cast<int>(rng.below(ka));
      lb[i] = static_cast<int>(rng.below(kb));
    }
    const double ce = loop_ce(logits[0], la);
    record("cross-entropy", std::abs(softmax_cross_entropy(*out.logits_a_refined, la).value().item() - ce) /
                                std::max(1.0, ce));
    const double total = loop_ce(logits[0], la) + loop_ce(logits[1], lb) +
                         lambda * (loop_ce(logits[2], la) + loop_ce(logits[3], lb));
    record("joint loss", std::abs(joint_loss(out, std::span<const int>(la), std::span<const int>(lb), lambda)
                                      .value()
                                      .item() -
                                  total) /
                             std::max(1.0, total));
  }
  Outcome o;
  std::string detail;
  for (const auto& [eq, gap] : worst) {
    if (!(gap < kOracleTol) || count[eq] < kOracleInstances) o.passed = false;
    std::cout << "  " << eq << ": " << count[eq] << " instances, worst gap " << sci(gap) << "\n";
  }
  double overall = 0;
  for (const auto& [eq, gap] : worst) overall = std::max(overall, gap);
  o.summary = std::to_string(worst.size()) + " equations x " + std::to_string(kOracleInstances) +
              " instances, worst gap " + sci(overall) + " (< 1e-6)";
  return o;
}

Outcome attention_invariants() {
  RngState rng(77);
  Outcome o;
  std::size_t gates = 0;
  double lo = 1, hi = 0, worst_growth = 0;
  for (int trial = 0; trial < kOracleInstances; ++trial) {
    SpecificInstance s = specific_instance(rng);
    GradTape<double> tape;
    const SpecificAttentionOutput<double> out = disease_specific_forward(tape.constant(s.f), s.p);
    for (const Var<double>* g : {&out.channel_gate, &out.spatial_gate}) {
      for (double v : g->value().data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        ++gates;
      }
    }
    const auto feats = out.features.value().data();
    for (std::size_t i = 0; i < feats.size(); ++i) {
      worst_growth = std::max(worst_growth, std::abs(feats[i]) - std::abs(s.f[i]));
    }
    const std::size_t d = 4 * (1 + rng.below(8));
    auto dp = random_dependent(d, 4, true, rng);
    for (double v : dependent_attention(tape.constant(random_tensor({3, d}, rng, -2, 2)), dp).value().data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      ++gates;
    }
  }
  const bool open_unit = lo > 0 && hi < 1;
  const bool attenuates = worst_growth <= 0;

  // Zero parameters: exact σ(0) gates.
  bool exact_quarter = true, exact_half = true;
  for (int trial = 0; trial < 10; ++trial) {
    SpecificInstance s = specific_instance(rng);
    auto zero = SpecificAttentionParams<double>::zeros(s.p.channels, s.p.reduction, s.p.kernel);
    GradTape<double> tape;
    const auto feats = disease_specific_forward(tape.constant(s.f), zero).features.value().data();
    for (std::size_t i = 0; i < feats.size(); ++i) exact_quarter = exact_quarter && feats[i] == 0.25 * s.f[i];
    const std::size_t d = 8;
    auto dz = DependentAttentionParams<double>::zeros(d, 4);
    const Tensor<double> src = random_tensor({d}, rng), dst = random_tensor({d}, rng);
    const Var<double> srcv = tape.constant(src);
    const auto fused = dependent_fuse(tape.constant(dst), dependent_attention(srcv, dz), srcv).value().data();
    for (std::size_t i = 0; i < d; ++i) exact_half = exact_half && fused[i] == dst[i] + 0.5 * src[i];
  }
  o.passed = open_unit && attenuates && exact_quarter && exact_half;
  o.summary = std::to_string(gates) + " gates in [" + sci(lo) + ", " + num(hi, 6) + "], max(|f'|-|f|) = " +
              sci(worst_growth) + ", zero-param specific = 0.25 f " + (exact_quarter ? "exact" : "INEXACT") +
              ", dependent = g_dst + 0.5 g_src " + (exact_half ? "exact" : "INEXACT");
  return o;
}

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

Outcome metric_oracles() {
  Outcome o;
  RngState rng(4);
  double worst = 0;
  for (int trial = 0; trial < kAucInstances; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores so ties are common.
      s[i] = static_cast<double>(rng.below(trial % 2 ? 5 : 1000)) / 10.0;
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(auc(s, y) - pair_count_auc(s, y)));
  }
  const bool auc_ok = worst < kAucTol;

  // Hand counts: 2 of 5 match on both diseases.
  const std::vector<GradePair> preds{{0, 0}, {1, 2}, {1, 1}, {0, 2}, {2, 0}};
  const std::vector<GradePair> labels{{0, 0}, {1, 1}, {1, 1}, {0, 1}, {1, 0}};
  const bool joint_ok = joint_accuracy(preds, labels) == 0.4;

  SynthSpec spec = SynthSpec::messidor_preset();
  spec.seed = 11;
  std::size_t both_zero = 0;
  std::vector<GradePair> truth, constant(kConstantSamples, GradePair{0, 0});
  for (std::size_t i = 0; i < kConstantSamples; ++i) {
    const GradingSample s = synth_one(spec, i).sample;
    truth.push_back({s.grade_a, s.grade_b});
    both_zero += s.grade_a == 0 && s.grade_b == 0;
  }
  const double constant_ac = joint_accuracy(constant, truth);
  const bool constant_ok = std::abs(constant_ac - kConstantJointAc) <= kConstantJointTol;
  o.passed = auc_ok && joint_ok && constant_ok;
  o.summary = "AUC vs pair count over " + std::to_string(kAucInstances) + " sets: max gap " + sci(worst) +
              " (< 1e-12); hand-count joint accuracy " + (joint_ok ? "exact" : "WRONG") + "; constant (0,0) Joint Ac " +
              num(constant_ac) + " on " + std::to_string(kConstantSamples) + " samples (0.455 +/- 0.02)";
  return o;
}

RunConfig variant(RunConfig cfg, const std::string& name) {
  AblationFlags f;
  if (name == "individual_a") f = {.individual_a = true, .d_specific = false, .dep_a_to_b = false, .dep_b_to_a = false};
  if (name == "individual_b") f = {.individual_b = true, .d_specific = false, .dep_a_to_b = false, .dep_b_to_a = false};
  if (name == "joint_baseline") {
    f = {.joint_baseline = true, .d_specific = false, .dep_a_to_b = false, .dep_b_to_a = false};
  }
  if (name == "specific_only") f.dep_a_to_b = f.dep_b_to_a = false;
  cfg.model.ablation = f;
  return cfg;
}

Outcome ablation_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig desk = desk_config();
  const TrainEvalSplit split = holdout_split(desk, load_dataset(desk));
  const std::vector<GradePair> eval_labels = labels_of(split.eval);
  std::map<std::string, std::vector<double>> joint;
  for (std::uint64_t seed : {1, 2, 3}) {
    std::map<std::string, std::vector<Prediction>> preds;
    for (const char* name : {"individual_a", "individual_b", "joint_baseline", "specific_only", "canet"}) {
      RunConfig cfg = variant(desk, name);
      cfg.train.seed = seed;
      const RunOutcome r = run_training(cfg, split.train, split.eval);
      preds[name] = r.eval.predictions;
      if (r.eval.report.joint_accuracy) joint[name].push_back(*r.eval.report.joint_accuracy);
      std::cout << "  seed " << seed << " " << name << ": ";
      if (r.eval.report.joint_accuracy) std::cout << "Joint Ac " << num(*r.eval.report.joint_accuracy);
      if (r.eval.report.a && !r.eval.report.b) std::cout << "Ac a " << num(r.eval.report.a->accuracy);
      if (r.eval.report.b && !r.eval.report.a) std::cout << "Ac b " << num(r.eval.report.b->accuracy);
      std::cout << " (" << num(seconds_since(t0), 0) << " s elapsed)" << std::endl;
    }
    joint["implied_individual"].push_back(
        implied_joint_accuracy(preds["individual_a"], preds["individual_b"], eval_labels));
  }
  const double elapsed = seconds_since(t0);
  const double ind = median(joint["implied_individual"]), base = median(joint["joint_baseline"]);
  const double ds = median(joint["specific_only"]), full = median(joint["canet"]);
  Outcome o;
  const bool c_base = base >= ind, c_ds = ds >= base, c_full_ds = full >= ds - kDsSlack;
  const bool c_full_base = full >= base + kFullMargin, c_time = elapsed < kAblationSeconds;
  o.passed = c_base && c_ds && c_full_ds && c_full_base && c_time;
  auto mark = [](bool ok) { return ok ? "" : " (violated)"; };
  o.summary = "median Joint Ac: individual " + num(ind) + " <= baseline " + num(base) + mark(c_base) +
              " <= d-S " + num(ds) + mark(c_ds) + "; full " + num(full) + " vs d-S - 0.005" + mark(c_full_ds) +
              ", vs baseline + 0.010" + mark(c_full_base) + "; " + num(elapsed, 0) + " s (< 1800 s)" + mark(c_time);
  return o;
}

Outcome lambda_sweep() {
  const RunConfig desk = desk_config();
  const TrainEvalSplit split = holdout_split(desk, load_dataset(desk));
  std::vector<double> scores;
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    RunConfig cfg = desk;
    cfg.model.lambda = lambda;
    cfg.train.seed = 1;
    const RunOutcome r = run_training(cfg, split.train, split.eval);
    scores.push_back(r.eval.report.joint_accuracy.value_or(NAN));
    std::cout << "  lambda " << num(lambda, 2) << ": Joint Ac " << num(scores.back()) << std::endl;
  }
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  Outcome o;
  o.passed = std::all_of(scores.begin(), scores.end(), [](double v) { return std::isfinite(v); }) &&
             *hi - *lo < kLambdaSpread;
  o.summary = "Joint Ac over lambda in {0, 0.25, 0.5, 0.75, 1}: " + num(*lo) + " .. " + num(*hi) + ", spread " +
              num(100 * (*hi - *lo), 2) + " points (< 3)";
  return o;
}

Outcome determinism() {
  RunConfig cfg = desk_config();
  cfg.data.synth_n = 200;
  cfg.train.epochs = 3;
  cfg.train.eval_every = 1;
  cfg.train.seed = 42;
  const TrainEvalSplit split = holdout_split(cfg, load_dataset(cfg));
  const fs::path root = fs::temp_directory_path() / "canet_acceptance_determinism";
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) run_training(cfg, split.train, split.eval, root / run);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  std::size_t compared = 0;
  bool identical = slurp(root / "a" / "history.csv") == slurp(root / "b" / "history.csv");
  ++compared;
  for (const auto& e : fs::directory_iterator(root / "a" / "best")) {
    identical = identical && slurp(e.path()) == slurp(root / "b" / "best" / e.path().filename());
    ++compared;
  }
  const std::size_t files_b = std::distance(fs::directory_iterator(root / "b" / "best"), fs::directory_iterator{});
  identical = identical && files_b + 1 == compared;

  cfg.train.seed = 43;
  run_training(cfg, split.train, split.eval, root / "c");
  const bool seed_matters = slurp(root / "a" / "history.csv") != slurp(root / "c" / "history.csv");
  Outcome o;
  o.passed = identical && seed_matters && compared > 10;
  o.summary = std::to_string(compared) + " files (history.csv + checkpoint) " +
              (identical ? "bit-identical" : "DIFFER") + " across two seeded runs; a different seed " +
              (seed_matters ? "changes" : "DOES NOT change") + " the history";
  return o;
}

Outcome overfit() {
  RunConfig cfg = desk_config();
  const TrainEvalSplit split = holdout_split(cfg, load_dataset(cfg));
  const std::vector<GradingSample> subset(split.train.begin(), split.train.begin() + kOverfitSamples);
  cfg.train.batch_size = kOverfitSamples;
  cfg.train.epochs = kOverfitSteps;  // one step per epoch
  cfg.train.eval_every = 10;
  cfg.train.augment = false;
  cfg.train.seed = 1;
  const RunOutcome r = run_training(cfg, subset, {});
  std::size_t reached_at = 0;
  double best = 0;
  for (const HistoryRow& h : r.train.history) {
    if (!h.eval_joint_ac) continue;
    best = std::max(best, *h.eval_joint_ac);
    if (!reached_at && *h.eval_joint_ac >= kOverfitJointAc) reached_at = h.step;
  }
  Outcome o;
  o.passed = reached_at > 0 && reached_at <= kOverfitSteps;
  o.summary = "train Joint Ac on " + std::to_string(kOverfitSamples) + " samples: best " + num(best) +
              (reached_at ? ", >= 0.95 first at step " + std::to_string(reached_at) : ", never >= 0.95") +
              " (limit " + std::to_string(kOverfitSteps) + " steps)";
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity}, {2, "equation oracles", equation_oracles},
      {3, "attention invariants", attention_invariants}, {4, "metric oracles", metric_oracles},
      {5, "ablation ordering", ablation_ordering},      {6, "lambda sweep", lambda_sweep},
      {7, "determinism", determinism},                  {8, "overfit smoke test", overfit},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.summary
              << std::endl;
  }
  return failed ? 1 : 0;
}
