#include "canet/gradcheck_suite.hpp"

#include <chrono>
#include <functional>

#include "canet/attention.hpp"
#include "canet/model.hpp"
#include "canet/ops.hpp"

namespace canet {

namespace {

constexpr double kOpTol = 1e-5;
constexpr double kCompositeTol = 1e-4;

Tensor<double> random(Shape shape, RngState& rng) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Random entries with |v| ≥ 0.05 so relu kinks stay outside small stencils.
Tensor<double> away_from_zero(Shape shape, RngState& rng) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) {
    const double mag = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

// Contracts an op output against fixed random weights so every output
// coordinate reaches the loss with a distinct coefficient.
Var<double> contract(Var<double> out, GradTape<double>& tape, std::uint64_t seed) {
  RngState rng(seed);
  return sum(mul(out, tape.constant(random(out.shape(), rng))));
}

class Suite {
 public:
  explicit Suite(const SuiteOptions& opt) : opt_(opt), rng_(opt.seed) {}

  void check(const std::string& op, double tol, const ScalarProgram& f, const std::vector<NamedParam>& params,
           GradCheckOptions gc = {}) {
    gc.tol = tol;
    gc.seed = opt_.seed;
    const auto t0 = std::chrono::steady_clock::now();
    SuiteEntry e;
    e.op = op;
    e.tol = tol;
    e.report = grad_check(f, params, gc);
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    entries_.push_back(std::move(e));
  }

  std::vector<SuiteEntry> run() {
    auto& rng = rng_;
    const std::uint64_t w = opt_.seed + 101;

    Tensor<double> a = random({3, 4}, rng), b = random({4, 5}, rng);
    check("matmul", kOpTol, [&](GradTape<double>& t) { return contract(matmul(t.leaf(a), t.leaf(b)), t, w); },
        {{"a", &a}, {"b", &b}});

    Tensor<double> lx = random({4, 6}, rng), lw = random({3, 6}, rng), lb = random({3}, rng);
    check("linear", kOpTol,
        [&](GradTape<double>& t) { return contract(linear<double>(t.leaf(lx), t.leaf(lw), t.leaf(lb)), t, w); },
        {{"x", &lx}, {"w", &lw}, {"bias", &lb}});

    Tensor<double> cx = random({2, 3, 7, 6}, rng), ck = random({4, 3, 3, 3}, rng), cb = random({4}, rng);
    check("conv2d", kOpTol,
        [&](GradTape<double>& t) {
          return contract(conv2d<double>(t.leaf(cx), t.leaf(ck), t.leaf(cb), Conv2dOptions{1, 1, 2, 2}), t, w);
        },
        {{"x", &cx}, {"kernel", &ck}, {"bias", &cb}});

    const std::pair<const char*, PoolMode> pools[] = {
        {"pool.spatial_max", PoolMode::spatial_max}, {"pool.spatial_avg", PoolMode::spatial_avg},
        {"pool.global_max", PoolMode::global_max},   {"pool.global_avg", PoolMode::global_avg},
        {"pool.channel_max", PoolMode::channel_max}, {"pool.channel_avg", PoolMode::channel_avg}};
    for (const auto& [name, mode] : pools) {
      auto px = std::make_shared<Tensor<double>>(random({2, 3, 4, 4}, rng));
      const bool windowed = mode == PoolMode::spatial_max || mode == PoolMode::spatial_avg;
      check(name, kOpTol,
          [&, px, mode, windowed](GradTape<double>& t) {
            return contract(windowed ? pool(t.leaf(*px), mode, PoolWindow{2, 2}) : pool(t.leaf(*px), mode), t, w);
          },
          {{"x", px.get()}});
    }

    Tensor<double> ea = away_from_zero({3, 4}, rng), eb = random({3, 1}, rng);
    check("elementwise.add", kOpTol, [&](GradTape<double>& t) { return contract(add(t.leaf(ea), t.leaf(eb)), t, w); },
        {{"a", &ea}, {"b", &eb}});
    check("elementwise.mul", kOpTol, [&](GradTape<double>& t) { return contract(mul(t.leaf(ea), t.leaf(eb)), t, w); },
        {{"a", &ea}, {"b", &eb}});
    check("elementwise.relu", kOpTol, [&](GradTape<double>& t) { return contract(relu(t.leaf(ea)), t, w); },
        {{"a", &ea}});
    check("elementwise.sigmoid", kOpTol, [&](GradTape<double>& t) { return contract(sigmoid(t.leaf(ea)), t, w); },
        {{"a", &ea}});
    check("scale", kOpTol, [&](GradTape<double>& t) { return contract(scale(t.leaf(ea), -1.7), t, w); },
        {{"a", &ea}});
    check("sum", kOpTol, [&](GradTape<double>& t) { return sum(mul(t.leaf(ea), t.leaf(ea))); }, {{"a", &ea}});
    check("reshape", kOpTol, [&](GradTape<double>& t) { return contract(reshape(t.leaf(ea), {2, 6}), t, w); },
        {{"a", &ea}});

    Tensor<double> k1 = random({2, 3}, rng), k2 = random({2, 2}, rng);
    check("concat", kOpTol,
        [&](GradTape<double>& t) {
          const Var<double> parts[] = {t.leaf(k1), t.leaf(k2)};
          return contract(concat<double>(parts, 1), t, w);
        },
        {{"a", &k1}, {"b", &k2}});

    Tensor<double> dx = random({4, 5}, rng);
    check("dropout", kOpTol,
        [&](GradTape<double>& t) {
          RngState mask(opt_.seed + 7);  // same mask on every evaluation
          return contract(dropout(t.leaf(dx), 0.3, mask, true), t, w);
        },
        {{"x", &dx}});

    Tensor<double> logits = random({4, 5}, rng);
    const std::vector<int> labels{0, 3, 4, 1};
    check("softmax_cross_entropy", kOpTol,
        [&](GradTape<double>& t) { return softmax_cross_entropy(t.leaf(logits), labels); }, {{"logits", &logits}});

    auto sp = SpecificAttentionParams<double>::init(8, 4, 3, true, rng);
    for (Tensor<double>* bias : {&sp.w0_bias, &sp.w1_bias, &sp.conv_bias}) *bias = random(bias->shape(), rng);
    Tensor<double> f = random({2, 8, 5, 5}, rng);
    std::vector<NamedParam> sparams = sp.named("specific");
    sparams.push_back({"f", &f});
    check("attention.channel", kCompositeTol,
        [&](GradTape<double>& t) { return contract(channel_attention(t.leaf(f), sp), t, w); }, sparams);
    check("attention.spatial", kCompositeTol,
        [&](GradTape<double>& t) { return contract(spatial_attention(t.leaf(f), sp), t, w); }, sparams);
    check("attention.specific_block", kCompositeTol,
        [&](GradTape<double>& t) { return contract(disease_specific_forward(t.leaf(f), sp).features, t, w); },
        sparams);

    auto dp = DependentAttentionParams<double>::init(12, 4, true, rng);
    for (Tensor<double>* bias : {&dp.w0_bias, &dp.w1_bias}) *bias = random(bias->shape(), rng);
    Tensor<double> gs = random({3, 12}, rng), gd = random({3, 12}, rng);
    std::vector<NamedParam> dparams = dp.named("dependent");
    dparams.push_back({"g_src", &gs});
    check("attention.dependent", kCompositeTol,
        [&](GradTape<double>& t) { return contract(dependent_attention(t.leaf(gs), dp), t, w); }, dparams);
    dparams.push_back({"g_dst", &gd});
    check("attention.dependent_fuse", kCompositeTol,
        [&](GradTape<double>& t) {
          const Var<double> src = t.leaf(gs);
          return contract(dependent_fuse(t.leaf(gd), dependent_attention(src, dp), src), t, w);
        },
        dparams);

    if (opt_.include_model) run_model();
    return std::move(entries_);
  }

 private:
  void run_model() {
    CanetConfig cfg;
    cfg.backbone.widths = {16};
    cfg.backbone.strides = {2};
    cfg.backbone.in_channels = 8;
    cfg.proj_dim = 32;
    cfg.reduction = 4;
    cfg.spatial_kernel = 3;
    RngState init = rng_.split(99);
    auto p = CanetParams<double>::init(cfg, init);
    // Non-zero biases exercise every bias gradient path.
    for (ParamRef<double>& ref : p.named_parameters()) {
      if (ref.name.ends_with("bias")) *ref.tensor = random(ref.tensor->shape(), init);
    }
    Tensor<double> x = random({2, 8, 16, 16}, init);
    const std::vector<int> la{0, 1}, lb{2, 0};
    check("canet.joint_loss", kCompositeTol,
        [&](GradTape<double>& t) {
          RngState unused(0);
          return joint_loss(canet_forward(t.constant(x), p, cfg, unused), std::span<const int>(la),
                            std::span<const int>(lb), cfg.lambda);
        },
        p.named_parameters(), GradCheckOptions{.eps = 1e-4, .max_coords = opt_.model_coords});
  }

  SuiteOptions opt_;
  RngState rng_;
  std::vector<SuiteEntry> entries_;
};

}  // namespace

std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opt) { return Suite(opt).run(); }

}  // namespace canet
