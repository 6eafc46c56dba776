#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <set>

#include "canet/cant_io.hpp"
#include "canet/ops.hpp"
#include "test_util.hpp"

using namespace canet;
using canet::test::max_rel_err;
using canet::test::numeric_grad;
using canet::test::random_tensor;

namespace {

// Brute-force sliding-window cross-correlation on a single image.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, std::size_t pad,
                          std::size_t stride) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> out({co, ho, wo});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t z = 0; z < wo; ++z) {
        double s = 0;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(z * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += x.at({ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) *
                   k.at({o, ci, i, j});
            }
        out.at({o, y, z}) = s;
      }
  return out;
}

double eval_scalar(const std::function<Var<double>(GradTape<double>&)>& f) {
  GradTape<double> tape;
  return f(tape).value().item();
}

// Analytic gradient of the leaves via the tape.
void run_backward(const std::function<Var<double>(GradTape<double>&)>& f,
                  std::initializer_list<Tensor<double>*> leaves) {
  for (auto* t : leaves) t->grad.clear();
  GradTape<double> tape;
  Var<double> loss = f(tape);
  tape.backward(loss);
}

// Weighted sum makes every output coordinate matter in the FD check.
Var<double> weighted_sum(Var<double> v, std::uint64_t seed) {
  RngState rng(seed);
  Tensor<double> w = random_tensor(v.shape(), rng);
  return sum(mul(v, v.tape->constant(std::move(w))));
}

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
  GradTape<double> tape;
  auto eye = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, m).value().storage(), (std::vector<double>{1, 2, 3, 4}));
  auto r = tape.constant(Tensor<double>({1, 2}, {1, 2}));
  auto c = tape.constant(Tensor<double>({2, 1}, {3, 4}));
  EXPECT_DOUBLE_EQ(matmul(r, c).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  GradTape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] and [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  RngState rng(1);
  Tensor<double> a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  auto f = [&](GradTape<double>& t) { return sum(matmul(t.leaf(a), t.leaf(b))); };
  run_backward(f, {&a, &b});
  EXPECT_LT(max_rel_err(a.grad, numeric_grad([&] { return eval_scalar(f); }, a)), 1e-6);
  EXPECT_LT(max_rel_err(b.grad, numeric_grad([&] { return eval_scalar(f); }, b)), 1e-6);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  RngState rng(2);
  Tensor<double> x = random_tensor({3, 6}, rng), w = random_tensor({4, 6}, rng),
                 b = random_tensor({4}, rng);
  auto f = [&](GradTape<double>& t) {
    return weighted_sum(linear(t.leaf(x), t.leaf(w), t.leaf(b)), 7);
  };
  run_backward(f, {&x, &w, &b});
  for (Tensor<double>* p : {&x, &w, &b}) {
    EXPECT_LT(max_rel_err(p->grad, numeric_grad([&] { return eval_scalar(f); }, *p)), 1e-6);
  }
}

TEST(Conv2d, OnesKernelWithPaddingCountsNeighbours) {
  GradTape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto k = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  const Tensor<double>& y = conv2d(x, k, std::nullopt, {1, 1, 1, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  // Brute-force oracle agrees on every position.
  Tensor<double> ref = naive_conv(Tensor<double>({1, 3, 3}, 1.0), Tensor<double>({1, 1, 3, 3}, 1.0), 1, 1);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], ref[i]);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 1, 1}), 9.0);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 0, 0}), 4.0);
  EXPECT_DOUBLE_EQ(y.at({0, 0, 2, 2}), 4.0);
}

TEST(Conv2d, ZeroKernelAnnihilates) {
  RngState rng(3);
  GradTape<double> tape;
  auto x = tape.constant(random_tensor({2, 3, 5, 5}, rng));
  auto k = tape.constant(Tensor<double>({4, 3, 3, 3}));
  for (double v : conv2d(x, k, std::nullopt, {1, 1, 2, 2}).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesBruteForceOnRandomConfigurations) {
  RngState rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 1 + rng.below(3), co = 1 + rng.below(3), h = 3 + rng.below(6),
                      w = 3 + rng.below(6), kk = 1 + 2 * rng.below(2), pad = rng.below(2),
                      stride = 1 + rng.below(2);
    Tensor<double> x = random_tensor({c, h, w}, rng), k = random_tensor({co, c, kk, kk}, rng);
    GradTape<double> tape;
    const Tensor<double>& y =
        conv2d(tape.constant(x), tape.constant(k), std::nullopt, {pad, pad, stride, stride}).value();
    Tensor<double> ref = naive_conv(x, k, pad, stride);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  RngState rng(5);
  Tensor<double> x = random_tensor({2, 3, 8, 8}, rng), k = random_tensor({4, 3, 3, 3}, rng),
                 b = random_tensor({4}, rng);
  auto f = [&](GradTape<double>& t) {
    return weighted_sum(conv2d(t.leaf(x), t.leaf(k), t.leaf(b), {1, 1, 1, 1}), 11);
  };
  run_backward(f, {&x, &k, &b});
  for (Tensor<double>* p : {&x, &k, &b}) {
    EXPECT_LT(max_rel_err(p->grad, numeric_grad([&] { return eval_scalar(f); }, *p)), 1e-5);
  }
  // Strided, unpadded variant.
  auto g = [&](GradTape<double>& t) {
    return weighted_sum(conv2d(t.leaf(x), t.leaf(k), t.leaf(b), {0, 0, 2, 2}), 12);
  };
  run_backward(g, {&x, &k, &b});
  for (Tensor<double>* p : {&x, &k, &b}) {
    EXPECT_LT(max_rel_err(p->grad, numeric_grad([&] { return eval_scalar(g); }, *p)), 1e-5);
  }
}

TEST(Conv2d, NonPositiveExtentIsDimensionError) {
  GradTape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2, 2}));
  auto k = tape.constant(Tensor<double>({1, 1, 5, 5}));
  EXPECT_THROW(conv2d(x, k, std::nullopt, {}), DimensionError);
  auto k2 = tape.constant(Tensor<double>({1, 3, 1, 1}));
  EXPECT_THROW(conv2d(x, k2, std::nullopt, {}), DimensionError);
}

TEST(Pool, HandExamples) {
  GradTape<double> tape;
  auto c = tape.constant(Tensor<double>({1, 2, 2}, 5.0));
  EXPECT_EQ(pool(c, PoolMode::global_avg).value().storage(), std::vector<double>{5.0});
  auto st = tape.constant(Tensor<double>({2, 1, 1}, {1, 3}));
  const auto& cm = pool(st, PoolMode::channel_max).value();
  EXPECT_EQ(cm.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(cm[0], 3.0);
  auto sq = tape.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  const auto& sa = pool(sq, PoolMode::spatial_avg, PoolWindow{2, 2}).value();
  EXPECT_EQ(sa.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(sa[0], 2.5);
  EXPECT_DOUBLE_EQ(pool(sq, PoolMode::spatial_max, PoolWindow{2, 2}).value()[0], 4.0);
}

TEST(Pool, ShapesOfEveryMode) {
  GradTape<double> tape;
  auto x = tape.constant(Tensor<double>({2, 3, 4, 6}, 1.0));
  EXPECT_EQ(pool(x, PoolMode::global_max).shape(), (Shape{2, 3}));
  EXPECT_EQ(pool(x, PoolMode::global_avg).shape(), (Shape{2, 3}));
  EXPECT_EQ(pool(x, PoolMode::channel_avg).shape(), (Shape{2, 1, 4, 6}));
  EXPECT_EQ(pool(x, PoolMode::spatial_max, PoolWindow{2, 3}).shape(), (Shape{2, 3, 2, 2}));
  EXPECT_THROW(pool(x, PoolMode::spatial_avg, PoolWindow{5, 2}), DimensionError);
  EXPECT_THROW(pool(x, PoolMode::spatial_avg), ParameterError);
}

TEST(Pool, MaxRoutesGradientToFirstMaximum) {
  Tensor<double> x({1, 2, 2}, {2, 7, 7, 1});
  GradTape<double> tape;
  auto out = pool(tape.leaf(x), PoolMode::global_max);
  tape.backward(sum(out));
  EXPECT_EQ(x.grad, (std::vector<double>{0, 1, 0, 0}));
}

TEST(Pool, GradientsMatchFiniteDifferences) {
  RngState rng(6);
  // Distinct values keep max pooling away from ties.
  Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
  for (PoolMode mode : {PoolMode::global_avg, PoolMode::global_max, PoolMode::channel_avg,
                        PoolMode::channel_max, PoolMode::spatial_avg, PoolMode::spatial_max}) {
    auto f = [&](GradTape<double>& t) {
      return weighted_sum(pool(t.leaf(x), mode, PoolWindow{2, 2}), 13);
    };
    run_backward(f, {&x});
    EXPECT_LT(max_rel_err(x.grad, numeric_grad([&] { return eval_scalar(f); }, x)), 1e-5);
  }
}

TEST(Elementwise, DefinitionsAndBroadcast) {
  GradTape<double> tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape.constant(Tensor<double>({1}, 0.0))).value()[0], 0.5);
  auto r = relu(tape.constant(Tensor<double>({3}, {-1, 0, 2})));
  EXPECT_EQ(r.value().storage(), (std::vector<double>{0, 0, 2}));
  auto vec = tape.constant(Tensor<double>({2}, {2, 3}));
  auto feat = tape.constant(Tensor<double>({2, 1, 1}, 1.0));
  auto m = mul(vec, feat);
  EXPECT_EQ(m.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(m.value().storage(), (std::vector<double>{2, 3}));
  auto bad = tape.constant(Tensor<double>({3}));
  EXPECT_THROW(add(bad, feat), DimensionError);
}

TEST(Elementwise, SigmoidStaysInsideOpenInterval) {
  GradTape<float> tape;
  auto s = sigmoid(tape.constant(Tensor<float>({4}, {-200.f, -30.f, 30.f, 200.f})));
  for (float v : s.value().data()) {
    EXPECT_GT(v, 0.f);
    EXPECT_LT(v, 1.f);
  }
}

TEST(Elementwise, BroadcastBackwardSumsOverBroadcastDims) {
  RngState rng(7);
  Tensor<double> f = random_tensor({2, 3, 4, 4}, rng);
  Tensor<double> channel = random_tensor({2, 3}, rng);
  Tensor<double> spatial = random_tensor({2, 1, 4, 4}, rng);
  for (bool use_channel : {true, false}) {
    Tensor<double>& g = use_channel ? channel : spatial;
    for (bool is_add : {true, false}) {
      auto fn = [&](GradTape<double>& t) {
        auto a = t.leaf(f), b = t.leaf(g);
        return weighted_sum(is_add ? add(b, a) : mul(a, b), 17);
      };
      run_backward(fn, {&f, &g});
      EXPECT_LT(max_rel_err(g.grad, numeric_grad([&] { return eval_scalar(fn); }, g)), 1e-6);
      EXPECT_LT(max_rel_err(f.grad, numeric_grad([&] { return eval_scalar(fn); }, f)), 1e-6);
    }
  }
}

TEST(Elementwise, ReluAndSigmoidGradients) {
  RngState rng(8);
  Tensor<double> x = canet::test::random_away_from_zero({3, 5}, rng);
  auto f = [&](GradTape<double>& t) { return weighted_sum(sigmoid(relu(t.leaf(x))), 19); };
  run_backward(f, {&x});
  EXPECT_LT(max_rel_err(x.grad, numeric_grad([&] { return eval_scalar(f); }, x)), 1e-6);
  // Subgradient 0 at exactly 0.
  Tensor<double> z({1}, 0.0);
  GradTape<double> tape;
  tape.backward(sum(relu(tape.leaf(z))));
  EXPECT_EQ(z.grad[0], 0.0);
}

TEST(Concat, ShapeLawIdentityAndErrors) {
  GradTape<double> tape;
  auto a = tape.constant(Tensor<double>({1, 4, 4}, 1.0));
  auto b = tape.constant(Tensor<double>({1, 4, 4}, 2.0));
  const Var<double> ab[] = {a, b};
  EXPECT_EQ(concat<double>(ab, 0).shape(), (Shape{2, 4, 4}));
  const Var<double> single[] = {a};
  auto same = concat<double>(single, 0);
  EXPECT_EQ(same.value().storage(), a.value().storage());
  auto c = tape.constant(Tensor<double>({1, 3, 4}));
  const Var<double> ac[] = {a, c};
  EXPECT_THROW(concat<double>(ac, 0), DimensionError);
}

TEST(Concat, ZeroPaddedChannelIsInvisibleToConv) {
  RngState rng(9);
  Tensor<double> x = random_tensor({1, 5, 5}, rng);
  Tensor<double> k1 = random_tensor({2, 1, 3, 3}, rng);
  Tensor<double> k2({2, 2, 3, 3});
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 9; ++i) k2[o * 18 + i] = k1[o * 9 + i];  // second slice stays zero
  GradTape<double> tape;
  auto xv = tape.constant(x);
  const Var<double> parts[] = {xv, tape.constant(Tensor<double>({1, 5, 5}))};
  const auto& lhs = conv2d(concat<double>(parts, 0), tape.constant(k2), std::nullopt, {1, 1, 1, 1}).value();
  const auto& rhs = conv2d(xv, tape.constant(k1), std::nullopt, {1, 1, 1, 1}).value();
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
}

TEST(Concat, GradientMatchesFiniteDifferences) {
  RngState rng(10);
  Tensor<double> a = random_tensor({2, 1, 3, 3}, rng), b = random_tensor({2, 2, 3, 3}, rng);
  auto f = [&](GradTape<double>& t) {
    const Var<double> xs[] = {t.leaf(a), t.leaf(b)};
    return weighted_sum(concat<double>(xs, 1), 23);
  };
  run_backward(f, {&a, &b});
  EXPECT_LT(max_rel_err(a.grad, numeric_grad([&] { return eval_scalar(f); }, a)), 1e-6);
  EXPECT_LT(max_rel_err(b.grad, numeric_grad([&] { return eval_scalar(f); }, b)), 1e-6);
}

TEST(Dropout, InferenceAndZeroRateAreIdentity) {
  RngState rng(11);
  GradTape<double> tape;
  auto x = tape.constant(random_tensor({4, 4}, rng));
  EXPECT_EQ(dropout(x, 0.0, rng, true).value().storage(), x.value().storage());
  EXPECT_EQ(dropout(x, 0.7, rng, false).value().storage(), x.value().storage());
  EXPECT_THROW(dropout(x, 1.0, rng, true), ParameterError);
  EXPECT_THROW(dropout(x, -0.1, rng, true), ParameterError);
}

TEST(Dropout, InvertedScalingPreservesMean) {
  RngState rng(12);
  GradTape<float> tape;
  auto x = tape.constant(Tensor<float>({1000000}, 1.0f));
  const auto& y = dropout(x, 0.3, rng, true).value();
  double mean = 0;
  std::size_t zeros = 0;
  for (float v : y.data()) {
    mean += v;
    zeros += v == 0.f;
  }
  mean /= 1e6;
  EXPECT_GE(mean, 0.995);
  EXPECT_LE(mean, 1.005);
  EXPECT_NEAR(zeros / 1e6, 0.3, 0.005);
}

TEST(Dropout, SameRngStateGivesBitIdenticalMasks) {
  RngState a(99), b(99);
  GradTape<float> t1, t2;
  auto x1 = t1.constant(Tensor<float>({257}, 1.0f));
  auto x2 = t2.constant(Tensor<float>({257}, 1.0f));
  EXPECT_EQ(dropout(x1, 0.3, a, true).value().storage(), dropout(x2, 0.3, b, true).value().storage());
  EXPECT_EQ(a, b);
}

TEST(SoftmaxCrossEntropy, UniformSaturationAndRange) {
  GradTape<double> tape;
  const int label[] = {1};
  auto uniform = tape.constant(Tensor<double>({1, 3}, 0.0));
  EXPECT_NEAR(softmax_cross_entropy<double>(uniform, label).value().item(), std::log(3.0), 1e-12);
  const int zero[] = {0};
  auto sat = tape.constant(Tensor<double>({1, 2}, {50.0, 0.0}));
  EXPECT_LT(softmax_cross_entropy<double>(sat, zero).value().item(), 1e-9);
  const int bad[] = {3};
  EXPECT_THROW(softmax_cross_entropy<double>(uniform, bad), DataError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  RngState rng(13);
  Tensor<double> logits = random_tensor({4, 5}, rng, -2, 2);
  const int labels[] = {0, 4, 2, 2};
  auto f = [&](GradTape<double>& t) { return softmax_cross_entropy<double>(t.leaf(logits), labels); };
  run_backward(f, {&logits});
  EXPECT_LT(max_rel_err(logits.grad, numeric_grad([&] { return eval_scalar(f); }, logits)), 1e-6);
}

TEST(SoftmaxCrossEntropy, RowsSumToOne) {
  RngState rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> p = softmax_rows(random_tensor({3, 2 + rng.below(6)}, rng, -20, 20));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < p.dim(1); ++c) s += p.at({r, c});
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Backward, SimpleGradients) {
  Tensor<double> x({3}, {1, 2, 3});
  {
    GradTape<double> tape;
    tape.backward(sum(tape.leaf(x)));
    EXPECT_EQ(x.grad, (std::vector<double>{1, 1, 1}));
  }
  Tensor<double> y({2}, {1, 2});
  GradTape<double> tape;
  auto v = tape.leaf(y);
  tape.backward(sum(mul(v, v)));
  EXPECT_EQ(y.grad, (std::vector<double>{2, 4}));
}

TEST(Backward, ReusedParameterAccumulatesBranchGradients) {
  RngState rng(15);
  Tensor<double> w = random_tensor({3, 3}, rng);
  Tensor<double> x1 = random_tensor({2, 3}, rng), x2 = random_tensor({4, 3}, rng);
  auto branch1 = [&](GradTape<double>& t) { return sum(sigmoid(linear(t.constant(x1), t.leaf(w)))); };
  auto branch2 = [&](GradTape<double>& t) { return sum(relu(linear(t.constant(x2), t.leaf(w)))); };
  auto both = [&](GradTape<double>& t) { return add(branch1(t), branch2(t)); };
  run_backward(both, {&w});
  const std::vector<double> g1 = numeric_grad([&] { return eval_scalar(branch1); }, w);
  const std::vector<double> g2 = numeric_grad([&] { return eval_scalar(branch2); }, w);
  std::vector<double> expected(g1.size());
  for (std::size_t i = 0; i < g1.size(); ++i) expected[i] = g1[i] + g2[i];
  EXPECT_LT(max_rel_err(w.grad, expected), 1e-6);
}

TEST(Backward, SymmetricReuseScalesGradient) {
  RngState rng(16);
  Tensor<double> theta = random_tensor({5}, rng);
  std::vector<double> single;
  for (int k : {1, 3}) {
    GradTape<double> tape;
    auto v = tape.leaf(theta);
    Var<double> acc = sum(sigmoid(v));
    for (int i = 1; i < k; ++i) acc = add(acc, sum(sigmoid(v)));
    theta.grad.clear();
    tape.backward(acc);
    if (k == 1) {
      single = theta.grad;
    } else {
      for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(theta.grad[i], 3 * single[i], 1e-14);
    }
  }
}

TEST(Backward, UsageErrorsAndZeroGradForUnusedLeaves) {
  Tensor<double> x({2}, {1, 2}), unused({3}, 1.0);
  GradTape<double> tape;
  auto v = tape.leaf(x);
  tape.leaf(unused);
  EXPECT_THROW(tape.backward(mul(v, v)), UsageError);  // non-scalar
  auto loss = sum(v);
  tape.backward(loss);
  EXPECT_EQ(unused.grad, (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(tape.backward(loss), UsageError);
}

TEST(Backward, VisitsEachNodeOnceInReverseOrder) {
  Tensor<double> x({2}, {0.3, -0.4});
  GradTape<double> tape;
  auto v = tape.leaf(x);
  auto loss = sum(add(sigmoid(v), mul(v, v)));
  tape.backward(loss);
  const auto& log = tape.visit_log();
  std::set<std::size_t> seen(log.begin(), log.end());
  EXPECT_EQ(seen.size(), log.size());
  EXPECT_TRUE(std::is_sorted(log.rbegin(), log.rend()));
  EXPECT_EQ(log.front(), loss.id);
}

TEST(Tensor, NonFiniteForwardValuesAreSurfaced) {
  GradTape<double> tape;
  auto x = tape.constant(Tensor<double>({2}, {1.0, 2.0}));
  EXPECT_THROW(scale(x, std::numeric_limits<double>::infinity()), NumericalError);
  EXPECT_THROW(tape.constant(Tensor<double>({1}, std::nan(""))), NumericalError);
}

TEST(Properties, ShapeLawsHoldOnRandomShapes) {
  RngState rng(17);
  for (int trial = 0; trial < 250; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(4), h = 1 + rng.below(9),
                      w = 1 + rng.below(9), co = 1 + rng.below(4), kh = 1 + rng.below(3),
                      kw = 1 + rng.below(3), pad = rng.below(2), stride = 1 + rng.below(3);
    GradTape<double> tape;
    auto x = tape.constant(random_tensor({n, c, h, w}, rng));
    auto k = tape.constant(random_tensor({co, c, kh, kw}, rng));
    if (h + 2 * pad >= kh && w + 2 * pad >= kw) {
      auto y = conv2d(x, k, std::nullopt, {pad, pad, stride, stride});
      EXPECT_EQ(y.shape(), (Shape{n, co, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1}));
    } else {
      EXPECT_THROW(conv2d(x, k, std::nullopt, {pad, pad, stride, stride}), DimensionError);
    }
    EXPECT_EQ(pool(x, PoolMode::global_avg).shape(), (Shape{n, c}));
    EXPECT_EQ(pool(x, PoolMode::channel_max).shape(), (Shape{n, 1, h, w}));
    const std::size_t ph = 1 + rng.below(3), pw = 1 + rng.below(3);
    if (ph <= h && pw <= w) {
      EXPECT_EQ(pool(x, PoolMode::spatial_max, PoolWindow{ph, pw}).shape(), (Shape{n, c, h / ph, w / pw}));
    }
    auto other = tape.constant(random_tensor({n, co, h, w}, rng));
    const Var<double> xs[] = {x, other};
    EXPECT_EQ(concat<double>(xs, 1).shape(), (Shape{n, c + co, h, w}));
    auto gate = tape.constant(random_tensor({n, c}, rng));
    EXPECT_EQ(mul(x, gate).shape(), x.shape());
    auto spatial = tape.constant(random_tensor({n, 1, h, w}, rng));
    EXPECT_EQ(mul(spatial, x).shape(), x.shape());
  }
}

TEST(CantFormat, RoundTripIsBitExact) {
  RngState rng(18);
  const auto dir = std::filesystem::temp_directory_path() / "canet_cant_test";
  std::filesystem::create_directories(dir);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape(rng.below(5));
    for (auto& e : shape) e = 1 + rng.below(4);
    Tensor<float> t = random_tensor<float>(shape, rng, -1e3, 1e3);
    const auto path = dir / "t.cant";
    write_cant(path, t);
    Tensor<float> back = read_cant(path);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.storage(), t.storage());
  }
  std::filesystem::remove_all(dir);
}

TEST(CantFormat, HeaderLayout) {
  Tensor<float> t({2, 1}, {1.0f, -2.0f});
  auto bytes = encode_cant(t);
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 8 + 2 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CANT");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 2);  // ndim
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[20], 1);
  // 1.0f = 0x3F800000 little-endian
  EXPECT_EQ(bytes[28], 0x00);
  EXPECT_EQ(bytes[31], 0x3F);
  bytes[0] = 'X';
  EXPECT_THROW(decode_cant(bytes), DataError);
  EXPECT_THROW(read_cant("/nonexistent/file.cant"), DataError);
}

TEST(Rng, DeterministicAndSplittable) {
  RngState a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  RngState c = a.split(1), d = a.split(2);
  EXPECT_NE(c.next_u64(), d.next_u64());
  // Frozen first draws pin the stream across platforms.
  RngState e(0);
  const std::uint64_t first = e.next_u64();
  EXPECT_EQ(first, RngState::mix(0 ^ RngState::mix(0x9E3779B97F4A7C15ULL)));
}
