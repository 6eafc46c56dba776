#include "canet/attention.hpp"

#include <atomic>
#include <cmath>

namespace canet {

namespace testing {
namespace {
std::atomic<bool> g_fuse_sign_flip{false};
}
void set_dependent_fuse_sign_flip(bool on) { g_fuse_sign_flip.store(on); }
bool dependent_fuse_sign_flip() { return g_fuse_sign_flip.load(); }
}  // namespace testing

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, RngState& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

namespace {

void check_reduction(std::size_t width, std::size_t reduction, const char* what) {
  if (reduction == 0 || width == 0 || width % reduction != 0) {
    throw ParameterError(std::string(what) + ": reduction " + std::to_string(reduction) +
                         " must divide width " + std::to_string(width));
  }
}

// Shared two-layer MLP with ReLU between layers; x is [N × width].
template <typename T>
Var<T> mlp(Var<T> x, Tensor<T>& w0, Tensor<T>& b0, Tensor<T>& w1, Tensor<T>& b1, bool bias) {
  GradTape<T>& tape = *x.tape;
  std::optional<Var<T>> bias0, bias1;
  if (bias) {
    bias0 = tape.leaf(b0);
    bias1 = tape.leaf(b1);
  }
  Var<T> h = relu(linear(x, tape.leaf(w0), bias0));
  return linear(h, tape.leaf(w1), bias1);
}

// Views a [C] / [N×C] vector as [N×C] for the MLP and returns the restore shape.
template <typename T>
Var<T> as_rows(Var<T> v, std::size_t width, const char* what) {
  const Shape& s = v.shape();
  if (s.size() == 1 && s[0] == width) return reshape(v, Shape{1, width});
  if (s.size() == 2 && s[1] == width) return v;
  throw DimensionError(std::string(what) + ": input " + shape_str(s) + " does not match width " +
                       std::to_string(width));
}

}  // namespace

template <typename T>
SpecificAttentionParams<T> SpecificAttentionParams<T>::zeros(std::size_t channels,
                                                             std::size_t reduction,
                                                             std::size_t kernel, bool mlp_bias) {
  SpecificAttentionParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.kernel = kernel;
  p.mlp_bias = mlp_bias;
  check_reduction(channels, reduction, "specific attention");
  const std::size_t h = channels / reduction;
  p.w0 = Tensor<T>({h, channels});
  p.w0_bias = Tensor<T>({h});
  p.w1 = Tensor<T>({channels, h});
  p.w1_bias = Tensor<T>({channels});
  p.conv = Tensor<T>({1, 2, kernel, kernel});
  p.conv_bias = Tensor<T>({1});
  p.validate();
  return p;
}

template <typename T>
SpecificAttentionParams<T> SpecificAttentionParams<T>::init(std::size_t channels,
                                                            std::size_t reduction,
                                                            std::size_t kernel, bool mlp_bias,
                                                            RngState& rng) {
  SpecificAttentionParams p = zeros(channels, reduction, kernel, mlp_bias);
  const std::size_t h = p.hidden();
  p.w0 = kaiming_uniform<T>({h, channels}, channels, rng);
  p.w1 = kaiming_uniform<T>({channels, h}, h, rng);
  p.conv = kaiming_uniform<T>({1, 2, kernel, kernel}, 2 * kernel * kernel, rng);
  return p;
}

template <typename T>
void SpecificAttentionParams<T>::validate() const {
  check_reduction(channels, reduction, "specific attention");
  if (kernel % 2 == 0) {
    throw ParameterError("specific attention: spatial kernel size must be odd, got " +
                         std::to_string(kernel));
  }
  const std::size_t h = hidden();
  if (w0.shape() != Shape{h, channels} || w1.shape() != Shape{channels, h} ||
      conv.shape() != Shape{1, 2, kernel, kernel} || w0_bias.shape() != Shape{h} ||
      w1_bias.shape() != Shape{channels} || conv_bias.shape() != Shape{1}) {
    throw DimensionError("specific attention: parameter shapes inconsistent with C=" +
                         std::to_string(channels) + ", reduction=" + std::to_string(reduction));
  }
}

template <typename T>
std::vector<ParamRef<T>> SpecificAttentionParams<T>::named(const std::string& prefix) {
  std::vector<ParamRef<T>> out{{prefix + ".w0", &w0}, {prefix + ".w1", &w1}};
  if (mlp_bias) {
    out.push_back({prefix + ".w0.bias", &w0_bias});
    out.push_back({prefix + ".w1.bias", &w1_bias});
  }
  out.push_back({prefix + ".conv", &conv});
  out.push_back({prefix + ".conv.bias", &conv_bias});
  return out;
}

template <typename T>
DependentAttentionParams<T> DependentAttentionParams<T>::zeros(std::size_t dim,
                                                               std::size_t reduction,
                                                               bool mlp_bias) {
  DependentAttentionParams p;
  p.dim = dim;
  p.reduction = reduction;
  p.mlp_bias = mlp_bias;
  check_reduction(dim, reduction, "dependent attention");
  const std::size_t h = dim / reduction;
  p.w0 = Tensor<T>({h, dim});
  p.w0_bias = Tensor<T>({h});
  p.w1 = Tensor<T>({dim, h});
  p.w1_bias = Tensor<T>({dim});
  return p;
}

template <typename T>
DependentAttentionParams<T> DependentAttentionParams<T>::init(std::size_t dim,
                                                              std::size_t reduction,
                                                              bool mlp_bias, RngState& rng) {
  DependentAttentionParams p = zeros(dim, reduction, mlp_bias);
  const std::size_t h = p.hidden();
  p.w0 = kaiming_uniform<T>({h, dim}, dim, rng);
  p.w1 = kaiming_uniform<T>({dim, h}, h, rng);
  return p;
}

template <typename T>
void DependentAttentionParams<T>::validate() const {
  check_reduction(dim, reduction, "dependent attention");
  const std::size_t h = hidden();
  if (w0.shape() != Shape{h, dim} || w1.shape() != Shape{dim, h} || w0_bias.shape() != Shape{h} ||
      w1_bias.shape() != Shape{dim}) {
    throw DimensionError("dependent attention: parameter shapes inconsistent with D=" +
                         std::to_string(dim) + ", reduction=" + std::to_string(reduction));
  }
}

template <typename T>
std::vector<ParamRef<T>> DependentAttentionParams<T>::named(const std::string& prefix) {
  std::vector<ParamRef<T>> out{{prefix + ".w0", &w0}, {prefix + ".w1", &w1}};
  if (mlp_bias) {
    out.push_back({prefix + ".w0.bias", &w0_bias});
    out.push_back({prefix + ".w1.bias", &w1_bias});
  }
  return out;
}

template <typename T>
Var<T> channel_attention(Var<T> f, SpecificAttentionParams<T>& p) {
  const Shape& s = f.shape();
  const bool batched = s.size() == 4;
  if ((s.size() != 3 && s.size() != 4) || s[batched ? 1 : 0] != p.channels) {
    throw DimensionError("channel_attention: input " + shape_str(s) + " does not match C=" +
                         std::to_string(p.channels));
  }
  Var<T> avg = as_rows(pool(f, PoolMode::global_avg), p.channels, "channel_attention");
  Var<T> mx = as_rows(pool(f, PoolMode::global_max), p.channels, "channel_attention");
  Var<T> logits = add(mlp(avg, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias),
                      mlp(mx, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias));
  Var<T> gate = sigmoid(logits);
  return batched ? gate : reshape(gate, Shape{p.channels});
}

template <typename T>
Var<T> apply_channel(Var<T> a_c, Var<T> f) {
  const Shape& s = f.shape();
  const Shape& a = a_c.shape();
  const bool ok = (s.size() == 3 && a == Shape{s[0]}) ||
                  (s.size() == 4 && a == Shape{s[0], s[1]});
  if (!ok) {
    throw DimensionError("apply_channel: gate " + shape_str(a) + " does not match features " +
                         shape_str(s));
  }
  return mul(f, a_c);
}

template <typename T>
Var<T> spatial_attention(Var<T> f_i, SpecificAttentionParams<T>& p) {
  const Shape& s = f_i.shape();
  if (s.size() != 3 && s.size() != 4) {
    throw DimensionError("spatial_attention: expected C×H×W or N×C×H×W, got " + shape_str(s));
  }
  if (p.kernel % 2 == 0) throw ParameterError("spatial_attention: kernel size must be odd");
  const std::size_t channel_axis = s.size() == 4 ? 1 : 0;
  const Var<T> maps[] = {pool(f_i, PoolMode::channel_avg), pool(f_i, PoolMode::channel_max)};
  Var<T> stacked = concat<T>(maps, channel_axis);
  GradTape<T>& tape = *f_i.tape;
  const std::size_t pad = (p.kernel - 1) / 2;
  Var<T> logits = conv2d<T>(stacked, tape.leaf(p.conv), tape.leaf(p.conv_bias),
                         Conv2dOptions{pad, pad, 1, 1});
  return sigmoid(logits);
}

template <typename T>
SpecificAttentionOutput<T> disease_specific_forward(Var<T> f, SpecificAttentionParams<T>& p) {
  Var<T> a_c = channel_attention(f, p);
  Var<T> f_i = apply_channel(a_c, f);
  Var<T> a_s = spatial_attention(f_i, p);
  return {a_c, a_s, mul(f_i, a_s)};
}

template <typename T>
Var<T> dependent_attention(Var<T> g_src, DependentAttentionParams<T>& p) {
  const bool batched = g_src.shape().size() == 2;
  Var<T> rows = as_rows(g_src, p.dim, "dependent_attention");
  Var<T> gate = sigmoid(mlp(rows, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias));
  return batched ? gate : reshape(gate, Shape{p.dim});
}

template <typename T>
Var<T> dependent_fuse(Var<T> g_dst, Var<T> a, Var<T> g_src) {
  if (g_dst.shape() != a.shape() || g_dst.shape() != g_src.shape()) {
    throw DimensionError("dependent_fuse: extents differ: " + shape_str(g_dst.shape()) + ", " +
                         shape_str(a.shape()) + ", " + shape_str(g_src.shape()));
  }
  if (g_dst.tape != a.tape || g_dst.tape != g_src.tape) {
    throw UsageError("dependent_fuse: operands recorded on different tapes");
  }
  const Tensor<T>& D = g_dst.value();
  const Tensor<T>& A = a.value();
  const Tensor<T>& S = g_src.value();
  Tensor<T> out(D.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = D[i] + A[i] * S[i];
  const T gate_sign = testing::dependent_fuse_sign_flip() ? T{-1} : T{1};
  return g_dst.tape->record(
      "dependent_fuse", {g_dst.id, a.id, g_src.id}, std::move(out),
      [gate_sign, id = g_dst.id, ia = a.id, is = g_src.id](GradTape<T>& t, std::size_t self) {
        const std::vector<T>& g = t.grad(self);
        const auto av = t.value(ia).data();
        const auto sv = t.value(is).data();
        if (t.needs_grad(id)) {
          std::vector<T>& gd = t.grad(id);
          for (std::size_t i = 0; i < g.size(); ++i) gd[i] += g[i];
        }
        if (t.needs_grad(ia)) {
          std::vector<T>& ga = t.grad(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += gate_sign * g[i] * sv[i];
        }
        if (t.needs_grad(is)) {
          std::vector<T>& gs = t.grad(is);
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * av[i];
        }
      });
}

#define CANET_INSTANTIATE_ATTENTION(T)                                                      \
  template struct SpecificAttentionParams<T>;                                               \
  template struct DependentAttentionParams<T>;                                              \
  template Tensor<T> kaiming_uniform<T>(Shape, std::size_t, RngState&);                     \
  template Var<T> channel_attention<T>(Var<T>, SpecificAttentionParams<T>&);                \
  template Var<T> apply_channel<T>(Var<T>, Var<T>);                                         \
  template Var<T> spatial_attention<T>(Var<T>, SpecificAttentionParams<T>&);                \
  template SpecificAttentionOutput<T> disease_specific_forward<T>(Var<T>,                   \
                                                                  SpecificAttentionParams<T>&); \
  template Var<T> dependent_attention<T>(Var<T>, DependentAttentionParams<T>&);             \
  template Var<T> dependent_fuse<T>(Var<T>, Var<T>, Var<T>);

CANET_INSTANTIATE_ATTENTION(float)
CANET_INSTANTIATE_ATTENTION(double)

}  // namespace canet
