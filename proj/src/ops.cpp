#include "canet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "gemm.hpp"

namespace canet {
namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw UsageError(std::string(op) + ": operands recorded on different tapes");
  }
}

// Splits an image-like shape into (batch, C, H, W); rank 3 means batch 1.
struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(op) + ": expected C×H×W or N×C×H×W input, got " + shape_str(s));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.n, c, h, w};
  return {c, h, w};
}

template <typename T>
T stable_sigmoid(T x) {
  T s;
  if (x >= T{0}) {
    s = T{1} / (T{1} + std::exp(-x));
  } else {
    const T e = std::exp(x);
    s = e / (T{1} + e);
  }
  // Keep the gate strictly inside (0, 1) even where it saturates in floating point.
  return std::clamp(s, std::numeric_limits<T>::denorm_min(), std::nextafter(T{1}, T{0}));
}

}  // namespace

bool broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < big.size(); ++i) {
    const std::size_t s = i < small.size() ? small[i] : 1;
    if (s != big[i] && s != 1) return false;
  }
  return true;
}

std::vector<std::size_t> broadcast_map(const Shape& big, const Shape& small) {
  if (!broadcastable(big, small)) {
    throw DimensionError("shapes " + shape_str(big) + " and " + shape_str(small) +
                         " are not broadcastable");
  }
  const std::size_t rank = big.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = rank; i-- > 0;) {
    const std::size_t s = i < small.size() ? small[i] : 1;
    stride[i] = (s == 1) ? 0 : acc;
    acc *= s;
  }
  const std::size_t total = numel_of(big);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = off;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      off += stride[ax];
      if (idx[ax] < big[ax]) break;
      off -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b, "matmul");
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<T> out({m, n});
  detail::gemm<T>(false, false, m, n, k, A.data().data(), B.data().data(), out.data().data(), false);
  return a.tape->record("matmul", {a.id, b.id}, std::move(out),
                        [m, n, k, ia = a.id, ib = b.id](GradTape<T>& tape, std::size_t self) {
                          const std::vector<T>& g = tape.grad(self);
                          if (tape.needs_grad(ia)) {
                            detail::gemm<T>(false, true, m, k, n, g.data(),
                                            tape.value(ib).data().data(), tape.grad(ia).data(), true);
                          }
                          if (tape.needs_grad(ib)) {
                            detail::gemm<T>(true, false, k, n, m, tape.value(ia).data().data(),
                                            g.data(), tape.grad(ib).data(), true);
                          }
                        });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, MaybeVar<T> bias) {
  require_same_tape(x, w, "linear");
  const Tensor<T>& X = x.value();
  const Tensor<T>& W = w.value();
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1)) {
    throw DimensionError("linear: input " + shape_str(X.shape()) + " does not match weight " +
                         shape_str(W.shape()));
  }
  const std::size_t n = X.dim(0), in = X.dim(1), out_dim = W.dim(0);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (bias) {
    require_same_tape(x, *bias, "linear");
    if (bias->value().rank() != 1 || bias->value().dim(0) != out_dim) {
      throw DimensionError("linear: bias " + shape_str(bias->value().shape()) +
                           " does not match weight " + shape_str(W.shape()));
    }
    inputs.push_back(bias->id);
  }
  Tensor<T> out({n, out_dim});
  T* o = out.data().data();
  detail::gemm<T>(false, true, n, out_dim, in, X.data().data(), W.data().data(), o, false);
  if (bias) {
    const auto bv = bias->value().data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) o[r * out_dim + c] += bv[c];
    }
  }
  const std::size_t ib = bias ? bias->id : 0;
  const bool has_bias = bias.has_value();
  return x.tape->record(
      "linear", std::move(inputs), std::move(out),
      [n, in, out_dim, ix = x.id, iw = w.id, ib, has_bias](GradTape<T>& tape, std::size_t self) {
        const std::vector<T>& g = tape.grad(self);
        if (tape.needs_grad(ix)) {
          detail::gemm<T>(false, false, n, in, out_dim, g.data(), tape.value(iw).data().data(),
                          tape.grad(ix).data(), true);
        }
        if (tape.needs_grad(iw)) {
          detail::gemm<T>(true, false, out_dim, in, n, g.data(), tape.value(ix).data().data(),
                          tape.grad(iw).data(), true);
        }
        if (has_bias && tape.needs_grad(ib)) {
          std::vector<T>& gb = tape.grad(ib);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
          }
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, MaybeVar<T> bias, Conv2dOptions opt) {
  require_same_tape(x, k, "conv2d");
  const Tensor<T>& X = x.value();
  const Tensor<T>& K = k.value();
  const ImageDims d = image_dims(X.shape(), "conv2d");
  if (K.rank() != 4 || K.dim(1) != d.c) {
    throw DimensionError("conv2d: kernel " + shape_str(K.shape()) + " does not match input " +
                         shape_str(X.shape()));
  }
  if (opt.stride_h == 0 || opt.stride_w == 0) throw ParameterError("conv2d: stride must be >= 1");
  const std::size_t cout = K.dim(0), kh = K.dim(2), kw = K.dim(3);
  const std::size_t ph = opt.pad_h, pw = opt.pad_w, sh = opt.stride_h, sw = opt.stride_w;
  if (d.h + 2 * ph < kh || d.w + 2 * pw < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(K.shape()) +
                         " yields non-positive output extent on input " + shape_str(X.shape()));
  }
  const std::size_t ho = (d.h + 2 * ph - kh) / sh + 1;
  const std::size_t wo = (d.w + 2 * pw - kw) / sw + 1;
  const std::size_t hw_out = ho * wo;
  const std::size_t cols_n = d.n * hw_out;
  const std::size_t ckk = d.c * kh * kw;

  std::vector<std::size_t> inputs{x.id, k.id};
  if (bias) {
    require_same_tape(x, *bias, "conv2d");
    if (bias->value().numel() != cout) {
      throw DimensionError("conv2d: bias " + shape_str(bias->value().shape()) +
                           " does not match kernel " + shape_str(K.shape()));
    }
    inputs.push_back(bias->id);
  }

  // Row r = (c, i, j) of the unfolded input, column = (n, oh, ow).
  auto cols = std::make_shared<std::vector<T>>(ckk * cols_n, T{0});
  {
    const T* xs = X.data().data();
    T* cp = cols->data();
    for (std::size_t c = 0; c < d.c; ++c) {
      for (std::size_t i = 0; i < kh; ++i) {
        for (std::size_t j = 0; j < kw; ++j) {
          T* row = cp + ((c * kh + i) * kw + j) * cols_n;
          for (std::size_t b = 0; b < d.n; ++b) {
            const T* plane = xs + (b * d.c + c) * d.h * d.w;
            T* dst = row + b * hw_out;
            for (std::size_t oh = 0; oh < ho; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * sh + i) -
                                        static_cast<std::ptrdiff_t>(ph);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
              const T* src = plane + static_cast<std::size_t>(ih) * d.w;
              for (std::size_t ow = 0; ow < wo; ++ow) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * sw + j) -
                                          static_cast<std::ptrdiff_t>(pw);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
                dst[oh * wo + ow] = src[iw];
              }
            }
          }
        }
      }
    }
  }

  std::vector<T> tmp(cout * cols_n);
  detail::gemm<T>(false, false, cout, cols_n, ckk, K.data().data(), cols->data(), tmp.data(), false);
  Tensor<T> out(image_shape(d, cout, ho, wo));
  {
    T* o = out.data().data();
    const T* bv = bias ? bias->value().data().data() : nullptr;
    for (std::size_t b = 0; b < d.n; ++b) {
      for (std::size_t co = 0; co < cout; ++co) {
        const T* src = tmp.data() + co * cols_n + b * hw_out;
        T* dst = o + (b * cout + co) * hw_out;
        const T add = bv ? bv[co] : T{0};
        for (std::size_t p = 0; p < hw_out; ++p) dst[p] = src[p] + add;
      }
    }
  }

  const std::size_t ib = bias ? bias->id : 0;
  const bool has_bias = bias.has_value();
  return x.tape->record(
      "conv2d", std::move(inputs), std::move(out),
      [=, ix = x.id, ik = k.id](GradTape<T>& tape, std::size_t self) {
        const std::vector<T>& g = tape.grad(self);
        std::vector<T> gt(cout * cols_n);
        for (std::size_t b = 0; b < d.n; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            std::copy_n(g.data() + (b * cout + co) * hw_out, hw_out,
                        gt.data() + co * cols_n + b * hw_out);
          }
        }
        if (has_bias && tape.needs_grad(ib)) {
          std::vector<T>& gb = tape.grad(ib);
          for (std::size_t co = 0; co < cout; ++co) {
            T s{0};
            const T* row = gt.data() + co * cols_n;
            for (std::size_t p = 0; p < cols_n; ++p) s += row[p];
            gb[co] += s;
          }
        }
        if (tape.needs_grad(ik)) {
          detail::gemm<T>(false, true, cout, ckk, cols_n, gt.data(), cols->data(),
                          tape.grad(ik).data(), true);
        }
        if (tape.needs_grad(ix)) {
          std::vector<T> dcols(ckk * cols_n);
          detail::gemm<T>(true, false, ckk, cols_n, cout, tape.value(ik).data().data(), gt.data(),
                          dcols.data(), false);
          T* gx = tape.grad(ix).data();
          for (std::size_t c = 0; c < d.c; ++c) {
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                const T* row = dcols.data() + ((c * kh + i) * kw + j) * cols_n;
                for (std::size_t b = 0; b < d.n; ++b) {
                  T* plane = gx + (b * d.c + c) * d.h * d.w;
                  const T* src = row + b * hw_out;
                  for (std::size_t oh = 0; oh < ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * sh + i) -
                                              static_cast<std::ptrdiff_t>(ph);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    T* dst = plane + static_cast<std::size_t>(ih) * d.w;
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                      const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * sw + j) -
                                                static_cast<std::ptrdiff_t>(pw);
                      if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.w)) continue;
                      dst[iw] += src[oh * wo + ow];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> pool(Var<T> x, PoolMode mode, std::optional<PoolWindow> window) {
  const Tensor<T>& X = x.value();
  const ImageDims d = image_dims(X.shape(), "pool");
  const std::size_t plane = d.h * d.w;
  const T* xs = X.data().data();
  // Every mode is a reduction of disjoint input groups; `route` holds, per output,
  // either the argmax input offset (max modes) or is unused (avg modes).
  const bool is_max = mode == PoolMode::spatial_max || mode == PoolMode::global_max ||
                      mode == PoolMode::channel_max;

  Shape out_shape;
  std::vector<std::vector<std::size_t>> groups;
  switch (mode) {
    case PoolMode::global_avg:
    case PoolMode::global_max: {
      if (plane == 0) throw DimensionError("pool: empty spatial extent");
      out_shape = d.batched ? Shape{d.n, d.c} : Shape{d.c};
      groups.resize(d.n * d.c);
      for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
        groups[nc].resize(plane);
        std::iota(groups[nc].begin(), groups[nc].end(), nc * plane);
      }
      break;
    }
    case PoolMode::channel_avg:
    case PoolMode::channel_max: {
      if (d.c == 0) throw DimensionError("pool: empty channel extent");
      out_shape = image_shape(d, 1, d.h, d.w);
      groups.resize(d.n * plane);
      for (std::size_t b = 0; b < d.n; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          auto& grp = groups[b * plane + p];
          grp.resize(d.c);
          for (std::size_t c = 0; c < d.c; ++c) grp[c] = (b * d.c + c) * plane + p;
        }
      }
      break;
    }
    case PoolMode::spatial_avg:
    case PoolMode::spatial_max: {
      if (!window) throw ParameterError("pool: spatial modes require a window");
      const std::size_t kh = window->h, kw = window->w;
      if (kh == 0 || kw == 0 || kh > d.h || kw > d.w) {
        throw DimensionError("pool: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than input " + shape_str(X.shape()));
      }
      const std::size_t ho = d.h / kh, wo = d.w / kw;
      out_shape = image_shape(d, d.c, ho, wo);
      groups.resize(d.n * d.c * ho * wo);
      for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
        for (std::size_t oh = 0; oh < ho; ++oh) {
          for (std::size_t ow = 0; ow < wo; ++ow) {
            auto& grp = groups[(nc * ho + oh) * wo + ow];
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                grp.push_back(nc * plane + (oh * kh + i) * d.w + ow * kw + j);
              }
            }
          }
        }
      }
      break;
    }
  }

  Tensor<T> out(out_shape);
  std::vector<std::size_t> argmax(is_max ? groups.size() : 0);
  for (std::size_t o = 0; o < groups.size(); ++o) {
    const auto& grp = groups[o];
    if (is_max) {
      std::size_t best = grp[0];
      for (std::size_t e : grp) {
        if (xs[e] > xs[best]) best = e;
      }
      argmax[o] = best;
      out[o] = xs[best];
    } else {
      T s{0};
      for (std::size_t e : grp) s += xs[e];
      out[o] = s / static_cast<T>(grp.size());
    }
  }

  const char* name = "pool";
  switch (mode) {
    case PoolMode::spatial_max: name = "pool.spatial_max"; break;
    case PoolMode::spatial_avg: name = "pool.spatial_avg"; break;
    case PoolMode::global_max: name = "pool.global_max"; break;
    case PoolMode::global_avg: name = "pool.global_avg"; break;
    case PoolMode::channel_max: name = "pool.channel_max"; break;
    case PoolMode::channel_avg: name = "pool.channel_avg"; break;
  }
  auto shared_groups = std::make_shared<std::vector<std::vector<std::size_t>>>(std::move(groups));
  return x.tape->record(
      name, {x.id}, std::move(out),
      [is_max, ix = x.id, shared_groups, argmax = std::move(argmax)](GradTape<T>& tape,
                                                                     std::size_t self) {
        const std::vector<T>& g = tape.grad(self);
        std::vector<T>& gx = tape.grad(ix);
        const auto& grps = *shared_groups;
        for (std::size_t o = 0; o < grps.size(); ++o) {
          if (is_max) {
            gx[argmax[o]] += g[o];
          } else {
            const T share = g[o] / static_cast<T>(grps[o].size());
            for (std::size_t e : grps[o]) gx[e] += share;
          }
        }
      });
}

template <typename T>
Var<T> elementwise(ElementwiseOp op, Var<T> a, MaybeVar<T> b) {
  const bool binary = op == ElementwiseOp::add || op == ElementwiseOp::mul;
  if (binary != b.has_value()) {
    throw UsageError(binary ? "elementwise: binary op needs two operands"
                            : "elementwise: unary op takes one operand");
  }
  GradTape<T>& tape = *a.tape;
  if (!binary) {
    const Tensor<T>& A = a.value();
    Tensor<T> out(A.shape());
    const std::size_t n = A.numel();
    if (op == ElementwiseOp::relu) {
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i] > T{0} ? A[i] : T{0};
      return tape.record("relu", {a.id}, std::move(out),
                         [ia = a.id](GradTape<T>& t, std::size_t self) {
                           const std::vector<T>& g = t.grad(self);
                           const auto x = t.value(ia).data();
                           std::vector<T>& gx = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (x[i] > T{0}) gx[i] += g[i];
                           }
                         });
    }
    for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(A[i]);
    return tape.record("sigmoid", {a.id}, std::move(out),
                       [ia = a.id](GradTape<T>& t, std::size_t self) {
                         const std::vector<T>& g = t.grad(self);
                         const auto s = t.value(self).data();
                         std::vector<T>& gx = t.grad(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gx[i] += g[i] * s[i] * (T{1} - s[i]);
                         }
                       });
  }

  require_same_tape(a, *b, "elementwise");
  Var<T> big = a, small = *b;
  if (a.shape() != b->shape() && !broadcastable(a.shape(), b->shape())) {
    if (broadcastable(b->shape(), a.shape())) {
      std::swap(big, small);
    } else {
      throw DimensionError("elementwise: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b->shape()) + " are not broadcastable");
    }
  }
  const Tensor<T>& B = big.value();
  const Tensor<T>& S = small.value();
  const bool same = B.shape() == S.shape();
  auto map = std::make_shared<std::vector<std::size_t>>(
      same ? std::vector<std::size_t>{} : broadcast_map(B.shape(), S.shape()));
  Tensor<T> out(B.shape());
  const std::size_t n = B.numel();
  const bool is_add = op == ElementwiseOp::add;
  for (std::size_t i = 0; i < n; ++i) {
    const T s = same ? S[i] : S[(*map)[i]];
    out[i] = is_add ? B[i] + s : B[i] * s;
  }
  return tape.record(
      is_add ? "add" : "mul", {big.id, small.id}, std::move(out),
      [is_add, same, map, ib = big.id, is = small.id](GradTape<T>& t, std::size_t self) {
        const std::vector<T>& g = t.grad(self);
        const std::size_t n = g.size();
        auto idx = [&](std::size_t i) { return same ? i : (*map)[i]; };
        if (t.needs_grad(ib)) {
          std::vector<T>& gb = t.grad(ib);
          if (is_add) {
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          } else {
            const auto sv = t.value(is).data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * sv[idx(i)];
          }
        }
        if (t.needs_grad(is)) {
          std::vector<T>& gs = t.grad(is);
          if (is_add) {
            for (std::size_t i = 0; i < n; ++i) gs[idx(i)] += g[i];
          } else {
            const auto bv = t.value(ib).data();
            for (std::size_t i = 0; i < n; ++i) gs[idx(i)] += g[i] * bv[i];
          }
        }
      });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  return a.tape->record("scale", {a.id}, std::move(out),
                        [factor, ia = a.id](GradTape<T>& t, std::size_t self) {
                          const std::vector<T>& g = t.grad(self);
                          std::vector<T>& gx = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                        });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  return a.tape->record("sum", {a.id}, Tensor<T>::scalar(s),
                        [ia = a.id](GradTape<T>& t, std::size_t self) {
                          const T g = t.grad(self)[0];
                          for (T& v : t.grad(ia)) v += g;
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record("reshape", {a.id}, std::move(out),
                        [ia = a.id](GradTape<T>& t, std::size_t self) {
                          const std::vector<T>& g = t.grad(self);
                          std::vector<T>& gx = t.grad(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> xs, std::size_t axis) {
  if (xs.empty()) throw UsageError("concat: empty input list");
  if (xs.size() == 1) return xs[0];
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> extents;
  for (const Var<T>& v : xs) {
    require_same_tape(xs[0], v, "concat");
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " does not match " + shape_str(first) +
                           " off axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
    extents.push_back(s[axis]);
    inputs.push_back(v.id);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t total_axis = out_shape[axis];

  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto src = xs[k].value().data();
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * chunk, chunk,
                  out.data().data() + (o * total_axis + offset) * inner);
    }
    offset += extents[k];
  }
  return xs[0].tape->record(
      "concat", inputs, std::move(out),
      [inputs, extents, outer, inner, total_axis](GradTape<T>& t, std::size_t self) {
        const std::vector<T>& g = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          const std::size_t chunk = extents[k] * inner;
          if (t.needs_grad(inputs[k])) {
            std::vector<T>& gx = t.grad(inputs[k]);
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = g.data() + (o * total_axis + offset) * inner;
              for (std::size_t e = 0; e < chunk; ++e) gx[o * chunk + e] += src[e];
            }
          }
          offset += extents[k];
        }
      });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, RngState& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const Tensor<T>& X = x.value();
  auto mask = std::make_shared<std::vector<T>>(X.numel());
  Tensor<T> out(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? T{0} : keep_scale;
    out[i] = X[i] * (*mask)[i];
  }
  return x.tape->record("dropout", {x.id}, std::move(out),
                        [mask, ix = x.id](GradTape<T>& t, std::size_t self) {
                          const std::vector<T>& g = t.grad(self);
                          std::vector<T>& gx = t.grad(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                        });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("softmax: expected N×M logits, got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = logits.data().data() + r * m;
    const T mx = *std::max_element(row, row + m);
    T z{0};
    for (std::size_t c = 0; c < m; ++c) {
      p[r * m + c] = std::exp(row[c] - mx);
      z += p[r * m + c];
    }
    for (std::size_t c = 0; c < m; ++c) p[r * m + c] /= z;
  }
  return p;
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Tensor<T>& L = logits.value();
  if (L.rank() != 2 || L.dim(0) == 0) {
    throw DimensionError("softmax_cross_entropy: expected N×M logits with N >= 1, got " +
                         shape_str(L.shape()));
  }
  const std::size_t n = L.dim(0), m = L.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= m) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " at row " +
                      std::to_string(r) + " outside [0, " + std::to_string(m) + ")");
    }
  }
  T loss{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = L.data().data() + r * m;
    const T mx = *std::max_element(row, row + m);
    T z{0};
    for (std::size_t c = 0; c < m; ++c) z += std::exp(row[c] - mx);
    loss += mx + std::log(z) - row[labels[r]];
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(
      "softmax_cross_entropy", {logits.id}, Tensor<T>::scalar(loss),
      [lab = std::move(lab), n, m, il = logits.id](GradTape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(n);
        const Tensor<T> p = softmax_rows(t.value(il));
        std::vector<T>& gl = t.grad(il);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < m; ++c) {
            const T onehot = static_cast<std::size_t>(lab[r]) == c ? T{1} : T{0};
            gl[r * m + c] += g * (p[r * m + c] - onehot);
          }
        }
      });
}

#define CANET_INSTANTIATE_OPS(T)                                                               \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                   \
  template Var<T> linear<T>(Var<T>, Var<T>, MaybeVar<T>);                            \
  template Var<T> conv2d<T>(Var<T>, Var<T>, MaybeVar<T>, Conv2dOptions);             \
  template Var<T> pool<T>(Var<T>, PoolMode, std::optional<PoolWindow>);                        \
  template Var<T> elementwise<T>(ElementwiseOp, Var<T>, MaybeVar<T>);                \
  template Var<T> scale<T>(Var<T>, T);                                                         \
  template Var<T> sum<T>(Var<T>);                                                              \
  template Var<T> reshape<T>(Var<T>, Shape);                                                   \
  template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                             \
  template Var<T> dropout<T>(Var<T>, double, RngState&, bool);                                 \
  template Var<T> softmax_cross_entropy<T>(Var<T>, std::span<const int>);                      \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);

CANET_INSTANTIATE_OPS(float)
CANET_INSTANTIATE_OPS(double)

}  // namespace canet
