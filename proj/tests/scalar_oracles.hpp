#pragma once

// Straight-line scalar reimplementations of the network equations. They share
// nothing with the tape ops beyond the parameter tensors they read.

#include <algorithm>
#include <cmath>
#include <vector>

#include "canet/attention.hpp"

namespace canet::oracle {

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Loop-based two-layer MLP, independent of the tape ops.
inline std::vector<double> loop_mlp(const std::vector<double>& x, const Tensor<double>& w0,
                                    const Tensor<double>& b0, const Tensor<double>& w1,
                                    const Tensor<double>& b1, bool bias) {
  const std::size_t hid = w0.dim(0), in = w0.dim(1), out = w1.dim(0);
  std::vector<double> h(hid), y(out);
  for (std::size_t j = 0; j < hid; ++j) {
    double s = bias ? b0[j] : 0.0;
    for (std::size_t i = 0; i < in; ++i) s += w0.at({j, i}) * x[i];
    h[j] = std::max(0.0, s);
  }
  for (std::size_t o = 0; o < out; ++o) {
    double s = bias ? b1[o] : 0.0;
    for (std::size_t j = 0; j < hid; ++j) s += w1.at({o, j}) * h[j];
    y[o] = s;
  }
  return y;
}

inline std::vector<double> loop_channel_gate(const Tensor<double>& f,
                                             const SpecificAttentionParams<double>& p) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::vector<double> avg(c, 0.0), mx(c, -1e300);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) {
      avg[ch] += f[ch * hw + i] / static_cast<double>(hw);
      mx[ch] = std::max(mx[ch], f[ch * hw + i]);
    }
  }
  const auto ya = loop_mlp(avg, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias);
  const auto ym = loop_mlp(mx, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias);
  std::vector<double> gate(c);
  for (std::size_t ch = 0; ch < c; ++ch) gate[ch] = sig(ya[ch] + ym[ch]);
  return gate;
}

inline std::vector<double> loop_spatial_gate(const Tensor<double>& fi,
                                             const SpecificAttentionParams<double>& p) {
  const std::size_t c = fi.dim(0), h = fi.dim(1), w = fi.dim(2);
  const long k = static_cast<long>(p.kernel), r = (k - 1) / 2;
  std::vector<double> avg(h * w, 0.0), mx(h * w, -1e300);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = fi.at({ch, y, x});
        avg[y * w + x] += v / static_cast<double>(c);
        mx[y * w + x] = std::max(mx[y * w + x], v);
      }
  std::vector<double> gate(h * w);
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x) {
      double s = p.conv_bias[0];
      for (long i = 0; i < k; ++i)
        for (long j = 0; j < k; ++j) {
          const long yy = y + i - r, xx = x + j - r;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          const std::size_t at = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
          const std::size_t ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
          s += p.conv.at({0, 0, ui, uj}) * avg[at] + p.conv.at({0, 1, ui, uj}) * mx[at];
        }
      gate[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = sig(s);
    }
  return gate;
}

// a_c ⊗ f with the gate broadcast over space.
inline std::vector<double> loop_apply_channel(const std::vector<double>& gate, const Tensor<double>& f) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  std::vector<double> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = gate[ch] * f[ch * hw + i];
  return out;
}

// a_s ⊗ f_i with the gate broadcast over channels.
inline std::vector<double> loop_apply_spatial(const std::vector<double>& gate, const Tensor<double>& fi) {
  const std::size_t c = fi.dim(0), hw = fi.dim(1) * fi.dim(2);
  std::vector<double> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = gate[i] * fi[ch * hw + i];
  return out;
}

inline std::vector<double> loop_dependent_gate(const std::vector<double>& g,
                                               const DependentAttentionParams<double>& p) {
  std::vector<double> y = loop_mlp(g, p.w0, p.w0_bias, p.w1, p.w1_bias, p.mlp_bias);
  for (double& v : y) v = sig(v);
  return y;
}

inline std::vector<double> loop_fuse(const std::vector<double>& dst, const std::vector<double>& gate,
                                     const std::vector<double>& src) {
  std::vector<double> out(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) out[i] = dst[i] + gate[i] * src[i];
  return out;
}

// Independent mean cross-entropy over rows.
inline double loop_ce(const Tensor<double>& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at({i, j}));
    total += std::log(z) - logits.at({i, static_cast<std::size_t>(labels[i])});
  }
  return total / static_cast<double>(n);
}

}  // namespace canet::oracle
