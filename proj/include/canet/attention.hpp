#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "canet/autodiff.hpp"
#include "canet/ops.hpp"
#include "canet/rng.hpp"

namespace canet {

// Channel-then-spatial gating of one disease branch. The shared MLP maps
// C -> C/reduction -> C; the spatial conv maps the 2-channel [avg; max] map to one.
template <typename T>
struct SpecificAttentionParams {
  std::size_t channels = 0;
  std::size_t reduction = 16;
  std::size_t kernel = 7;
  bool mlp_bias = true;

  Tensor<T> w0;         // [C/red × C]
  Tensor<T> w0_bias;    // [C/red]
  Tensor<T> w1;         // [C × C/red]
  Tensor<T> w1_bias;    // [C]
  Tensor<T> conv;       // [1 × 2 × k × k]
  Tensor<T> conv_bias;  // [1]

  static SpecificAttentionParams zeros(std::size_t channels, std::size_t reduction,
                                       std::size_t kernel, bool mlp_bias = true);
  // Kaiming-uniform (fan-in) weights, zero biases.
  static SpecificAttentionParams init(std::size_t channels, std::size_t reduction,
                                      std::size_t kernel, bool mlp_bias, RngState& rng);

  void validate() const;
  std::size_t hidden() const { return channels / reduction; }
  std::vector<ParamRef<T>> named(const std::string& prefix);
};

// Cross-branch gate: D -> D/reduction -> D MLP followed by a sigmoid.
template <typename T>
struct DependentAttentionParams {
  std::size_t dim = 0;
  std::size_t reduction = 16;
  bool mlp_bias = true;

  Tensor<T> w0;       // [D/red × D]
  Tensor<T> w0_bias;  // [D/red]
  Tensor<T> w1;       // [D × D/red]
  Tensor<T> w1_bias;  // [D]

  static DependentAttentionParams zeros(std::size_t dim, std::size_t reduction, bool mlp_bias = true);
  static DependentAttentionParams init(std::size_t dim, std::size_t reduction, bool mlp_bias,
                                       RngState& rng);

  void validate() const;
  std::size_t hidden() const { return dim / reduction; }
  std::vector<ParamRef<T>> named(const std::string& prefix);
};

// a_c = σ(MLP(global_avg(f)) + MLP(global_max(f))); [C×H×W] -> [C], [N×C×H×W] -> [N×C].
template <typename T>
Var<T> channel_attention(Var<T> f, SpecificAttentionParams<T>& p);

// f_i[c,h,w] = a_c[c] · f[c,h,w]
template <typename T>
Var<T> apply_channel(Var<T> a_c, Var<T> f);

// a_s = σ(conv([channel_avg(f_i); channel_max(f_i)])), size-preserving padding.
template <typename T>
Var<T> spatial_attention(Var<T> f_i, SpecificAttentionParams<T>& p);

template <typename T>
struct SpecificAttentionOutput {
  Var<T> channel_gate;
  Var<T> spatial_gate;
  Var<T> features;  // f′ = a_s ⊗ (a_c ⊗ f)
};

template <typename T>
SpecificAttentionOutput<T> disease_specific_forward(Var<T> f, SpecificAttentionParams<T>& p);

// a = σ(W1·ReLU(W0·g_src + b0) + b1); [D] -> [D] or [N×D] -> [N×D].
template <typename T>
Var<T> dependent_attention(Var<T> g_src, DependentAttentionParams<T>& p);

// g′ = g_dst + a ⊗ g_src
template <typename T>
Var<T> dependent_fuse(Var<T> g_dst, Var<T> a, Var<T> g_src);

// Kaiming-uniform fan-in fill: U(-√(6/fan_in), √(6/fan_in)).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, RngState& rng);

namespace testing {
// Mutation hook for the gradient-check suite: flips the sign of the gradient
// that dependent_fuse sends to its gate.
void set_dependent_fuse_sign_flip(bool on);
bool dependent_fuse_sign_flip();
}  // namespace testing

}  // namespace canet
