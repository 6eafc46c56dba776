#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "canet/autodiff.hpp"
#include "canet/rng.hpp"

// Differentiable primitives. Every op records its output on the tape of its
// inputs; image-like ops accept a single C×H×W map or an N×C×H×W batch.
namespace canet {

struct Conv2dOptions {
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
};

enum class PoolMode { spatial_max, spatial_avg, global_max, global_avg, channel_max, channel_avg };

struct PoolWindow {
  std::size_t h = 2;
  std::size_t w = 2;
};

enum class ElementwiseOp { add, mul, relu, sigmoid };

// Optional operand that does not take part in template argument deduction.
template <typename T>
using MaybeVar = std::type_identity_t<std::optional<Var<T>>>;

// [M×K] · [K×N] -> [M×N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// x[N×in] · w[out×in]ᵀ + bias[out] -> [N×out]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, MaybeVar<T> bias = std::nullopt);

// Cross-correlation (no kernel flip). x: [C_in×H×W] or [N×C_in×H×W],
// k: [C_out×C_in×kh×kw], bias: [C_out].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, MaybeVar<T> bias, Conv2dOptions opt);

// global_* : [..×C×H×W] -> [..×C]; channel_* : [..×C×H×W] -> [..×1×H×W];
// spatial_* : non-overlapping window (stride = window). Max modes send the
// gradient to the first maximal element in scan order.
template <typename T>
Var<T> pool(Var<T> x, PoolMode mode, std::optional<PoolWindow> window = std::nullopt);

// Binary ops broadcast the lower-rank operand after padding its shape with
// trailing 1s (channel vector against C×H×W, 1×H×W map against C×H×W).
template <typename T>
Var<T> elementwise(ElementwiseOp op, Var<T> a, MaybeVar<T> b = std::nullopt);

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise<T>(ElementwiseOp::add, a, b); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return elementwise<T>(ElementwiseOp::mul, a, b); }
template <typename T>
Var<T> relu(Var<T> a) { return elementwise<T>(ElementwiseOp::relu, a); }
template <typename T>
Var<T> sigmoid(Var<T> a) { return elementwise<T>(ElementwiseOp::sigmoid, a); }

template <typename T>
Var<T> scale(Var<T> a, T factor);

// Sum of all elements -> scalar.
template <typename T>
Var<T> sum(Var<T> a);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

template <typename T>
Var<T> concat(std::span<const Var<T>> xs, std::size_t axis);

// Inverted dropout: survivors scaled by 1/(1-rate); identity when !training.
template <typename T>
Var<T> dropout(Var<T> x, double rate, RngState& rng, bool training);

// Mean negative log-likelihood of integer labels under row-wise softmax.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels);

// Row-wise softmax of a [N×M] tensor (no tape).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

// Broadcast index of every element of `big` into `small` (trailing-1 padding rule).
std::vector<std::size_t> broadcast_map(const Shape& big, const Shape& small);
bool broadcastable(const Shape& big, const Shape& small);

}  // namespace canet
