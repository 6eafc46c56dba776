#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <deque>
#include <unordered_map>
#include <vector>

#include "canet/tensor.hpp"

namespace canet {

template <typename T>
class GradTape;

// Stable name plus non-owning pointer to a learnable tensor.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  GradTape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
};

// Records a forward computation and replays it in reverse to produce gradients.
// Node ids are assigned in execution order, so id order is a topological order.
template <typename T>
class GradTape {
 public:
  // Propagates the node's output gradient into the gradients of its inputs.
  using BackwardFn = std::function<void(GradTape&, std::size_t self)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var<T> constant(Tensor<T> value);

  // Registers `leaf` as a differentiable input. Gradients are accumulated into
  // leaf.grad by backward(); registering the same tensor twice returns the same node.
  Var<T> leaf(Tensor<T>& leaf);

  Var<T> record(std::string op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn fn);

  // Reverse pass from a scalar. Allowed once per tape.
  void backward(Var<T> loss);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Gradient buffer of a node, zero-allocated on first access.
  std::vector<T>& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  // Order in which backward() visited nodes (ids); exposed for verification.
  const std::vector<std::size_t>& visit_log() const noexcept { return visit_log_; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    BackwardFn backward;
    Tensor<T>* leaf = nullptr;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> leaf_ids_;
  std::vector<std::size_t> visit_log_;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

extern template class GradTape<float>;
extern template class GradTape<double>;

}  // namespace canet
