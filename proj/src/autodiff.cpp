#include "canet/autodiff.hpp"

#include <cmath>
#include <sstream>

namespace canet {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Var<T> GradTape<T>::constant(Tensor<T> value) {
  return record("constant", {}, std::move(value), nullptr);
}

template <typename T>
Var<T> GradTape<T>::leaf(Tensor<T>& leaf) {
  if (auto it = leaf_ids_.find(&leaf); it != leaf_ids_.end()) {
    return Var<T>{this, it->second};
  }
  Tensor<T> copy(leaf.shape(), leaf.storage());
  Var<T> v = record("leaf", {}, std::move(copy), nullptr);
  Node& node = nodes_.back();
  node.leaf = &leaf;
  node.needs_grad = true;
  leaf.requires_grad = true;
  leaf_ids_.emplace(&leaf, v.id);
  return v;
}

template <typename T>
Var<T> GradTape<T>::record(std::string op, std::vector<std::size_t> inputs, Tensor<T> value,
                           BackwardFn fn) {
  if (consumed_) {
    throw UsageError("tape already consumed by backward(); start a new forward pass");
  }
  for (T x : value.data()) {
    if (!std::isfinite(x)) {
      throw NumericalError("non-finite value produced by op '" + op + "'");
    }
  }
  bool needs = false;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw UsageError("op '" + op + "' references an unknown node");
    needs = needs || nodes_[in].needs_grad;
  }
  Node node;
  node.op = std::move(op);
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  node.backward = std::move(fn);
  node.needs_grad = needs && node.backward != nullptr;
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
std::vector<T>& GradTape<T>::grad(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty()) node.grad.assign(node.value.numel(), T{0});
  return node.grad;
}

template <typename T>
void GradTape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw UsageError("backward(): loss was not produced on this tape");
  if (consumed_) throw UsageError("backward() called twice on the same tape");
  if (nodes_.at(loss.id).value.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     shape_str(nodes_[loss.id].value.shape()));
  }
  consumed_ = true;
  grad(loss.id)[0] = T{1};
  visit_log_.clear();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.needs_grad) continue;
    visit_log_.push_back(i);
    if (node.backward && !node.grad.empty()) node.backward(*this, i);
  }
  for (Node& node : nodes_) {
    if (!node.leaf) continue;
    Tensor<T>& leaf = *node.leaf;
    if (leaf.grad.size() != leaf.numel()) leaf.grad.assign(leaf.numel(), T{0});
    if (node.grad.empty()) continue;
    for (std::size_t k = 0; k < node.grad.size(); ++k) leaf.grad[k] += node.grad[k];
  }
}

template class GradTape<float>;
template class GradTape<double>;

}  // namespace canet
