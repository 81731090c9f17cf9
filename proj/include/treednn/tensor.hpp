#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "treednn/error.hpp"

namespace treednn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
struct TensorImpl;

inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Suspends graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// One recorded operation. `backward` receives the gradient of the op's output
// and accumulates into the gradient buffers of those inputs that require it.
template <typename T>
struct GradNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty == absent
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> grad_fn;

  // Gradient buffer, zero-filled on first touch.
  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

// Dense row-major tensor with an optional gradient slot. Copies share the
// underlying storage; use clone() for an independent value.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  BasicTensor() : impl_(std::make_shared<Impl>()) {}

  BasicTensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static BasicTensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value));
  }

  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Direct write access, for initialization and optimizer updates only.
  std::span<T> mutable_data() { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  T at(std::size_t flat) const { return impl_->data.at(flat); }

  BasicTensor clone() const { return BasicTensor(shape(), impl_->data); }
  BasicTensor detach() const { return clone(); }

  bool all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(),
                       [](T v) { return std::isfinite(v); });
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

  // Builds an op result; records `backward` only if some input needs grads.
  static BasicTensor make_result(Shape shape, std::vector<T> data,
                                 std::vector<std::shared_ptr<Impl>> inputs,
                                 std::function<void(std::span<const T>)> backward) {
    BasicTensor out(std::move(shape), std::move(data));
    const bool needs = grad_recording_flag() && std::any_of(inputs.begin(), inputs.end(),
                                   [](const auto& in) { return in->requires_grad; });
    if (needs) {
      out.impl_->requires_grad = true;
      out.impl_->grad_fn = std::make_shared<GradNode<T>>(
          GradNode<T>{std::move(inputs), std::move(backward)});
    }
    return out;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode sweep from a scalar loss. Leaf tensors with requires_grad
// accumulate d(loss)/d(leaf); intermediate gradients are released as soon as
// they have been propagated.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  auto root = loss.impl();
  if (!root->requires_grad) return;
  if (!root->grad_fn) {
    root->grad_buffer()[0] += T(1);
    return;
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      TensorImpl<T>* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && child->grad_fn && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::vector<TensorImpl<T>*> leaves;
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (node->grad.empty()) continue;
    for (const auto& in : node->grad_fn->inputs) {
      if (in->requires_grad && !in->grad_fn) leaves.push_back(in.get());
    }
    node->grad_fn->backward(node->grad);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
  for (TensorImpl<T>* leaf : leaves) {
    for (T g : leaf->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient");
    }
  }
}

}  // namespace treednn
