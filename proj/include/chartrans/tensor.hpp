#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a cheap handle to a graph node. Operations in ops.hpp create new
// nodes that remember their inputs and a backward closure; backward() walks the
// graph in reverse topological order. Leaf tensors accumulate gradients across
// backward() calls until zero_grad()/clear_grad() is called.
//
// The scalar type is a template parameter: double is used for gradient
// verification, float for training. Both are explicitly instantiated.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace chartrans {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Graph recording is enabled by default. While a NoGradGuard is alive on the
// current thread, operations compute values only.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access for initialization and optimizer updates. Mutating a
  // tensor that is part of a live graph invalidates that graph's gradients.
  std::span<T> mutable_data() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Gradient buffer, allocated (zero) on first access. Empty span when the
  // tensor does not require gradients; op backward closures rely on this.
  std::span<T> grad_sink() const {
    if (!node_->requires_grad) return {};
    return node_->grad_buffer();
  }
  void zero_grad();
  void clear_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  // Deep copy of the value into a fresh leaf.
  Tensor detach_copy(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node<T>> node_;

  template <typename U>
  friend Tensor<U> make_result(Shape, std::vector<U>, std::span<const Tensor<U>>,
                               std::function<void(const detail::Node<U>&)>);
};

// Builds the output node of an operation. The backward closure receives the
// output node (value and grad) and must add into the inputs' grad_sink().
// It is only retained when recording is enabled and some input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::span<const Tensor<T>> inputs,
                      std::function<void(const detail::Node<T>&)> backward);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(const detail::Node<T>&)> backward) {
  return make_result<T>(std::move(shape), std::move(value),
                        std::span<const Tensor<T>>(inputs.begin(), inputs.size()),
                        std::move(backward));
}

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Throws ShapeError when loss has more than one element.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace chartrans
