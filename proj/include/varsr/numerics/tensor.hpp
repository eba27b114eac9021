#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace varsr {

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One vertex of the autograd tape. `backward` reads `grad` of this node and
// accumulates into the grads of `inputs`.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

// Process-wide switch for recording the tape. Inference paths run under a
// NoGradGuard so no closures or input references are retained.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major array with optional reverse-mode gradient tracking.
/// Copies share storage; use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  BasicTensor();
  explicit BasicTensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  bool defined() const { return node_ != nullptr; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Empty span when no gradient has reached this tensor.
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 and runs the tape in reverse topological order.
  // Only valid on single-element tensors.
  void backward();

  // Fresh leaf holding a copy of the values.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  NodeT* node() const { return node_.get(); }
  const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace varsr
