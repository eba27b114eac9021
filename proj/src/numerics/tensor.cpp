#include "varsr/numerics/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "varsr/error.hpp"

namespace varsr {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

template <typename T>
BasicTensor<T>::BasicTensor() = default;

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<NodeT>();
  node->value.assign(static_cast<size_t>(numel_of(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  auto node = std::make_shared<NodeT>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
int BasicTensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + to_string(shape()));
  return node_->shape[static_cast<size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
void BasicTensor<T>::backward() {
  if (node_->value.size() != 1)
    throw ShapeError("backward() needs a single-element tensor, got " + to_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS so deep graphs do not recurse.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodeT* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_data()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace varsr
