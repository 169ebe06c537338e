#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  bool retain_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
};

// One recorded operation. `backward` receives d(loss)/d(output) and one
// accumulator per input; an accumulator is null when that input does not
// take part in differentiation.
template <typename T>
struct Node {
  using Accumulators = std::span<std::vector<T>* const>;
  std::string op;
  std::vector<Tensor<T>> inputs;
  std::function<void(std::span<const T>, Accumulators)> backward;
};

}  // namespace detail

// Dense row-major tensor with shared storage and an optional gradient buffer.
// Copies are shallow (they alias the same storage and tape history); use
// clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  // True when a backward pass can reach this tensor (leaf parameter or
  // recorded op output).
  bool needs_grad() const { return impl_->requires_grad || impl_->grad_fn != nullptr; }
  // Keep the gradient of a non-leaf tensor after backward().
  Tensor& retain_grad();

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  const std::shared_ptr<detail::Node<T>>& grad_fn() const { return impl_->grad_fn; }

  // Deep copy without history.
  Tensor clone() const;
  // Same storage, history dropped.
  Tensor detach() const;

  // Reverse-mode sweep from a scalar; accumulates into grad buffers.
  void backward() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  detail::TensorImpl<T>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

// Wraps a freshly computed buffer into a tensor, attaching a tape node when
// gradient recording is on and any input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>, typename Node<T>::Accumulators)> backward);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pas
