#include "pas/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pas/error.hpp"

namespace pas {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (impl_->grad_fn) throw ContractError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T>& Tensor<T>::retain_grad() {
  impl_->retain_grad = true;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = false;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl<T>>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(shape()));
  }
  using Impl = detail::TensorImpl<T>;

  // Post-order DFS gives inputs before outputs; walking it in reverse visits
  // every node once in reverse topological order.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && next < fn->inputs.size()) {
      Impl* child = fn->inputs[next++].impl();
      if (child->grad_fn || child->requires_grad) {
        if (visited.insert(child).second) stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<Impl*, std::vector<T>> pending;
  pending[impl_.get()] = std::vector<T>(1, T{1});
  std::vector<std::vector<T>*> accumulators;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    std::vector<T> g = std::move(found->second);
    pending.erase(found);

    if (node->grad_fn) {
      accumulators.clear();
      for (const auto& input : node->grad_fn->inputs) {
        Impl* in = input.impl();
        if (in->grad_fn || in->requires_grad) {
          auto& acc = pending[in];
          if (acc.empty()) acc.assign(in->data.size(), T{0});
          accumulators.push_back(&acc);
        } else {
          accumulators.push_back(nullptr);
        }
      }
      node->grad_fn->backward(g, accumulators);
    }
    if ((node->requires_grad && !node->grad_fn) || node->retain_grad) {
      if (node->grad.empty()) {
        node->grad = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
      }
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string op, std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>, typename Node<T>::Accumulators)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_mode_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<T>& t) { return t.defined() && t.needs_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  // Undefined optional inputs (e.g. a missing bias) stay out of the tape.
  for (auto& t : inputs) {
    if (!t.defined()) throw ContractError("undefined tensor passed to tape op " + node->op);
  }
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  return out;
}

template Tensor<float> make_result(Shape, std::vector<float>, std::string, std::vector<Tensor<float>>,
                                   std::function<void(std::span<const float>, Node<float>::Accumulators)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::string, std::vector<Tensor<double>>,
                                    std::function<void(std::span<const double>, Node<double>::Accumulators)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace pas
