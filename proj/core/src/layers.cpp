#include "pas/layers.hpp"

#include "pas/error.hpp"

namespace pas {

template <typename T>
DbcState<T> DbcState<T>::all_on(std::size_t width) {
  DbcState s;
  s.v = Tensor<T>({width}, T{1});
  s.v.set_requires_grad(true);
  return s;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Tensor<T>({channels}, T{1});
  p.beta = Tensor<T>({channels}, T{0});
  p.running_mean = Tensor<T>({channels}, T{0});
  p.running_var = Tensor<T>({channels}, T{1});
  p.gamma.set_requires_grad(true);
  p.beta.set_requires_grad(true);
  return p;
}

template <typename T>
void LayerParams<T>::validate() const {
  if (!kernel.defined()) throw ContractError("layer has no kernel");
  const std::size_t o = kernel.dim(0);
  if (bias.defined() && bias.numel() != o) {
    throw DimensionError("bias " + shape_string(bias.shape()) + " does not match kernel " +
                         shape_string(kernel.shape()));
  }
  if (bn) {
    for (const Tensor<T>* t : {&bn->gamma, &bn->beta, &bn->running_mean, &bn->running_var}) {
      if (t->numel() != o) {
        throw DimensionError("batch-norm vector " + shape_string(t->shape()) + " does not match kernel " +
                             shape_string(kernel.shape()));
      }
    }
  }
}

template <typename T>
Mask dbc_binarize(std::span<const T> v, T threshold) {
  Mask b(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) b[i] = v[i] > threshold ? 1 : 0;
  return b;
}

template <typename T>
Tensor<T> dbc_forward(const Tensor<T>& features, const DbcState<T>& state) {
  if (features.rank() < 2 || features.dim(1) != state.width()) {
    throw DimensionError("dbc_forward: features " + shape_string(features.shape()) + " do not match indicator of " +
                         std::to_string(state.width()) + " channels");
  }
  return mul_channel(features, binarize_ste(state.v, state.threshold));
}

template <typename T>
Tensor<T> mask_tensor(const Mask& mask) {
  std::vector<T> values(mask.begin(), mask.end());
  return Tensor<T>({mask.size()}, std::move(values));
}

template <typename T>
bool relu_mask_commutation_check(const Tensor<T>& features, const DbcState<T>& state) {
  NoGradGuard guard;
  const Tensor<T> lhs = relu(dbc_forward(features, state));
  const Tensor<T> rhs = dbc_forward(relu(features), state);
  for (std::size_t i = 0; i < lhs.numel(); ++i) {
    if (lhs[i] != rhs[i]) return false;
  }
  return true;
}

#define PAS_INSTANTIATE_LAYERS(T)                                                      \
  template struct DbcState<T>;                                                         \
  template struct BatchNormParams<T>;                                                  \
  template struct LayerParams<T>;                                                      \
  template Mask dbc_binarize(std::span<const T>, T);                                   \
  template Tensor<T> dbc_forward(const Tensor<T>&, const DbcState<T>&);                \
  template Tensor<T> mask_tensor(const Mask&);                                         \
  template bool relu_mask_commutation_check(const Tensor<T>&, const DbcState<T>&);

PAS_INSTANTIATE_LAYERS(float)
PAS_INSTANTIATE_LAYERS(double)

}  // namespace pas
