#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pas/ops.hpp"
#include "pas/tensor.hpp"

namespace pas {

// Binary keep/drop vector, one entry per channel.
using Mask = std::vector<std::uint8_t>;

inline constexpr double kDefaultDbcThreshold = 0.5;

// Depth-wise binary convolution indicator attached to one channel dimension.
// v starts at 1.0 (every channel kept) and stays inside [0, 1].
template <typename T>
struct DbcState {
  Tensor<T> v;
  T threshold = static_cast<T>(kDefaultDbcThreshold);
  bool frozen = false;

  static DbcState all_on(std::size_t width);
  std::size_t width() const { return v.numel(); }
};

// Eval-mode affine batch normalization parameters.
template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta, running_mean, running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  static BatchNormParams identity(std::size_t channels);
};

// One convolution (or linear) layer: kernel O×I×K×K (O×I for linear), optional
// bias and optional batch normalization on the output.
template <typename T>
struct LayerParams {
  Tensor<T> kernel;
  Tensor<T> bias;  // undefined when absent
  std::optional<BatchNormParams<T>> bn;

  std::size_t out_channels() const { return kernel.dim(0); }
  void validate() const;
};

// b[i] = 1 iff v[i] > threshold.
template <typename T>
Mask dbc_binarize(std::span<const T> v, T threshold);

template <typename T>
Mask dbc_binarize(const DbcState<T>& state) {
  return dbc_binarize<T>(state.v.data(), state.threshold);
}

// features N×O×H×W masked per channel by the binarized indicator, with
// straight-through gradients into state.v.
template <typename T>
Tensor<T> dbc_forward(const Tensor<T>& features, const DbcState<T>& state);

// Constant (non-differentiable) mask tensor of the indicator's current b.
template <typename T>
Tensor<T> mask_tensor(const Mask& mask);

// True iff relu(dbc(x)) == dbc(relu(x)) elementwise.
template <typename T>
bool relu_mask_commutation_check(const Tensor<T>& features, const DbcState<T>& state);

}  // namespace pas
