#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "pas/tensor.hpp"

namespace pas {

// Convolution geometry shared by the dense and depthwise kernels.
struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

// Cross-correlation. input N×I×H×W, kernel O×I×K×K, bias O (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, ConvGeometry geom);

// Per-channel convolution. input N×C×H×W, kernel C×1×K×K, bias C (may be undefined).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           ConvGeometry geom);

// y = gamma·(x − μ)/√(σ² + eps) + beta over N×C×H×W (or N×C). Training mode
// uses batch statistics and folds them into the running buffers with an
// exponential moving average; eval mode reads the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T eps, bool training, T momentum);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// x N×F, weight O×F, bias O (may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// N×C×H×W -> N×C
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// x N×C×… scaled per channel by s (length C).
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T>
Tensor<T> square(const Tensor<T>& x);

// Mean softmax cross-entropy over the batch. logits N×K.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// b = 1 if v > threshold else 0; backward passes the gradient straight
// through (∂L/∂v = ∂L/∂b).
template <typename T>
Tensor<T> binarize_ste(const Tensor<T>& v, T threshold);

// Gradient rule of the per-channel mask b applied to `features`:
// grad_features[:,c] = b[c]·upstream[:,c] and
// grad_mask[c] = Σ_{n,h,w} upstream·features with no masking.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> dbc_backward_rule(std::span<const T> upstream, std::span<const T> features,
                                                            std::span<const T> mask, const Shape& feature_shape);

}  // namespace pas
