#pragma once

#include <vector>

#include "pas/network.hpp"

namespace pas {

// A single convolution with bias, the inference form of a block branch set.
template <typename T>
struct FusedConv {
  Tensor<T> kernel;  // O×I×K×K, or C×1×K×K when depthwise
  Tensor<T> bias;    // O
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool depthwise = false;
  bool identity_fused = false;

  Tensor<T> apply(const Tensor<T>& x) const;
};

// kernel'[o] = kernel[o]·γ[o]/√(σ²[o]+eps); bias'[o] = β[o] + (bias[o] − μ[o])·γ[o]/√(σ²[o]+eps).
// `bias` may be undefined (treated as zero).
template <typename T>
FusedConv<T> fuse_bn(const Tensor<T>& kernel, const Tensor<T>& bias, const BatchNormParams<T>& bn,
                     ConvGeometry geom = {}, bool depthwise = false);

// Adds the identity as a delta kernel at the spatial center. Single-shot.
template <typename T>
FusedConv<T> fuse_identity(const FusedConv<T>& fused);

// Zero-pads a 1×1 branch into the center of a K×K kernel and sums biases.
template <typename T>
FusedConv<T> fuse_1x1_branch(const FusedConv<T>& fused, const FusedConv<T>& branch);

// Every multi-branch block becomes plain convs with biases and no BN; the
// indicator sites and their states are carried over in the same order.
template <typename T>
Network<T> fuse_network(const Network<T>& net);

// Removes masked channels: producer rows, consumer columns, depthwise
// channels and classifier inputs. `net` must be fused. The result has no
// indicator sites.
template <typename T>
Network<T> squeeze(const Network<T>& net, const std::vector<Mask>& masks);

// fuse_network → squeeze with the network's own frozen masks.
template <typename T>
Network<T> deploy(const Network<T>& supernet);

}  // namespace pas
