#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pas/graph.hpp"
#include "pas/layers.hpp"

namespace pas {

enum class ParamRole { Kernel, Bias, BnGamma, BnBeta };

// A trainable tensor plus the channel sites that gate it. An element is
// "gated" (frozen for the step) when the mask of its row site or column site
// is 0 at that index.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  ParamRole role = ParamRole::Kernel;
  int row_site = -1;
  int col_site = -1;
  std::size_t rows = 0;
  std::size_t cols = 1;  // input channels covered by one row (1 for vectors and depthwise)
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct BlockParams {
  std::vector<LayerParams<T>> layers;  // indexed by ConvUnit::slot; unused slots have no kernel
};

// Layer names of each slot, in slot order.
const std::vector<std::string>& slot_names(BlockKind kind);

template <typename T>
class Network {
 public:
  Network() = default;
  explicit Network(NetworkGraph graph);

  // He-normal kernels, zero biases, identity BN, all indicators at 1.0.
  void init(std::uint64_t seed);

  const NetworkGraph& graph() const { return graph_; }
  const ChannelPlan& plan() const { return plan_; }
  std::vector<BlockParams<T>>& blocks() { return blocks_; }
  const std::vector<BlockParams<T>>& blocks() const { return blocks_; }
  std::vector<DbcState<T>>& dbc() { return dbc_; }
  const std::vector<DbcState<T>>& dbc() const { return dbc_; }
  std::size_t num_sites() const { return dbc_.size(); }

  // One binarized indicator tensor per site, on the tape when v is trainable.
  // Share the result between forward() and the MACs regularizer so a single
  // backward reaches v through both.
  std::vector<Tensor<T>> binarize_sites() const;

  Tensor<T> forward(const Tensor<T>& x, const std::vector<Tensor<T>>& site_masks, bool training);
  Tensor<T> forward(const Tensor<T>& x, bool training);

  std::vector<Mask> masks() const;
  // Writes v = 1 for kept and v = 0 for dropped channels.
  void set_mask(std::size_t site, const Mask& mask);
  void freeze_policy();
  bool policy_frozen() const;

  std::vector<ParamRef<T>> parameters();
  std::vector<BufferRef<T>> buffers();
  std::size_t num_parameters() const;

  // BN running statistics are final (set after training, or explicitly).
  bool bn_finalized() const { return bn_finalized_; }
  void set_bn_finalized(bool v) { bn_finalized_ = v; }

  template <typename U>
  Network<U> cast() const;

  int site_of(std::size_t block, SiteKind kind) const;

 private:
  Tensor<T> run_block(std::size_t i, const Tensor<T>& x, const std::vector<Tensor<T>>* site_masks, bool training);

  NetworkGraph graph_;
  ChannelPlan plan_;
  std::vector<BlockParams<T>> blocks_;
  std::vector<DbcState<T>> dbc_;
  std::vector<std::vector<int>> block_sites_;  // [block][SiteKind] -> site index or −1
  bool bn_finalized_ = false;

  template <typename U>
  friend class Network;
};

template <typename U, typename T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  if (!t.defined()) return {};
  std::vector<U> values(t.data().begin(), t.data().end());
  return Tensor<U>(t.shape(), std::move(values));
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> out(graph_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t s = 0; s < blocks_[b].layers.size(); ++s) {
      const auto& src = blocks_[b].layers[s];
      auto& dst = out.blocks_[b].layers[s];
      dst.kernel = tensor_cast<U>(src.kernel);
      if (dst.kernel.defined()) dst.kernel.set_requires_grad(true);
      dst.bias = tensor_cast<U>(src.bias);
      if (dst.bias.defined()) dst.bias.set_requires_grad(true);
      if (src.bn) {
        BatchNormParams<U> bn;
        bn.gamma = tensor_cast<U>(src.bn->gamma);
        bn.gamma.set_requires_grad(true);
        bn.beta = tensor_cast<U>(src.bn->beta);
        bn.beta.set_requires_grad(true);
        bn.running_mean = tensor_cast<U>(src.bn->running_mean);
        bn.running_var = tensor_cast<U>(src.bn->running_var);
        bn.eps = static_cast<U>(src.bn->eps);
        bn.momentum = static_cast<U>(src.bn->momentum);
        dst.bn = std::move(bn);
      } else {
        dst.bn.reset();
      }
    }
  }
  for (std::size_t s = 0; s < dbc_.size(); ++s) {
    auto& d = out.dbc_[s];
    d.v = tensor_cast<U>(dbc_[s].v);
    d.threshold = static_cast<U>(dbc_[s].threshold);
    d.frozen = dbc_[s].frozen;
    d.v.set_requires_grad(!d.frozen);
  }
  out.bn_finalized_ = bn_finalized_;
  return out;
}

}  // namespace pas
