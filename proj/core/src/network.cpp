#include "pas/network.hpp"

#include <cmath>
#include <random>

#include "pas/error.hpp"

namespace pas {

const std::vector<std::string>& slot_names(BlockKind kind) {
  static const std::vector<std::string> plain = {"conv"};
  static const std::vector<std::string> rep = {"conv", "branch1x1"};
  static const std::vector<std::string> light = {"expand", "dw", "project"};
  static const std::vector<std::string> bottleneck = {"conv1", "conv2", "conv3", "downsample"};
  static const std::vector<std::string> fc = {"fc"};
  static const std::vector<std::string> none;
  switch (kind) {
    case BlockKind::PlainConv: return plain;
    case BlockKind::RepConv3x3: return rep;
    case BlockKind::RepLightweight: return light;
    case BlockKind::Bottleneck: return bottleneck;
    case BlockKind::Linear: return fc;
    case BlockKind::Pool: return none;
  }
  return none;
}

namespace {

template <typename T>
LayerParams<T> make_layer(std::size_t out, std::size_t in, std::size_t k, bool bias, bool bn) {
  LayerParams<T> lp;
  lp.kernel = k == 0 ? Tensor<T>({out, in}, T{0}) : Tensor<T>({out, in, k, k}, T{0});
  lp.kernel.set_requires_grad(true);
  if (bias) {
    lp.bias = Tensor<T>({out}, T{0});
    lp.bias.set_requires_grad(true);
  }
  if (bn) lp.bn = BatchNormParams<T>::identity(out);
  return lp;
}

template <typename T>
Tensor<T> apply_conv(const Tensor<T>& x, LayerParams<T>& lp, bool depthwise, ConvGeometry g, bool training) {
  Tensor<T> y = depthwise ? depthwise_conv2d(x, lp.kernel, lp.bias, g) : conv2d(x, lp.kernel, lp.bias, g);
  if (lp.bn) {
    auto& bn = *lp.bn;
    y = batch_norm(y, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps, training, bn.momentum);
  }
  return y;
}

}  // namespace

template <typename T>
Network<T>::Network(NetworkGraph graph) : graph_(std::move(graph)), plan_(plan_channels(graph_)) {
  blocks_.resize(graph_.blocks.size());
  block_sites_.assign(graph_.blocks.size(), std::vector<int>(2, -1));
  for (std::size_t s = 0; s < plan_.sites.size(); ++s) {
    const auto& site = plan_.sites[s];
    block_sites_[site.block][static_cast<std::size_t>(site.site)] = static_cast<int>(s);
    dbc_.push_back(DbcState<T>::all_on(site.width));
  }
  for (std::size_t i = 0; i < graph_.blocks.size(); ++i) {
    const BlockSpec& b = graph_.blocks[i];
    auto& layers = blocks_[i].layers;
    switch (b.kind) {
      case BlockKind::PlainConv:
        layers.push_back(make_layer<T>(b.out_channels, b.depthwise ? 1 : b.in_channels, b.kernel, b.has_bias,
                                       b.has_bn));
        break;
      case BlockKind::RepConv3x3:
        layers.push_back(make_layer<T>(b.out_channels, b.in_channels, 3, false, true));
        if (b.has_1x1_branch) layers.push_back(make_layer<T>(b.out_channels, b.in_channels, 1, false, true));
        break;
      case BlockKind::RepLightweight:
        layers.push_back(b.has_expand ? make_layer<T>(b.mid_channels, b.in_channels, 1, false, true)
                                      : LayerParams<T>{});
        layers.push_back(make_layer<T>(b.mid_channels, 1, 3, false, true));
        layers.push_back(make_layer<T>(b.out_channels, b.mid_channels, 1, false, true));
        break;
      case BlockKind::Bottleneck:
        layers.push_back(make_layer<T>(b.mid_channels, b.in_channels, 1, false, true));
        layers.push_back(make_layer<T>(b.mid_channels, b.mid_channels, 3, false, true));
        layers.push_back(make_layer<T>(b.out_channels, b.mid_channels, 1, false, true));
        if (!b.has_identity) layers.push_back(make_layer<T>(b.out_channels, b.in_channels, 1, false, true));
        break;
      case BlockKind::Linear:
        layers.push_back(make_layer<T>(b.out_channels, b.in_channels, 0, true, false));
        break;
      case BlockKind::Pool: break;
    }
  }
}

template <typename T>
void Network<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& block : blocks_) {
    for (auto& lp : block.layers) {
      if (!lp.kernel.defined()) continue;
      const std::size_t fan_in = lp.kernel.numel() / lp.kernel.dim(0);
      const bool is_linear = lp.kernel.rank() == 2;
      const double std = is_linear ? std::sqrt(1.0 / fan_in) : std::sqrt(2.0 / fan_in);
      for (auto& w : lp.kernel.data()) w = static_cast<T>(std * normal(rng));
      if (lp.bias.defined()) std::fill(lp.bias.data().begin(), lp.bias.data().end(), T{0});
      if (lp.bn) {
        auto fresh = BatchNormParams<T>::identity(lp.kernel.dim(0));
        fresh.eps = lp.bn->eps;
        fresh.momentum = lp.bn->momentum;
        lp.bn = std::move(fresh);
      }
    }
  }
  for (auto& d : dbc_) {
    d = DbcState<T>::all_on(d.width());
  }
  bn_finalized_ = false;
}

template <typename T>
int Network<T>::site_of(std::size_t block, SiteKind kind) const {
  return block_sites_.at(block)[static_cast<std::size_t>(kind)];
}

template <typename T>
std::vector<Tensor<T>> Network<T>::binarize_sites() const {
  std::vector<Tensor<T>> out;
  out.reserve(dbc_.size());
  for (const auto& d : dbc_) out.push_back(binarize_ste(d.v, d.threshold));
  return out;
}

template <typename T>
Tensor<T> Network<T>::run_block(std::size_t i, const Tensor<T>& x, const std::vector<Tensor<T>>* site_masks,
                                bool training) {
  const BlockSpec& b = graph_.blocks[i];
  auto& layers = blocks_[i].layers;
  // Masks go after the ReLU: same forward for binary masks, but a masked
  // channel still sees a gradient on its indicator.
  auto gate = [&](const Tensor<T>& y, SiteKind kind) {
    const int s = site_of(i, kind);
    if (s < 0 || !site_masks) return y;
    return mul_channel(y, (*site_masks)[static_cast<std::size_t>(s)]);
  };
  switch (b.kind) {
    case BlockKind::PlainConv: {
      Tensor<T> y = apply_conv(x, layers[0], b.depthwise, {b.stride, b.padding}, training);
      return gate(b.relu ? relu(y) : y, SiteKind::Output);
    }
    case BlockKind::RepConv3x3: {
      Tensor<T> y = apply_conv(x, layers[0], false, {b.stride, 1}, training);
      if (b.has_1x1_branch) y = add(y, apply_conv(x, layers[1], false, {b.stride, 0}, training));
      if (b.has_identity) y = add(y, x);
      return gate(relu(y), SiteKind::Output);
    }
    case BlockKind::RepLightweight: {
      Tensor<T> e = b.has_expand ? relu(apply_conv(x, layers[0], false, {1, 0}, training)) : x;
      Tensor<T> d = apply_conv(e, layers[1], true, {b.stride, 1}, training);
      if (b.has_identity) d = add(d, e);
      d = gate(relu(d), SiteKind::Expand);
      Tensor<T> p = apply_conv(d, layers[2], false, {1, 0}, training);
      if (b.has_identity && b.mid_channels == b.out_channels) p = add(p, d);
      return gate(relu(p), SiteKind::Output);
    }
    case BlockKind::Pool:
      if (b.pool != PoolKind::GlobalAverage) throw ContractError("max pooling is only supported for MACs counting");
      return global_avg_pool(x);
    case BlockKind::Linear:
      return linear(x, layers[0].kernel, layers[0].bias);
    case BlockKind::Bottleneck:
      throw ContractError("bottleneck blocks are dimension-only and cannot be evaluated");
  }
  return x;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, const std::vector<Tensor<T>>& site_masks, bool training) {
  if (site_masks.size() != dbc_.size()) {
    throw DimensionError("forward: got " + std::to_string(site_masks.size()) + " site masks for " +
                         std::to_string(dbc_.size()) + " sites");
  }
  if (x.rank() != 4 || x.dim(1) != graph_.input.channels) {
    throw DimensionError("forward: input " + shape_string(x.shape()) + " does not match " +
                         std::to_string(graph_.input.channels) + " input channels");
  }
  Tensor<T> h = x;
  for (std::size_t i = 0; i < graph_.blocks.size(); ++i) h = run_block(i, h, &site_masks, training);
  return h;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, bool training) {
  return forward(x, binarize_sites(), training);
}

template <typename T>
std::vector<Mask> Network<T>::masks() const {
  std::vector<Mask> out;
  out.reserve(dbc_.size());
  for (const auto& d : dbc_) out.push_back(dbc_binarize(d));
  return out;
}

template <typename T>
void Network<T>::set_mask(std::size_t site, const Mask& mask) {
  auto& d = dbc_.at(site);
  if (mask.size() != d.width()) {
    throw DimensionError("mask of length " + std::to_string(mask.size()) + " for site of width " +
                         std::to_string(d.width()));
  }
  for (std::size_t c = 0; c < mask.size(); ++c) d.v[c] = mask[c] ? T{1} : T{0};
}

template <typename T>
void Network<T>::freeze_policy() {
  for (auto& d : dbc_) {
    d.frozen = true;
    d.v.set_requires_grad(false);
    d.v.zero_grad();
  }
}

template <typename T>
bool Network<T>::policy_frozen() const {
  for (const auto& d : dbc_) {
    if (!d.frozen) return false;
  }
  return true;
}

template <typename T>
std::vector<ParamRef<T>> Network<T>::parameters() {
  std::vector<ParamRef<T>> out;
  std::vector<std::vector<const ConvUnit*>> units(graph_.blocks.size());
  for (const auto& u : plan_.units) units[u.block].push_back(&u);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const BlockSpec& b = graph_.blocks[i];
    const auto& names = slot_names(b.kind);
    for (std::size_t s = 0; s < blocks_[i].layers.size(); ++s) {
      auto& lp = blocks_[i].layers[s];
      if (!lp.kernel.defined()) continue;
      // The optional 1×1 branch of a rep block shares the dims of the fused unit.
      const std::size_t unit_slot = b.kind == BlockKind::RepConv3x3 ? 0 : s;
      const ConvUnit* unit = nullptr;
      for (const ConvUnit* u : units[i]) {
        if (u->slot == unit_slot) unit = u;
      }
      int row_site = -1, col_site = -1;
      std::size_t cols = 1;
      if (unit) {
        row_site = plan_.dims[unit->out_dim].site;
        if (unit->kind != UnitKind::Depthwise) {
          col_site = plan_.dims[unit->in_dim].site;
          cols = unit->in_channels;
        }
      }
      const std::string prefix = "b" + std::to_string(i) + "." + names[s];
      const std::size_t rows = lp.kernel.dim(0);
      out.push_back({prefix + ".weight", lp.kernel, ParamRole::Kernel, row_site, col_site, rows, cols});
      if (lp.bias.defined()) out.push_back({prefix + ".bias", lp.bias, ParamRole::Bias, row_site, -1, rows, 1});
      if (lp.bn) {
        out.push_back({prefix + ".bn.gamma", lp.bn->gamma, ParamRole::BnGamma, row_site, -1, rows, 1});
        out.push_back({prefix + ".bn.beta", lp.bn->beta, ParamRole::BnBeta, row_site, -1, rows, 1});
      }
    }
  }
  return out;
}

template <typename T>
std::vector<BufferRef<T>> Network<T>::buffers() {
  std::vector<BufferRef<T>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& names = slot_names(graph_.blocks[i].kind);
    for (std::size_t s = 0; s < blocks_[i].layers.size(); ++s) {
      auto& lp = blocks_[i].layers[s];
      if (!lp.bn) continue;
      const std::string prefix = "b" + std::to_string(i) + "." + names[s];
      out.push_back({prefix + ".bn.running_mean", lp.bn->running_mean});
      out.push_back({prefix + ".bn.running_var", lp.bn->running_var});
    }
  }
  return out;
}

template <typename T>
std::size_t Network<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& block : blocks_) {
    for (const auto& lp : block.layers) {
      if (!lp.kernel.defined()) continue;
      n += lp.kernel.numel();
      if (lp.bias.defined()) n += lp.bias.numel();
      if (lp.bn) n += lp.bn->gamma.numel() + lp.bn->beta.numel();
    }
  }
  return n;
}

template class Network<float>;
template class Network<double>;

}  // namespace pas
