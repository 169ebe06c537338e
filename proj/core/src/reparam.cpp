#include "pas/reparam.hpp"

#include <cmath>

#include "pas/error.hpp"

namespace pas {

template <typename T>
Tensor<T> FusedConv<T>::apply(const Tensor<T>& x) const {
  const ConvGeometry g{stride, padding};
  return depthwise ? depthwise_conv2d(x, kernel, bias, g) : conv2d(x, kernel, bias, g);
}

template <typename T>
FusedConv<T> fuse_bn(const Tensor<T>& kernel, const Tensor<T>& bias, const BatchNormParams<T>& bn, ConvGeometry geom,
                     bool depthwise) {
  const std::size_t o = kernel.dim(0);
  if (bn.gamma.numel() != o || bn.beta.numel() != o || bn.running_mean.numel() != o || bn.running_var.numel() != o) {
    throw DimensionError("fuse_bn: batch-norm length does not match kernel " + shape_string(kernel.shape()));
  }
  if (bias.defined() && bias.numel() != o) throw DimensionError("fuse_bn: bias length does not match kernel");
  FusedConv<T> out;
  out.kernel = kernel.detach();
  out.bias = Tensor<T>({o}, T{0});
  out.stride = geom.stride;
  out.padding = geom.padding;
  out.depthwise = depthwise;
  const std::size_t per = kernel.numel() / o;
  for (std::size_t c = 0; c < o; ++c) {
    const T denom = bn.running_var[c] + bn.eps;
    if (!(denom > T{0})) {
      throw NumericError("fuse_bn: running variance + eps is not positive for channel " + std::to_string(c));
    }
    const T factor = bn.gamma[c] / std::sqrt(denom);
    for (std::size_t j = 0; j < per; ++j) out.kernel[c * per + j] *= factor;
    const T b = bias.defined() ? bias[c] : T{0};
    out.bias[c] = bn.beta[c] + (b - bn.running_mean[c]) * factor;
  }
  return out;
}

template <typename T>
FusedConv<T> fuse_identity(const FusedConv<T>& fused) {
  if (fused.identity_fused) throw ContractError("fuse_identity: identity branch already fused into this conv");
  const auto& shape = fused.kernel.shape();
  const std::size_t o = shape[0], i = shape[1], k = shape[2];
  if (k % 2 == 0 || shape[3] != k) throw StructuralError("fuse_identity: kernel must be square with odd size");
  if (fused.stride != 1 || fused.padding != (k - 1) / 2) {
    throw StructuralError("fuse_identity: identity branch needs stride 1 and padding " + std::to_string((k - 1) / 2));
  }
  if (fused.depthwise ? i != 1 : o != i) {
    throw StructuralError("fuse_identity: identity branch needs matching in/out channels, kernel is " +
                          shape_string(shape));
  }
  FusedConv<T> out = fused;
  out.kernel = fused.kernel.detach();
  out.bias = fused.bias.detach();
  const std::size_t center = (k / 2) * k + k / 2;
  for (std::size_t c = 0; c < o; ++c) {
    const std::size_t col = fused.depthwise ? 0 : c;
    out.kernel[((c * i) + col) * k * k + center] += T{1};
  }
  out.identity_fused = true;
  return out;
}

template <typename T>
FusedConv<T> fuse_1x1_branch(const FusedConv<T>& fused, const FusedConv<T>& branch) {
  const auto& ms = fused.kernel.shape();
  const auto& bs = branch.kernel.shape();
  if (bs.size() != 4 || bs[2] != 1 || bs[3] != 1) throw StructuralError("fuse_1x1_branch: branch kernel must be 1×1");
  if (ms[0] != bs[0] || ms[1] != bs[1] || fused.stride != branch.stride || fused.depthwise != branch.depthwise) {
    throw StructuralError("fuse_1x1_branch: branch " + shape_string(bs) + " does not match main kernel " +
                          shape_string(ms));
  }
  const std::size_t k = ms[2];
  if (k % 2 == 0 || fused.padding != (k - 1) / 2 || branch.padding != 0) {
    throw StructuralError("fuse_1x1_branch: main conv must use same-padding and the branch none");
  }
  FusedConv<T> out = fused;
  out.kernel = fused.kernel.detach();
  out.bias = fused.bias.detach();
  const std::size_t center = (k / 2) * k + k / 2;
  for (std::size_t oi = 0; oi < ms[0] * ms[1]; ++oi) out.kernel[oi * k * k + center] += branch.kernel[oi];
  for (std::size_t c = 0; c < ms[0]; ++c) out.bias[c] += branch.bias[c];
  return out;
}

namespace {

template <typename T>
FusedConv<T> fold(const LayerParams<T>& lp, ConvGeometry g, bool depthwise) {
  if (lp.bn) return fuse_bn(lp.kernel, lp.bias, *lp.bn, g, depthwise);
  FusedConv<T> out;
  out.kernel = lp.kernel.detach();
  out.bias = lp.bias.defined() ? lp.bias.detach() : Tensor<T>({lp.kernel.dim(0)}, T{0});
  out.stride = g.stride;
  out.padding = g.padding;
  out.depthwise = depthwise;
  return out;
}

template <typename T>
LayerParams<T> to_layer(const FusedConv<T>& f) {
  LayerParams<T> lp;
  lp.kernel = f.kernel.detach();
  lp.kernel.set_requires_grad(true);
  lp.bias = f.bias.detach();
  lp.bias.set_requires_grad(true);
  return lp;
}

BlockSpec plain_from(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, bool depthwise, bool relu,
                     bool site) {
  BlockSpec b = BlockSpec::plain_conv(in, out, k, stride, false, site);
  b.depthwise = depthwise;
  b.relu = relu;
  return b;
}

}  // namespace

template <typename T>
Network<T> fuse_network(const Network<T>& net) {
  const NetworkGraph& g = net.graph();
  NetworkGraph fused_graph;
  fused_graph.input = g.input;
  fused_graph.num_classes = g.num_classes;
  std::vector<std::vector<LayerParams<T>>> fused_layers;

  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    const BlockSpec& b = g.blocks[i];
    const auto& layers = net.blocks()[i].layers;
    auto has = [&](SiteKind k) { return net.site_of(i, k) >= 0; };
    switch (b.kind) {
      case BlockKind::PlainConv: {
        FusedConv<T> f = fold(layers[0], {b.stride, b.padding}, b.depthwise);
        fused_graph.blocks.push_back(
            plain_from(b.in_channels, b.out_channels, b.kernel, b.stride, b.depthwise, b.relu, has(SiteKind::Output)));
        fused_layers.push_back({to_layer(f)});
        break;
      }
      case BlockKind::RepConv3x3: {
        FusedConv<T> f = fold(layers[0], {b.stride, 1}, false);
        if (b.has_1x1_branch) f = fuse_1x1_branch(f, fold(layers[1], {b.stride, 0}, false));
        if (b.has_identity) f = fuse_identity(f);
        fused_graph.blocks.push_back(
            plain_from(b.in_channels, b.out_channels, 3, b.stride, false, true, has(SiteKind::Output)));
        fused_layers.push_back({to_layer(f)});
        break;
      }
      case BlockKind::RepLightweight: {
        if (b.has_expand) {
          fused_graph.blocks.push_back(plain_from(b.in_channels, b.mid_channels, 1, 1, false, true, false));
          fused_layers.push_back({to_layer(fold(layers[0], {1, 0}, false))});
        }
        FusedConv<T> dw = fold(layers[1], {b.stride, 1}, true);
        if (b.has_identity) dw = fuse_identity(dw);
        fused_graph.blocks.push_back(
            plain_from(b.mid_channels, b.mid_channels, 3, b.stride, true, true, has(SiteKind::Expand)));
        fused_layers.push_back({to_layer(dw)});
        FusedConv<T> proj = fold(layers[2], {1, 0}, false);
        if (b.has_identity && b.mid_channels == b.out_channels) proj = fuse_identity(proj);
        fused_graph.blocks.push_back(
            plain_from(b.mid_channels, b.out_channels, 1, 1, false, true, has(SiteKind::Output)));
        fused_layers.push_back({to_layer(proj)});
        break;
      }
      case BlockKind::Pool:
        fused_graph.blocks.push_back(b);
        fused_layers.push_back({});
        break;
      case BlockKind::Linear: {
        fused_graph.blocks.push_back(b);
        LayerParams<T> lp;
        lp.kernel = layers[0].kernel.detach();
        lp.kernel.set_requires_grad(true);
        lp.bias = layers[0].bias.defined() ? layers[0].bias.detach() : Tensor<T>({b.out_channels}, T{0});
        lp.bias.set_requires_grad(true);
        fused_layers.push_back({lp});
        break;
      }
      case BlockKind::Bottleneck:
        throw StructuralError("fuse_network: bottleneck blocks have no fused form");
    }
  }

  Network<T> out(fused_graph);
  for (std::size_t i = 0; i < fused_layers.size(); ++i) out.blocks()[i].layers = std::move(fused_layers[i]);
  if (out.num_sites() != net.num_sites()) throw StructuralError("fuse_network: indicator sites changed during fusion");
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    auto& d = out.dbc()[s];
    d.v = net.dbc()[s].v.detach();
    d.threshold = net.dbc()[s].threshold;
    d.frozen = net.dbc()[s].frozen;
    d.v.set_requires_grad(!d.frozen);
  }
  out.set_bn_finalized(true);
  return out;
}

namespace {

template <typename T>
Tensor<T> gather_vector(const Tensor<T>& v, const std::vector<std::size_t>& keep) {
  std::vector<T> out;
  out.reserve(keep.size());
  for (auto k : keep) out.push_back(v[k]);
  Tensor<T> t({keep.size()}, std::move(out));
  t.set_requires_grad(true);
  return t;
}

// Rows `rows` and (unless depthwise) columns `cols` of an O×I[×K×K] kernel.
template <typename T>
Tensor<T> gather_kernel(const Tensor<T>& k, const std::vector<std::size_t>& rows, const std::vector<std::size_t>* cols) {
  const auto& s = k.shape();
  const std::size_t in = s[1];
  const std::size_t area = s.size() == 4 ? s[2] * s[3] : 1;
  const std::size_t new_in = cols ? cols->size() : in;
  std::vector<T> out;
  out.reserve(rows.size() * new_in * area);
  for (auto r : rows) {
    for (std::size_t j = 0; j < new_in; ++j) {
      const std::size_t c = cols ? (*cols)[j] : j;
      const T* src = k.data().data() + (r * in + c) * area;
      out.insert(out.end(), src, src + area);
    }
  }
  Shape shape = s;
  shape[0] = rows.size();
  shape[1] = new_in;
  Tensor<T> t(shape, std::move(out));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
Network<T> squeeze(const Network<T>& net, const std::vector<Mask>& masks) {
  const ChannelPlan& plan = net.plan();
  const NetworkGraph& g = net.graph();
  if (masks.size() != plan.sites.size()) {
    throw DimensionError("squeeze: got " + std::to_string(masks.size()) + " masks for " +
                         std::to_string(plan.sites.size()) + " sites");
  }
  for (const BlockSpec& b : g.blocks) {
    if (b.kind != BlockKind::PlainConv && b.kind != BlockKind::Pool && b.kind != BlockKind::Linear) {
      throw StructuralError("squeeze: network must be fused first (found " + std::string(to_string(b.kind)) + ")");
    }
  }

  std::vector<std::vector<std::size_t>> keep(plan.dims.size());
  for (std::size_t d = 0; d < plan.dims.size(); ++d) {
    const int s = plan.dims[d].site;
    if (s < 0) {
      keep[d].resize(plan.dims[d].width);
      for (std::size_t c = 0; c < keep[d].size(); ++c) keep[d][c] = c;
      continue;
    }
    const Mask& m = masks[static_cast<std::size_t>(s)];
    if (m.size() != plan.dims[d].width) {
      throw DimensionError("squeeze: mask " + std::to_string(s) + " has length " + std::to_string(m.size()) +
                           ", site width is " + std::to_string(plan.dims[d].width));
    }
    for (std::size_t c = 0; c < m.size(); ++c) {
      if (m[c]) keep[d].push_back(c);
    }
    if (keep[d].empty()) {
      throw StructuralError("layer fully pruned: site " + std::to_string(s) + " (block " +
                            std::to_string(plan.sites[static_cast<std::size_t>(s)].block) + ") keeps no channels");
    }
  }

  NetworkGraph out_graph;
  out_graph.input = g.input;
  out_graph.num_classes = g.num_classes;
  std::vector<std::vector<LayerParams<T>>> out_layers(g.blocks.size());
  std::vector<const ConvUnit*> unit_of(g.blocks.size(), nullptr);
  for (const auto& u : plan.units) unit_of[u.block] = &u;

  std::size_t width = g.input.channels;
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    BlockSpec b = g.blocks[i];
    b.dbc_sites.clear();
    if (b.kind == BlockKind::Pool) {
      b.in_channels = b.out_channels = width;
      out_graph.blocks.push_back(b);
      continue;
    }
    const ConvUnit& u = *unit_of[i];
    const LayerParams<T>& src = net.blocks()[i].layers[0];
    const auto& rows = keep[u.out_dim];
    const auto& cols = keep[u.in_dim];
    const bool depthwise = u.kind == UnitKind::Depthwise;
    LayerParams<T> lp;
    lp.kernel = gather_kernel(src.kernel, rows, depthwise ? nullptr : &cols);
    if (src.bias.defined()) lp.bias = gather_vector(src.bias, rows);
    if (src.bn) {
      BatchNormParams<T> bn = *src.bn;
      bn.gamma = gather_vector(src.bn->gamma, rows);
      bn.beta = gather_vector(src.bn->beta, rows);
      bn.running_mean = gather_vector(src.bn->running_mean, rows).detach();
      bn.running_var = gather_vector(src.bn->running_var, rows).detach();
      lp.bn = std::move(bn);
    }
    b.in_channels = depthwise ? rows.size() : cols.size();
    b.out_channels = rows.size();
    width = rows.size();
    out_graph.blocks.push_back(b);
    out_layers[i].push_back(std::move(lp));
  }

  Network<T> out(out_graph);
  for (std::size_t i = 0; i < out_layers.size(); ++i) {
    if (!out_layers[i].empty()) out.blocks()[i].layers = std::move(out_layers[i]);
  }
  out.set_bn_finalized(net.bn_finalized());
  return out;
}

template <typename T>
Network<T> deploy(const Network<T>& supernet) {
  if (!supernet.policy_frozen()) throw ContractError("policy not frozen: freeze every indicator before deploying");
  if (!supernet.bn_finalized()) {
    throw ContractError("batch-norm statistics were never finalized; train or finalize before deploying");
  }
  const Network<T> fused = fuse_network(supernet);
  return squeeze(fused, supernet.masks());
}

#define PAS_INSTANTIATE_REPARAM(T)                                                                       \
  template struct FusedConv<T>;                                                                          \
  template FusedConv<T> fuse_bn(const Tensor<T>&, const Tensor<T>&, const BatchNormParams<T>&, ConvGeometry, \
                                bool);                                                                   \
  template FusedConv<T> fuse_identity(const FusedConv<T>&);                                              \
  template FusedConv<T> fuse_1x1_branch(const FusedConv<T>&, const FusedConv<T>&);                       \
  template Network<T> fuse_network(const Network<T>&);                                                   \
  template Network<T> squeeze(const Network<T>&, const std::vector<Mask>&);                              \
  template Network<T> deploy(const Network<T>&);

PAS_INSTANTIATE_REPARAM(float)
PAS_INSTANTIATE_REPARAM(double)

}  // namespace pas
