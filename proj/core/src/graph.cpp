#include "pas/graph.hpp"

#include <algorithm>
#include <cmath>

#include "pas/error.hpp"
#include "pas/ops.hpp"

namespace pas {

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::PlainConv: return "plain_conv";
    case BlockKind::RepConv3x3: return "rep_conv3x3";
    case BlockKind::RepLightweight: return "rep_lightweight";
    case BlockKind::Bottleneck: return "bottleneck";
    case BlockKind::Pool: return "pool";
    case BlockKind::Linear: return "linear";
  }
  return "?";
}

std::string_view to_string(SiteKind kind) { return kind == SiteKind::Expand ? "expand" : "output"; }

BlockSpec BlockSpec::plain_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, bool with_bn,
                                bool with_dbc) {
  BlockSpec b;
  b.kind = BlockKind::PlainConv;
  b.in_channels = in;
  b.out_channels = out;
  b.kernel = kernel;
  b.stride = stride;
  b.padding = kernel / 2;
  b.has_bn = with_bn;
  b.has_bias = !with_bn;
  if (with_dbc) b.dbc_sites = {SiteKind::Output};
  return b;
}

BlockSpec BlockSpec::depthwise_conv(std::size_t channels, std::size_t kernel, std::size_t stride, bool with_bn) {
  BlockSpec b = plain_conv(channels, channels, kernel, stride, with_bn);
  b.depthwise = true;
  return b;
}

BlockSpec BlockSpec::rep_conv3x3(std::size_t in, std::size_t out, std::size_t stride, bool with_1x1_branch) {
  BlockSpec b;
  b.kind = BlockKind::RepConv3x3;
  b.in_channels = in;
  b.out_channels = out;
  b.kernel = 3;
  b.stride = stride;
  b.padding = 1;
  b.has_identity = in == out && stride == 1;
  b.has_1x1_branch = with_1x1_branch;
  b.dbc_sites = {SiteKind::Output};
  return b;
}

BlockSpec BlockSpec::rep_lightweight(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride,
                                     bool expand) {
  BlockSpec b;
  b.kind = BlockKind::RepLightweight;
  b.in_channels = in;
  b.mid_channels = expand ? mid : in;
  b.out_channels = out;
  b.kernel = 3;
  b.stride = stride;
  b.padding = 1;
  b.has_expand = expand;
  b.has_identity = stride == 1;
  b.dbc_sites = {SiteKind::Expand, SiteKind::Output};
  return b;
}

BlockSpec BlockSpec::bottleneck(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride) {
  BlockSpec b;
  b.kind = BlockKind::Bottleneck;
  b.in_channels = in;
  b.mid_channels = mid;
  b.out_channels = out;
  b.kernel = 3;
  b.stride = stride;
  b.padding = 1;
  b.has_identity = in == out && stride == 1;
  return b;
}

BlockSpec BlockSpec::global_pool(std::size_t channels) {
  BlockSpec b;
  b.kind = BlockKind::Pool;
  b.in_channels = b.out_channels = channels;
  b.pool = PoolKind::GlobalAverage;
  b.kernel = 0;
  b.padding = 0;
  return b;
}

BlockSpec BlockSpec::max_pool(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
  BlockSpec b;
  b.kind = BlockKind::Pool;
  b.in_channels = b.out_channels = channels;
  b.pool = PoolKind::Max;
  b.kernel = kernel;
  b.stride = stride;
  b.padding = padding;
  return b;
}

BlockSpec BlockSpec::linear(std::size_t in, std::size_t out) {
  BlockSpec b;
  b.kind = BlockKind::Linear;
  b.in_channels = in;
  b.out_channels = out;
  b.kernel = 1;
  b.padding = 0;
  return b;
}

namespace {

std::string block_label(std::size_t i) { return "block " + std::to_string(i); }

void check_identity(std::size_t i, const BlockSpec& b) {
  if (!b.has_identity) return;
  switch (b.kind) {
    case BlockKind::RepConv3x3:
    case BlockKind::Bottleneck:
      if (b.in_channels != b.out_channels || b.stride != 1) {
        throw StructuralError(block_label(i) + ": identity branch needs in_channels == out_channels and stride 1");
      }
      break;
    case BlockKind::RepLightweight:
      if (b.stride != 1) throw StructuralError(block_label(i) + ": identity branch needs stride 1");
      break;
    default:
      throw StructuralError(block_label(i) + ": " + std::string(to_string(b.kind)) + " cannot carry an identity");
  }
}

}  // namespace

void NetworkGraph::validate() const {
  (void)plan_channels(*this);
}

ChannelPlan plan_channels(const NetworkGraph& graph) {
  if (graph.blocks.empty()) throw StructuralError("graph has no blocks");
  ChannelPlan plan;
  plan.dims.push_back(ChannelDim{graph.input.channels, -1, {}, {}});
  std::size_t cur = 0;
  std::size_t height = graph.input.height, width = graph.input.width;
  bool saw_linear = false;

  auto new_dim = [&](std::size_t w) {
    plan.dims.push_back(ChannelDim{w, -1, {}, {}});
    return plan.dims.size() - 1;
  };
  auto add_unit = [&](ConvUnit u) {
    const std::size_t k = u.kind == UnitKind::Linear ? 1 : u.kernel;
    if (u.kind == UnitKind::Linear) {
      u.out_height = u.out_width = 1;
    } else {
      u.out_height = conv_output_size(height, k, u.stride, u.padding);
      u.out_width = conv_output_size(width, k, u.stride, u.padding);
      height = u.out_height;
      width = u.out_width;
    }
    const std::size_t idx = plan.units.size();
    plan.dims[u.out_dim].producers.push_back(idx);
    if (u.kind != UnitKind::Depthwise) plan.dims[u.in_dim].consumers.push_back(idx);
    plan.units.push_back(std::move(u));
  };
  auto attach_site = [&](std::size_t block, SiteKind kind, std::size_t dim) {
    if (plan.dims[dim].site >= 0) {
      throw StructuralError(block_label(block) + ": channel dimension already carries an indicator");
    }
    plan.dims[dim].site = static_cast<int>(plan.sites.size());
    plan.sites.push_back(PrunableSite{block, kind, plan.dims[dim].width, dim});
  };
  // A depthwise conv extends a dimension; once an indicator sits on that
  // dimension nothing may write it again, or masked channels would be revived
  // by the depthwise bias.
  auto extend_depthwise = [&](std::size_t block, std::size_t dim) {
    if (plan.dims[dim].site >= 0) {
      throw StructuralError(block_label(block) +
                            ": depthwise conv follows an indicator on the same channels; the indicator must sit "
                            "after the depthwise chain");
    }
  };
  auto has_site = [](const BlockSpec& b, SiteKind k) {
    return std::find(b.dbc_sites.begin(), b.dbc_sites.end(), k) != b.dbc_sites.end();
  };

  for (std::size_t i = 0; i < graph.blocks.size(); ++i) {
    const BlockSpec& b = graph.blocks[i];
    const std::string prefix = "b" + std::to_string(i);
    if (saw_linear) throw StructuralError(block_label(i) + ": blocks after the classifier are not supported");
    if (b.in_channels == 0 || b.out_channels == 0) throw StructuralError(block_label(i) + ": zero channel count");
    if (b.in_channels != plan.dims[cur].width) {
      throw StructuralError(block_label(i) + ": in_channels " + std::to_string(b.in_channels) +
                            " does not match producer width " + std::to_string(plan.dims[cur].width));
    }
    if (b.stride == 0) throw StructuralError(block_label(i) + ": stride must be positive");
    check_identity(i, b);
    for (SiteKind s : b.dbc_sites) {
      const bool ok = (b.kind == BlockKind::RepLightweight) ||
                      (s == SiteKind::Output && (b.kind == BlockKind::PlainConv || b.kind == BlockKind::RepConv3x3));
      if (!ok) {
        throw StructuralError(block_label(i) + ": " + std::string(to_string(b.kind)) + " has no " +
                              std::string(to_string(s)) + " indicator site");
      }
    }

    switch (b.kind) {
      case BlockKind::PlainConv: {
        ConvUnit u{i, 0, prefix + ".conv", b.depthwise ? UnitKind::Depthwise : UnitKind::Conv, cur, 0,
                   b.in_channels, b.out_channels, b.kernel, b.stride, b.padding};
        if (b.depthwise) {
          if (b.in_channels != b.out_channels) throw StructuralError(block_label(i) + ": depthwise needs in == out");
          extend_depthwise(i, cur);
          u.out_dim = cur;
        } else {
          u.out_dim = new_dim(b.out_channels);
        }
        add_unit(u);
        cur = u.out_dim;
        if (has_site(b, SiteKind::Output)) attach_site(i, SiteKind::Output, cur);
        break;
      }
      case BlockKind::RepConv3x3: {
        if (b.kernel != 3 || b.padding != 1) throw StructuralError(block_label(i) + ": rep block must be 3×3/pad 1");
        ConvUnit u{i, 0, prefix + ".conv", UnitKind::Conv, cur, new_dim(b.out_channels),
                   b.in_channels, b.out_channels, 3, b.stride, 1};
        add_unit(u);
        cur = u.out_dim;
        if (has_site(b, SiteKind::Output)) attach_site(i, SiteKind::Output, cur);
        break;
      }
      case BlockKind::RepLightweight: {
        std::size_t mid = cur;
        if (b.has_expand) {
          ConvUnit e{i, 0, prefix + ".expand", UnitKind::Conv, cur, new_dim(b.mid_channels),
                     b.in_channels, b.mid_channels, 1, 1, 0};
          add_unit(e);
          mid = e.out_dim;
        } else if (b.mid_channels != b.in_channels) {
          throw StructuralError(block_label(i) + ": lightweight block without expand needs mid == in");
        }
        extend_depthwise(i, mid);
        add_unit(ConvUnit{i, 1, prefix + ".dw", UnitKind::Depthwise, mid, mid, b.mid_channels, b.mid_channels, 3,
                          b.stride, 1});
        if (has_site(b, SiteKind::Expand)) attach_site(i, SiteKind::Expand, mid);
        ConvUnit p{i, 2, prefix + ".project", UnitKind::Conv, mid, new_dim(b.out_channels),
                   b.mid_channels, b.out_channels, 1, 1, 0};
        add_unit(p);
        cur = p.out_dim;
        if (has_site(b, SiteKind::Output)) attach_site(i, SiteKind::Output, cur);
        break;
      }
      case BlockKind::Bottleneck: {
        const std::size_t in_dim = cur;
        const std::size_t in_h = height, in_w = width;
        ConvUnit c1{i, 0, prefix + ".conv1", UnitKind::Conv, cur, new_dim(b.mid_channels),
                    b.in_channels, b.mid_channels, 1, 1, 0};
        add_unit(c1);
        ConvUnit c2{i, 1, prefix + ".conv2", UnitKind::Conv, c1.out_dim, new_dim(b.mid_channels),
                    b.mid_channels, b.mid_channels, 3, b.stride, 1};
        add_unit(c2);
        const std::size_t out_dim = b.has_identity ? in_dim : new_dim(b.out_channels);
        ConvUnit c3{i, 2, prefix + ".conv3", UnitKind::Conv, c2.out_dim, out_dim,
                    b.mid_channels, b.out_channels, 1, 1, 0};
        add_unit(c3);
        if (!b.has_identity) {
          const std::size_t oh = height, ow = width;
          height = in_h;
          width = in_w;
          add_unit(ConvUnit{i, 3, prefix + ".downsample", UnitKind::Conv, in_dim, out_dim, b.in_channels,
                            b.out_channels, 1, b.stride, 0});
          if (height != oh || width != ow) throw StructuralError(block_label(i) + ": shortcut spatial mismatch");
        }
        cur = out_dim;
        break;
      }
      case BlockKind::Pool: {
        if (b.out_channels != b.in_channels) throw StructuralError(block_label(i) + ": pool changes channel count");
        if (b.pool == PoolKind::GlobalAverage) {
          height = width = 1;
        } else {
          height = conv_output_size(height, b.kernel, b.stride, b.padding);
          width = conv_output_size(width, b.kernel, b.stride, b.padding);
        }
        break;
      }
      case BlockKind::Linear: {
        if (height != 1 || width != 1) {
          throw StructuralError(block_label(i) + ": classifier needs a globally pooled input");
        }
        plan.classifier_dim = cur;
        ConvUnit u{i, 0, prefix + ".fc", UnitKind::Linear, cur, new_dim(b.out_channels),
                   b.in_channels, b.out_channels, 1, 1, 0};
        add_unit(u);
        cur = u.out_dim;
        saw_linear = true;
        break;
      }
    }
  }
  if (!saw_linear) throw StructuralError("graph must end with a linear classifier");
  if (graph.num_classes != plan.dims[cur].width) {
    throw StructuralError("classifier width " + std::to_string(plan.dims[cur].width) + " does not match num_classes " +
                          std::to_string(graph.num_classes));
  }
  return plan;
}

std::vector<PrunableSite> prunable_sites(const NetworkGraph& graph) { return plan_channels(graph).sites; }

std::size_t parameter_count(const NetworkGraph& graph) {
  std::size_t total = 0;
  for (const BlockSpec& b : graph.blocks) {
    switch (b.kind) {
      case BlockKind::PlainConv: {
        const std::size_t per_out = b.depthwise ? 1 : b.in_channels;
        total += b.out_channels * per_out * b.kernel * b.kernel;
        if (b.has_bias) total += b.out_channels;
        if (b.has_bn) total += 2 * b.out_channels;
        break;
      }
      case BlockKind::RepConv3x3:
        total += b.out_channels * b.in_channels * 9 + 2 * b.out_channels;
        if (b.has_1x1_branch) total += b.out_channels * b.in_channels + 2 * b.out_channels;
        break;
      case BlockKind::RepLightweight:
        if (b.has_expand) total += b.mid_channels * b.in_channels + 2 * b.mid_channels;
        total += b.mid_channels * 9 + 2 * b.mid_channels;
        total += b.out_channels * b.mid_channels + 2 * b.out_channels;
        break;
      case BlockKind::Bottleneck:
        total += b.mid_channels * b.in_channels + 2 * b.mid_channels;
        total += b.mid_channels * b.mid_channels * 9 + 2 * b.mid_channels;
        total += b.out_channels * b.mid_channels + 2 * b.out_channels;
        if (!b.has_identity) total += b.out_channels * b.in_channels + 2 * b.out_channels;
        break;
      case BlockKind::Pool: break;
      case BlockKind::Linear: total += b.out_channels * b.in_channels + b.out_channels; break;
    }
  }
  return total;
}

namespace {

std::vector<std::size_t> stage_depths(std::size_t depth) {
  std::vector<std::size_t> per(3, depth / 3);
  for (std::size_t r = 0; r < depth % 3; ++r) per[2 - r] += 1;
  return per;
}

}  // namespace

NetworkGraph build_toy_net(std::size_t width_base, std::size_t depth, std::size_t num_classes, InputShape input) {
  if (depth < 3) throw ConfigError("build_toy_net: depth must be at least 3, got " + std::to_string(depth));
  if (width_base == 0 || num_classes == 0) throw ConfigError("build_toy_net: width_base and num_classes must be positive");
  NetworkGraph g;
  g.input = input;
  g.num_classes = num_classes;
  std::size_t channels = input.channels;
  const auto per_stage = stage_depths(depth);
  for (std::size_t s = 0; s < per_stage.size(); ++s) {
    const std::size_t w = width_base << s;
    for (std::size_t j = 0; j < per_stage[s]; ++j) {
      g.blocks.push_back(BlockSpec::rep_conv3x3(channels, w, j == 0 ? 2 : 1));
      channels = w;
    }
  }
  g.blocks.push_back(BlockSpec::global_pool(channels));
  g.blocks.push_back(BlockSpec::linear(channels, num_classes));
  g.validate();
  return g;
}

NetworkGraph build_toy_lightweight_net(std::size_t width_base, std::size_t depth, std::size_t num_classes,
                                       std::size_t expansion, InputShape input) {
  if (depth < 3) throw ConfigError("build_toy_lightweight_net: depth must be at least 3");
  if (expansion == 0) throw ConfigError("build_toy_lightweight_net: expansion must be positive");
  NetworkGraph g;
  g.input = input;
  g.num_classes = num_classes;
  g.blocks.push_back(BlockSpec::plain_conv(input.channels, width_base, 3, 1, true, true));
  std::size_t channels = width_base;
  const auto per_stage = stage_depths(depth);
  for (std::size_t s = 0; s < per_stage.size(); ++s) {
    const std::size_t w = width_base << s;
    for (std::size_t j = 0; j < per_stage[s]; ++j) {
      g.blocks.push_back(BlockSpec::rep_lightweight(channels, channels * expansion, w, j == 0 ? 2 : 1));
      channels = w;
    }
  }
  g.blocks.push_back(BlockSpec::global_pool(channels));
  g.blocks.push_back(BlockSpec::linear(channels, num_classes));
  g.validate();
  return g;
}

namespace {

NetworkGraph resnet50() {
  NetworkGraph g;
  g.input = {3, 224, 224};
  g.num_classes = 1000;
  g.blocks.push_back(BlockSpec::plain_conv(3, 64, 7, 2));
  g.blocks.push_back(BlockSpec::max_pool(64, 3, 2, 1));
  std::size_t channels = 64;
  const std::size_t layers[4] = {3, 4, 6, 3};
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t mid = 64u << s;
    for (std::size_t j = 0; j < layers[s]; ++j) {
      const std::size_t stride = (j == 0 && s > 0) ? 2 : 1;
      g.blocks.push_back(BlockSpec::bottleneck(channels, mid, mid * 4, stride));
      channels = mid * 4;
    }
  }
  g.blocks.push_back(BlockSpec::global_pool(channels));
  g.blocks.push_back(BlockSpec::linear(channels, 1000));
  return g;
}

NetworkGraph repvgg(const std::size_t (&layers)[4], double a, double b) {
  NetworkGraph g;
  g.input = {3, 224, 224};
  g.num_classes = 1000;
  const std::size_t widths[4] = {static_cast<std::size_t>(64 * a), static_cast<std::size_t>(128 * a),
                                 static_cast<std::size_t>(256 * a), static_cast<std::size_t>(512 * b)};
  std::size_t channels = std::min<std::size_t>(64, static_cast<std::size_t>(64 * a));
  g.blocks.push_back(BlockSpec::rep_conv3x3(3, channels, 2, true));
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t j = 0; j < layers[s]; ++j) {
      g.blocks.push_back(BlockSpec::rep_conv3x3(channels, widths[s], j == 0 ? 2 : 1, true));
      channels = widths[s];
    }
  }
  g.blocks.push_back(BlockSpec::global_pool(channels));
  g.blocks.push_back(BlockSpec::linear(channels, 1000));
  return g;
}

NetworkGraph mobilenet_v2() {
  NetworkGraph g;
  g.input = {3, 224, 224};
  g.num_classes = 1000;
  g.blocks.push_back(BlockSpec::plain_conv(3, 32, 3, 2));
  std::size_t channels = 32;
  struct Setting {
    std::size_t t, c, n, s;
  };
  const Setting settings[] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2}, {6, 64, 4, 2},
                              {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
  for (const auto& st : settings) {
    for (std::size_t j = 0; j < st.n; ++j) {
      BlockSpec blk = BlockSpec::rep_lightweight(channels, channels * st.t, st.c, j == 0 ? st.s : 1, st.t != 1);
      blk.has_identity = false;  // dimension-only
      g.blocks.push_back(blk);
      channels = st.c;
    }
  }
  g.blocks.push_back(BlockSpec::plain_conv(channels, 1280, 1, 1));
  g.blocks.push_back(BlockSpec::global_pool(1280));
  g.blocks.push_back(BlockSpec::linear(1280, 1000));
  return g;
}

}  // namespace

const std::vector<std::string>& reference_graph_names() {
  static const std::vector<std::string> names = {"resnet50",  "repvgg_b1", "repvgg_a2",      "repvgg_b0",
                                                 "repvgg_a1", "repvgg_a0", "mobilenet_v2_x1"};
  return names;
}

NetworkGraph build_reference_graph(std::string_view name) {
  static const std::size_t kA[4] = {2, 4, 14, 1};
  static const std::size_t kB[4] = {4, 6, 16, 1};
  NetworkGraph g;
  if (name == "resnet50") g = resnet50();
  else if (name == "repvgg_b1") g = repvgg(kB, 2.0, 4.0);
  else if (name == "repvgg_a2") g = repvgg(kA, 1.5, 2.75);
  else if (name == "repvgg_b0") g = repvgg(kB, 1.0, 2.5);
  else if (name == "repvgg_a1") g = repvgg(kA, 1.0, 2.5);
  else if (name == "repvgg_a0") g = repvgg(kA, 0.75, 2.5);
  else if (name == "mobilenet_v2_x1") g = mobilenet_v2();
  else {
    std::string valid;
    for (const auto& n : reference_graph_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown architecture '" + std::string(name) + "'; valid names: " + valid);
  }
  g.validate();
  return g;
}

}  // namespace pas
