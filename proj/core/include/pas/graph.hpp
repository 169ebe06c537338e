#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace pas {

enum class BlockKind {
  PlainConv,       // single conv [+BN] [+bias] [+ReLU], optionally depthwise
  RepConv3x3,      // 3×3 conv + BN [+ 1×1 conv + BN] [+ identity], post-block DBC
  RepLightweight,  // [1×1 expand + BN] → 3×3 depthwise + BN [+ identity] → 1×1 project + BN [+ identity]
  Bottleneck,      // ResNet bottleneck; dimension-only, used for MACs fixtures
  Pool,
  Linear,
};

enum class PoolKind { GlobalAverage, Max };

// Where an indicator attaches inside a block. `Expand` is the inner (expanded)
// width of a lightweight block; `Output` is the block output.
enum class SiteKind { Expand, Output };

std::string_view to_string(BlockKind kind);
std::string_view to_string(SiteKind kind);

struct BlockSpec {
  BlockKind kind = BlockKind::PlainConv;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t mid_channels = 0;  // lightweight / bottleneck inner width
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool has_identity = false;
  bool has_1x1_branch = false;  // RepConv3x3
  bool has_expand = true;       // RepLightweight
  bool has_bn = true;           // PlainConv
  bool has_bias = false;        // PlainConv
  bool relu = true;             // PlainConv
  bool depthwise = false;       // PlainConv
  PoolKind pool = PoolKind::GlobalAverage;
  std::vector<SiteKind> dbc_sites;

  static BlockSpec plain_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                              bool with_bn = true, bool with_dbc = false);
  static BlockSpec depthwise_conv(std::size_t channels, std::size_t kernel, std::size_t stride, bool with_bn = true);
  static BlockSpec rep_conv3x3(std::size_t in, std::size_t out, std::size_t stride, bool with_1x1_branch = false);
  static BlockSpec rep_lightweight(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride,
                                   bool expand = true);
  static BlockSpec bottleneck(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride);
  static BlockSpec global_pool(std::size_t channels);
  static BlockSpec max_pool(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding);
  static BlockSpec linear(std::size_t in, std::size_t out);

  bool operator==(const BlockSpec&) const = default;
};

struct InputShape {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  bool operator==(const InputShape&) const = default;
};

// Ordered block list. Immutable once built; validate() checks the channel
// interface between neighbours and identity legality.
struct NetworkGraph {
  std::vector<BlockSpec> blocks;
  InputShape input;
  std::size_t num_classes = 0;

  void validate() const;
  bool operator==(const NetworkGraph&) const = default;
};

enum class UnitKind { Conv, Depthwise, Linear };

// One convolution of the inference-form network. Multi-branch blocks map to
// the single conv they fuse into; lightweight blocks to three units.
struct ConvUnit {
  std::size_t block = 0;
  std::size_t slot = 0;  // index into the block's layer parameters
  std::string name;
  UnitKind kind = UnitKind::Conv;
  std::size_t in_dim = 0, out_dim = 0;  // channel-dimension ids
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kernel = 1, stride = 1, padding = 0;
  std::size_t out_height = 1, out_width = 1;
};

// A set of tensor axes that must keep identical channel subsets: a conv's
// output rows, every consumer's input columns, and any depthwise conv
// operating on it.
struct ChannelDim {
  std::size_t width = 0;
  int site = -1;              // index into prunable_sites(), −1 when unmaskable
  std::vector<std::size_t> producers;  // units writing this dim
  std::vector<std::size_t> consumers;  // units reading this dim as input columns
};

struct PrunableSite {
  std::size_t block = 0;
  SiteKind site = SiteKind::Output;
  std::size_t width = 0;
  std::size_t dim = 0;
  bool operator==(const PrunableSite&) const = default;
};

struct ChannelPlan {
  std::vector<ChannelDim> dims;  // dims[0] is the network input
  std::vector<ConvUnit> units;
  std::vector<PrunableSite> sites;
  std::size_t classifier_dim = 0;  // dimension feeding the final linear layer
};

ChannelPlan plan_channels(const NetworkGraph& graph);

std::vector<PrunableSite> prunable_sites(const NetworkGraph& graph);

// Learnable parameters (kernels, biases, BN affine terms, classifier) of the
// training-form graph, excluding indicators and running statistics.
std::size_t parameter_count(const NetworkGraph& graph);

// RepConv3x3 stack in three stride-2 stages, global pool and classifier.
NetworkGraph build_toy_net(std::size_t width_base, std::size_t depth, std::size_t num_classes,
                           InputShape input = {});

// Stem conv followed by RepLightweight blocks in three stride-2 stages.
NetworkGraph build_toy_lightweight_net(std::size_t width_base, std::size_t depth, std::size_t num_classes,
                                       std::size_t expansion = 2, InputShape input = {});

// Dimension-only published architectures at 224×224.
NetworkGraph build_reference_graph(std::string_view name);
const std::vector<std::string>& reference_graph_names();

}  // namespace pas
