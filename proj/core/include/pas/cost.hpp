#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pas/graph.hpp"
#include "pas/layers.hpp"
#include "pas/network.hpp"

namespace pas {

struct CountOptions {
  // Count a consumer's input width as its producer's active width (what the
  // squeezed network actually computes). When false, input widths stay at the
  // unpruned value.
  bool coupled_inputs = true;
};

struct LayerMacs {
  std::string name;
  std::size_t block = 0;
  std::size_t original_width = 0;  // output channels before pruning
  std::size_t active_width = 0;
  std::size_t original_in = 0;
  std::size_t active_in = 0;
  std::uint64_t macs = 0;
};

struct MacsReport {
  std::vector<LayerMacs> layers;
  std::vector<std::size_t> site_widths;  // active width per prunable site
  std::uint64_t total = 0;
  std::uint64_t baseline = 0;  // same graph without masks

  double fraction() const { return baseline ? static_cast<double>(total) / static_cast<double>(baseline) : 0.0; }
  std::string to_table() const;
  std::string to_csv() const;
};

// MACs of conv and linear layers. Masks, when given, hold one vector per
// prunable site in prunable_sites() order.
MacsReport count_macs(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks = std::nullopt,
                      CountOptions options = {});
std::uint64_t total_macs(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks = std::nullopt,
                         CountOptions options = {});

std::string format_macs(double macs);  // "4.09 G", "617.5 K"

struct MacsBudget {
  double target_macs = 0.0;
  double beta = 0.5;
  double normalizer = 1.0;

  // target = fraction·baseline, normalizer = baseline.
  static MacsBudget from_fraction(std::uint64_t baseline, double fraction, double beta);
  void validate() const;
};

// ((macs(b) − target) / normalizer)², differentiable in the site masks.
// `site_masks` are the binarized indicators (one per site, on the tape).
template <typename T>
Tensor<T> reg_loss(const ChannelPlan& plan, const std::vector<Tensor<T>>& site_masks, const MacsBudget& budget,
                   CountOptions options = {});

template <typename T>
Tensor<T> reg_loss(const Network<T>& net, const MacsBudget& budget, CountOptions options = {});

// Differentiable MACs total from the site masks.
template <typename T>
Tensor<T> soft_macs(const ChannelPlan& plan, const std::vector<Tensor<T>>& site_masks, CountOptions options = {});

template <typename T>
Tensor<T> total_loss(const Tensor<T>& task_loss, const Tensor<T>& reg, double beta);

}  // namespace pas
