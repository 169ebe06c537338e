#include "pas/cost.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "pas/error.hpp"

namespace pas {

namespace {

std::uint64_t spatial_factor(const ConvUnit& u) {
  if (u.kind == UnitKind::Linear) return 1;
  return static_cast<std::uint64_t>(u.out_height) * u.out_width * u.kernel * u.kernel;
}

std::vector<std::size_t> active_dim_widths(const ChannelPlan& plan, const std::optional<std::vector<Mask>>& masks) {
  std::vector<std::size_t> widths(plan.dims.size());
  for (std::size_t d = 0; d < plan.dims.size(); ++d) widths[d] = plan.dims[d].width;
  if (!masks) return widths;
  if (masks->size() != plan.sites.size()) {
    throw DimensionError("count_macs: got " + std::to_string(masks->size()) + " masks for " +
                         std::to_string(plan.sites.size()) + " sites");
  }
  for (std::size_t s = 0; s < plan.sites.size(); ++s) {
    const Mask& m = (*masks)[s];
    if (m.size() != plan.sites[s].width) {
      throw DimensionError("count_macs: mask " + std::to_string(s) + " has length " + std::to_string(m.size()) +
                           ", site width is " + std::to_string(plan.sites[s].width));
    }
    std::size_t on = 0;
    for (auto bit : m) on += bit ? 1 : 0;
    widths[plan.sites[s].dim] = on;
  }
  return widths;
}

}  // namespace

MacsReport count_macs(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks, CountOptions options) {
  const ChannelPlan plan = plan_channels(graph);
  const auto active = active_dim_widths(plan, masks);
  MacsReport report;
  for (const ConvUnit& u : plan.units) {
    LayerMacs row;
    row.name = u.name;
    row.block = u.block;
    row.original_width = u.out_channels;
    row.active_width = active[u.out_dim];
    row.original_in = u.in_channels;
    row.active_in = u.kind == UnitKind::Depthwise ? 1 : (options.coupled_inputs ? active[u.in_dim] : u.in_channels);
    const std::uint64_t in_full = u.kind == UnitKind::Depthwise ? 1 : u.in_channels;
    row.macs = static_cast<std::uint64_t>(row.active_width) * row.active_in * spatial_factor(u);
    report.baseline += static_cast<std::uint64_t>(u.out_channels) * in_full * spatial_factor(u);
    report.total += row.macs;
    report.layers.push_back(std::move(row));
  }
  for (const auto& site : plan.sites) report.site_widths.push_back(active[site.dim]);
  return report;
}

std::uint64_t total_macs(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks,
                         CountOptions options) {
  return count_macs(graph, masks, options).total;
}

std::string format_macs(double macs) {
  char buf[64];
  if (macs >= 1e9) std::snprintf(buf, sizeof buf, "%.3f G", macs / 1e9);
  else if (macs >= 1e6) std::snprintf(buf, sizeof buf, "%.3f M", macs / 1e6);
  else if (macs >= 1e3) std::snprintf(buf, sizeof buf, "%.3f K", macs / 1e3);
  else std::snprintf(buf, sizeof buf, "%.0f", macs);
  return buf;
}

std::string MacsReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %10s %10s %16s\n", "layer", "original", "active", "macs");
  os << line;
  for (const auto& l : layers) {
    std::snprintf(line, sizeof line, "%-16s %10zu %10zu %16llu\n", l.name.c_str(), l.original_width, l.active_width,
                  static_cast<unsigned long long>(l.macs));
    os << line;
  }
  os << "total " << total << " (" << format_macs(static_cast<double>(total)) << ")";
  if (baseline) {
    std::snprintf(line, sizeof line, ", %.4f of unpruned", fraction());
    os << line;
  }
  os << '\n';
  return os.str();
}

std::string MacsReport::to_csv() const {
  std::ostringstream os;
  os << "layer,original_width,active_width,macs\n";
  for (const auto& l : layers) os << l.name << ',' << l.original_width << ',' << l.active_width << ',' << l.macs << '\n';
  return os.str();
}

MacsBudget MacsBudget::from_fraction(std::uint64_t baseline, double fraction, double beta) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigKeyError("target_macs_fraction", "target MACs fraction must lie in (0, 1], got " +
                                                     std::to_string(fraction));
  }
  MacsBudget b;
  b.normalizer = static_cast<double>(baseline);
  b.target_macs = fraction * b.normalizer;
  b.beta = beta;
  b.validate();
  return b;
}

void MacsBudget::validate() const {
  if (!(normalizer > 0.0) || !std::isfinite(normalizer)) throw ConfigError("MACs normalizer must be positive");
  if (!(target_macs > 0.0 && target_macs <= normalizer)) {
    throw ConfigError("target MACs must lie in (0, normalizer]");
  }
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigKeyError("beta", "beta must be a finite value >= 0");
}

template <typename T>
Tensor<T> soft_macs(const ChannelPlan& plan, const std::vector<Tensor<T>>& site_masks, CountOptions options) {
  if (site_masks.size() != plan.sites.size()) {
    throw DimensionError("soft_macs: got " + std::to_string(site_masks.size()) + " masks for " +
                         std::to_string(plan.sites.size()) + " sites");
  }
  // Active width per dim as a scalar tensor on the tape (or a constant).
  std::vector<Tensor<T>> widths(plan.dims.size());
  for (std::size_t d = 0; d < plan.dims.size(); ++d) {
    const int s = plan.dims[d].site;
    if (s >= 0) {
      const auto& m = site_masks[static_cast<std::size_t>(s)];
      if (m.numel() != plan.dims[d].width) throw DimensionError("soft_macs: mask width mismatch at site " + std::to_string(s));
      widths[d] = sum(m);
    }
  }
  double constant = 0.0;
  Tensor<T> total;
  auto accumulate = [&](const Tensor<T>& term) { total = total.defined() ? add(total, term) : term; };
  for (const ConvUnit& u : plan.units) {
    const double factor = static_cast<double>(spatial_factor(u));
    const Tensor<T>& out_w = widths[u.out_dim];
    double out_const = static_cast<double>(u.out_channels);
    if (u.kind == UnitKind::Depthwise) {
      if (out_w.defined()) accumulate(scale(out_w, static_cast<T>(factor)));
      else constant += out_const * factor;
      continue;
    }
    const bool in_varies = options.coupled_inputs && widths[u.in_dim].defined();
    const double in_const = static_cast<double>(u.in_channels);
    if (out_w.defined() && in_varies) {
      accumulate(scale(mul(out_w, widths[u.in_dim]), static_cast<T>(factor)));
    } else if (out_w.defined()) {
      accumulate(scale(out_w, static_cast<T>(factor * in_const)));
    } else if (in_varies) {
      accumulate(scale(widths[u.in_dim], static_cast<T>(factor * out_const)));
    } else {
      constant += out_const * in_const * factor;
    }
  }
  if (!total.defined()) return Tensor<T>::scalar(static_cast<T>(constant));
  return add_scalar(total, static_cast<T>(constant));
}

template <typename T>
Tensor<T> reg_loss(const ChannelPlan& plan, const std::vector<Tensor<T>>& site_masks, const MacsBudget& budget,
                   CountOptions options) {
  if (plan.sites.empty()) throw ContractError("reg_loss needs at least one prunable site");
  budget.validate();
  Tensor<T> macs = soft_macs(plan, site_masks, options);
  Tensor<T> residual = scale(add_scalar(macs, static_cast<T>(-budget.target_macs)), static_cast<T>(1.0 / budget.normalizer));
  return square(residual);
}

template <typename T>
Tensor<T> reg_loss(const Network<T>& net, const MacsBudget& budget, CountOptions options) {
  return reg_loss(net.plan(), net.binarize_sites(), budget, options);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& task_loss, const Tensor<T>& reg, double beta) {
  if (!(beta >= 0.0)) throw ConfigKeyError("beta", "beta must be >= 0");
  return add(task_loss, scale(reg, static_cast<T>(beta)));
}

#define PAS_INSTANTIATE_COST(T)                                                                              \
  template Tensor<T> soft_macs(const ChannelPlan&, const std::vector<Tensor<T>>&, CountOptions);              \
  template Tensor<T> reg_loss(const ChannelPlan&, const std::vector<Tensor<T>>&, const MacsBudget&,           \
                              CountOptions);                                                                 \
  template Tensor<T> reg_loss(const Network<T>&, const MacsBudget&, CountOptions);                            \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);

PAS_INSTANTIATE_COST(float)
PAS_INSTANTIATE_COST(double)

}  // namespace pas
