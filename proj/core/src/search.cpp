#include "pas/search.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "pas/error.hpp"
#include "pas/random.hpp"

namespace pas {

void SearchConfig::validate() const {
  if (search_epochs < 1) throw ConfigKeyError("search_epochs", "search_epochs must be at least 1");
  if (batch_size < 2) throw ConfigKeyError("batch_size", "batch_size must be at least 2");
  if (!(effective_lr() > 0.0) || !std::isfinite(effective_lr())) throw ConfigKeyError("base_lr", "learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigKeyError("momentum", "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigKeyError("weight_decay", "weight_decay must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigKeyError("beta", "beta must be >= 0");
  if (!(target_macs_fraction > 0.0 && target_macs_fraction <= 1.0)) {
    throw ConfigKeyError("target_macs_fraction", "target_macs_fraction must lie in (0, 1]");
  }
  if (!std::isfinite(dbc_threshold)) throw ConfigKeyError("dbc_threshold", "threshold must be finite");
  if (!(indicator_lr_scale > 0.0) || !std::isfinite(indicator_lr_scale)) {
    throw ConfigKeyError("indicator_lr_scale", "indicator_lr_scale must be positive");
  }
  if (!(indicator_momentum >= 0.0 && indicator_momentum < 1.0)) {
    throw ConfigKeyError("indicator_momentum", "indicator_momentum must lie in [0, 1)");
  }
  if (!(iterative_l2 >= 0.0)) throw ConfigKeyError("iterative_l2", "iterative_l2 must be >= 0");
  if (!(equal_penalty_lambda >= 0.0)) throw ConfigKeyError("equal_penalty_lambda", "equal_penalty_lambda must be >= 0");
}

double search_lr(const SearchConfig& config, double epoch) {
  const double base = config.effective_lr();
  return config.search_cosine ? cosine_lr(epoch, static_cast<double>(config.search_epochs), base) : base;
}

double cosine_lr(double epoch, double total, double base_lr) {
  if (!(total > 0.0)) return base_lr;
  const double t = std::clamp(epoch / total, 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
void SgdOptimizer<T>::step(Network<T>& net, double lr, const std::vector<Mask>& masks) {
  auto params = net.parameters();
  if (masks.size() != net.num_sites()) throw DimensionError("optimizer step: mask count does not match sites");
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
    }
  }
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    for (T g : net.dbc()[s].v.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in indicator of site " + std::to_string(s));
    }
  }
  if (buffers_.size() != params.size()) {
    buffers_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) buffers_[i].assign(params[i].tensor.numel(), T{0});
  }
  const T mu = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  const T rate = static_cast<T>(lr);
  const T v_rate = static_cast<T>(lr * indicator_lr_scale_);
  const T v_mu = static_cast<T>(indicator_momentum_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.tensor.data();
    auto g = p.tensor.grad();
    auto& buf = buffers_[i];
    const Mask* row_mask = p.row_site >= 0 ? &masks[static_cast<std::size_t>(p.row_site)] : nullptr;
    const Mask* col_mask = p.col_site >= 0 ? &masks[static_cast<std::size_t>(p.col_site)] : nullptr;
    const std::size_t per_row = w.size() / p.rows;
    const std::size_t per_col = per_row / p.cols;
    for (std::size_t e = 0; e < w.size(); ++e) {
      const std::size_t row = e / per_row;
      if (row_mask && !(*row_mask)[row]) continue;
      if (col_mask && !(*col_mask)[(e % per_row) / per_col]) continue;
      T grad = g.empty() ? T{0} : g[e];
      grad += wd * w[e];
      buf[e] = mu * buf[e] + grad;
      w[e] -= rate * buf[e];
    }
  }
  if (v_buffers_.size() != net.num_sites()) {
    v_buffers_.assign(net.num_sites(), {});
    for (std::size_t s = 0; s < net.num_sites(); ++s) v_buffers_[s].assign(net.dbc()[s].width(), T{0});
  }
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    auto& d = net.dbc()[s];
    if (d.frozen) continue;
    auto v = d.v.data();
    auto g = d.v.grad();
    auto& buf = v_buffers_[s];
    for (std::size_t c = 0; c < v.size(); ++c) {
      buf[c] = v_mu * buf[c] + (g.empty() ? T{0} : g[c]);
      v[c] = std::clamp(v[c] - v_rate * buf[c], T{0}, T{1});
    }
  }
}

template <typename T>
void SgdOptimizer<T>::zero_grad(Network<T>& net) const {
  for (auto& p : net.parameters()) p.tensor.zero_grad();
  for (auto& d : net.dbc()) d.v.zero_grad();
}

template <typename T>
void sgd_step(Network<T>& net, double lr, double weight_decay, const std::vector<Mask>& masks) {
  SgdOptimizer<T> opt(0.0, weight_decay);
  opt.step(net, lr, masks);
}

std::vector<std::size_t> PolicyTrajectory::widths(std::size_t epoch) const {
  std::vector<std::size_t> w;
  for (const auto& m : epoch_masks.at(epoch)) w.push_back(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)));
  return w;
}

std::size_t PolicyTrajectory::hamming(std::size_t epoch) const {
  if (epoch == 0 || epoch >= epoch_masks.size()) throw ContractError("hamming: epoch out of range");
  std::size_t d = 0;
  const auto& a = epoch_masks[epoch];
  const auto& b = epoch_masks[epoch - 1];
  for (std::size_t s = 0; s < a.size(); ++s) {
    for (std::size_t c = 0; c < a[s].size(); ++c) d += a[s][c] != b[s][c] ? 1 : 0;
  }
  return d;
}

std::optional<std::size_t> PolicyTrajectory::convergence_epoch() const {
  if (epoch_masks.size() < 2) return std::nullopt;
  const std::size_t last = epoch_masks.size() - 1;
  if (hamming(last) != 0) return std::nullopt;
  std::size_t e = last;
  while (e > 1 && hamming(e - 1) == 0) --e;
  return e;
}

std::string PolicyTrajectory::to_csv() const {
  std::ostringstream os;
  os << "epoch,site,active_width,L_reg\n";
  os.precision(10);
  for (std::size_t e = 0; e < epoch_masks.size(); ++e) {
    const auto w = widths(e);
    const double reg = e == 0 ? (step_reg_loss.empty() ? 0.0 : step_reg_loss.front()) : epoch_reg_loss.at(e - 1);
    for (std::size_t s = 0; s < w.size(); ++s) os << e << ',' << s << ',' << w[s] << ',' << reg << '\n';
  }
  return os.str();
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Pretrain: return "pretrain";
    case Phase::Search: return "search";
    case Phase::Finetune: return "finetune";
  }
  return "?";
}

template <typename T>
Evaluation evaluate(Network<T>& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  NoGradGuard guard;
  const auto masks = net.binarize_sites();
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    auto batch = make_batch<T>(data, idx);
    const Tensor<T> logits = net.forward(batch.images, masks, false);
    loss += static_cast<double>(softmax_cross_entropy(logits, batch.labels).item()) * static_cast<double>(n);
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = logits.data().data() + r * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      correct += best == batch.labels[r] ? 1 : 0;
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()), loss / static_cast<double>(data.size())};
}

namespace {

using GradHook = std::function<void(Network<float>&)>;

void set_policy_frozen(Network<float>& net, bool frozen) {
  if (frozen) {
    net.freeze_policy();
    return;
  }
  for (auto& d : net.dbc()) {
    d.frozen = false;
    d.v.set_requires_grad(true);
  }
}

Network<float> deep_copy(const Network<float>& net) { return net.cast<float>(); }

struct PhaseRunner {
  Network<float>& net;
  const Dataset& data;
  const SearchConfig& cfg;
  const TrainHooks& hooks;
  std::size_t& global_step;

  EpochStats epoch(Phase phase, std::size_t epoch, SgdOptimizer<float>& opt, const std::function<double(double)>& lr_at,
                   const MacsBudget* budget, const GradHook& grad_hook, PolicyTrajectory* traj) {
    const std::size_t nb = data.size() / cfg.batch_size;
    if (nb == 0) throw ContractError("dataset smaller than one batch (" + std::to_string(data.size()) + " samples)");
    const std::uint64_t phase_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(phase) + 17);
    const auto order = epoch_order(data.size(), phase_seed, epoch);
    const CountOptions count_options{cfg.coupled_inputs};
    const Network<float> snapshot = deep_copy(net);
    EpochStats stats;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::span<const std::size_t> idx(order.data() + b * cfg.batch_size, cfg.batch_size);
      auto batch = make_batch<float>(data, idx, cfg.augment, mix_seed(phase_seed, epoch * 1000003ULL + b));
      const std::vector<Mask> masks = net.masks();
      const auto site_masks = net.binarize_sites();
      std::vector<Tensor<float>> forward_masks = site_masks;
      if (!cfg.task_grad_to_indicators) {
        for (auto& m : forward_masks) m = m.detach();
      }
      const bool batch_stats = !(budget && cfg.search_running_bn);
      const Tensor<float> logits = net.forward(batch.images, forward_masks, batch_stats);
      const Tensor<float> task = softmax_cross_entropy(logits, batch.labels);
      Tensor<float> loss = task;
      double reg_value = 0.0;
      if (budget) {
        const Tensor<float> reg = reg_loss(net.plan(), site_masks, *budget, count_options);
        reg_value = reg.item();
        loss = total_loss(task, reg, budget->beta);
      }
      if (!std::isfinite(loss.item())) {
        net = deep_copy(snapshot);
        throw NumericError("loss diverged (" + std::to_string(loss.item()) + ") in " + std::string(to_string(phase)) +
                           " epoch " + std::to_string(epoch) + "; restored the last good state");
      }
      loss.backward();
      if (grad_hook) grad_hook(net);
      try {
        opt.step(net, lr_at(static_cast<double>(epoch) + static_cast<double>(b) / static_cast<double>(nb)), masks);
      } catch (const NumericError&) {
        net = deep_copy(snapshot);
        throw;
      }
      opt.zero_grad(net);

      const std::size_t k = logits.dim(1);
      for (std::size_t r = 0; r < cfg.batch_size; ++r) {
        const float* row = logits.data().data() + r * k;
        correct += static_cast<int>(std::max_element(row, row + k) - row) == batch.labels[r] ? 1 : 0;
      }
      stats.loss += loss.item();
      stats.task_loss += task.item();
      stats.reg_loss += reg_value;
      if (traj) {
        traj->step_reg_loss.push_back(reg_value);
        traj->step_masks.push_back(masks);
      }
      if (hooks.on_step) hooks.on_step(global_step, masks, net);
      ++global_step;
    }
    stats.loss /= static_cast<double>(nb);
    stats.task_loss /= static_cast<double>(nb);
    stats.reg_loss /= static_cast<double>(nb);
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(nb * cfg.batch_size);
    net.set_bn_finalized(true);
    if (hooks.on_epoch) hooks.on_epoch(phase, epoch, net, stats);
    return stats;
  }

  void cosine_phase(Phase phase, std::size_t epochs, const GradHook& grad_hook = {}) {
    SgdOptimizer<float> opt(cfg.momentum, cfg.weight_decay);
    const double base = cfg.effective_lr();
    const double total = static_cast<double>(epochs);
    for (std::size_t e = 0; e < epochs; ++e) {
      epoch(phase, e, opt, [&](double t) { return cosine_lr(t, total, base); }, nullptr, grad_hook, nullptr);
    }
  }
};

void check_not_fully_pruned(const std::vector<Mask>& masks) {
  for (std::size_t s = 0; s < masks.size(); ++s) {
    if (std::find(masks[s].begin(), masks[s].end(), 1) == masks[s].end()) {
      throw StructuralError("layer fully pruned at freeze: site " + std::to_string(s) + " keeps no channels");
    }
  }
}

void finish(SearchResult& r, const Dataset* test, const SearchConfig& cfg) {
  r.masks = r.net.masks();
  const CountOptions opts{cfg.coupled_inputs};
  const MacsReport report = count_macs(r.net.graph(), r.masks, opts);
  r.macs = report.total;
  r.baseline_macs = report.baseline;
  r.target_macs = cfg.target_macs_fraction * static_cast<double>(report.baseline);
  if (test) r.test_accuracy = evaluate(r.net, *test).accuracy;
}

}  // namespace

Network<float> pretrain(const NetworkGraph& graph, const Dataset& train, const SearchConfig& config,
                        const TrainHooks& hooks) {
  config.validate();
  Network<float> net(graph);
  net.init(mix_seed(config.seed, 7));
  for (auto& d : net.dbc()) d.threshold = static_cast<float>(config.dbc_threshold);
  if (config.pretrain_epochs == 0) return net;
  set_policy_frozen(net, true);
  std::size_t step = 0;
  PhaseRunner runner{net, train, config, hooks, step};
  runner.cosine_phase(Phase::Pretrain, config.pretrain_epochs);
  set_policy_frozen(net, false);
  return net;
}

SearchResult run_pas(Network<float> start, const Dataset& train, const Dataset* test, const SearchConfig& config,
                     const TrainHooks& hooks) {
  config.validate();
  if (start.num_sites() == 0) throw ContractError("run_pas: graph has no prunable sites");
  if (train.size() == 0) throw ContractError("run_pas: empty training set");
  SearchResult result;
  result.net = deep_copy(start);
  Network<float>& net = result.net;
  set_policy_frozen(net, false);
  for (auto& d : net.dbc()) d.threshold = static_cast<float>(config.dbc_threshold);

  const CountOptions opts{config.coupled_inputs};
  const MacsBudget budget =
      MacsBudget::from_fraction(count_macs(net.graph(), std::nullopt, opts).baseline, config.target_macs_fraction,
                                config.beta);
  std::size_t step = 0;
  PhaseRunner runner{net, train, config, hooks, step};
  PolicyTrajectory& traj = result.trajectory;
  traj.epoch_masks.push_back(net.masks());
  {
    SgdOptimizer<float> opt(config.momentum, config.weight_decay, config.indicator_lr_scale,
                            config.indicator_momentum);
    for (std::size_t e = 0; e < config.search_epochs; ++e) {
      const EpochStats st = runner.epoch(Phase::Search, e, opt, [&](double t) { return search_lr(config, t); }, &budget, {}, &traj);
      traj.epoch_masks.push_back(net.masks());
      traj.epoch_reg_loss.push_back(st.reg_loss);
    }
  }
  check_not_fully_pruned(net.masks());
  net.freeze_policy();
  runner.cosine_phase(Phase::Finetune, config.finetune_epochs);
  finish(result, test, config);
  return result;
}

SearchResult run_pas(const NetworkGraph& graph, const Dataset& train, const Dataset* test, const SearchConfig& config,
                     const TrainHooks& hooks) {
  return run_pas(pretrain(graph, train, config, hooks), train, test, config, hooks);
}

SearchResult finetune(Network<float> net, const Dataset& train, const Dataset* test, const SearchConfig& config,
                      const TrainHooks& hooks) {
  config.validate();
  if (!net.policy_frozen()) throw ContractError("policy not frozen: finetune needs a frozen policy");
  SearchResult result;
  result.net = deep_copy(net);
  std::size_t step = 0;
  PhaseRunner runner{result.net, train, config, hooks, step};
  runner.cosine_phase(Phase::Finetune, config.finetune_epochs);
  finish(result, test, config);
  return result;
}

std::string_view to_string(BaselineStrategy s) {
  switch (s) {
    case BaselineStrategy::Uniform: return "uniform";
    case BaselineStrategy::OneShotMagnitude: return "one_shot_magnitude";
    case BaselineStrategy::IterativeMagnitude: return "iterative_magnitude";
    case BaselineStrategy::EqualPenalty: return "equal_penalty";
  }
  return "?";
}

BaselineStrategy parse_strategy(std::string_view name) {
  for (auto s : {BaselineStrategy::Uniform, BaselineStrategy::OneShotMagnitude, BaselineStrategy::IterativeMagnitude,
                 BaselineStrategy::EqualPenalty}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigKeyError("strategy", "unknown strategy '" + std::string(name) +
                                       "'; valid: uniform, one_shot_magnitude, iterative_magnitude, equal_penalty");
}

template <typename T>
Tensor<T> site_gamma(const Network<T>& net, std::size_t site) {
  const PrunableSite& ps = net.plan().sites.at(site);
  const BlockSpec& b = net.graph().blocks[ps.block];
  std::size_t slot = 0;
  if (b.kind == BlockKind::RepLightweight) slot = ps.site == SiteKind::Expand ? 1 : 2;
  const auto& lp = net.blocks()[ps.block].layers.at(slot);
  if (!lp.bn) throw ContractError("site " + std::to_string(site) + " has no batch-norm scale to rank channels by");
  return lp.bn->gamma;
}

namespace {

std::vector<Mask> top_k_masks(const Network<float>& net, const std::vector<std::size_t>& keep) {
  std::vector<Mask> masks;
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    const Tensor<float> g = site_gamma(net, s);
    std::vector<std::size_t> idx(g.numel());
    for (std::size_t c = 0; c < idx.size(); ++c) idx[c] = c;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
    Mask m(g.numel(), 0);
    for (std::size_t j = 0; j < keep[s]; ++j) m[idx[j]] = 1;
    masks.push_back(std::move(m));
  }
  return masks;
}

}  // namespace

std::vector<Mask> uniform_masks(const Network<float>& net, double target_macs, CountOptions options) {
  const auto& sites = net.plan().sites;
  auto keep_for = [&](double r) {
    std::vector<std::size_t> keep;
    for (const auto& s : sites) {
      const double k = std::ceil((1.0 - r) * static_cast<double>(s.width) - 1e-9);
      keep.push_back(std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), 1, s.width));
    }
    return keep;
  };
  auto macs_at = [&](double r) {
    return static_cast<double>(total_macs(net.graph(), top_k_masks(net, keep_for(r)), options));
  };
  // Widths only change at r = 1 − k/O; test exactly those ratios, smallest
  // first, so every site is rounded at the same r.
  std::vector<double> ratios = {0.0};
  for (const auto& s : sites)
    for (std::size_t k = 1; k < s.width; ++k) ratios.push_back(1.0 - static_cast<double>(k) / static_cast<double>(s.width));
  std::sort(ratios.begin(), ratios.end());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
  const auto it = std::partition_point(ratios.begin(), ratios.end(), [&](double r) { return macs_at(r) > target_macs; });
  return top_k_masks(net, keep_for(it == ratios.end() ? ratios.back() : *it));
}

std::vector<Mask> magnitude_masks(const Network<float>& net, double target_macs, CountOptions options) {
  struct Entry {
    float mag;
    std::size_t site, channel;
  };
  std::vector<Entry> entries;
  std::vector<Mask> masks;
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    const Tensor<float> g = site_gamma(net, s);
    for (std::size_t c = 0; c < g.numel(); ++c) entries.push_back({std::abs(g[c]), s, c});
    masks.emplace_back(g.numel(), 1);
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.mag < b.mag; });
  std::vector<std::size_t> alive;
  for (const auto& m : masks) alive.push_back(m.size());
  for (const Entry& e : entries) {
    if (static_cast<double>(total_macs(net.graph(), masks, options)) <= target_macs) break;
    if (alive[e.site] <= 1) continue;
    masks[e.site][e.channel] = 0;
    alive[e.site] -= 1;
  }
  return masks;
}

SearchResult run_baseline(BaselineStrategy strategy, Network<float> start, const Dataset& train, const Dataset* test,
                          const SearchConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (start.num_sites() == 0) throw ContractError("run_baseline: graph has no prunable sites");
  SearchResult result;
  result.net = deep_copy(start);
  Network<float>& net = result.net;
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    net.set_mask(s, Mask(net.dbc()[s].width(), 1));
    (void)site_gamma(net, s);
  }
  net.freeze_policy();

  const CountOptions opts{config.coupled_inputs};
  const double target = config.target_macs_fraction * static_cast<double>(count_macs(net.graph(), std::nullopt, opts).baseline);
  std::size_t step = 0;
  PhaseRunner runner{net, train, config, hooks, step};

  // Search phase: ordinary training plus the strategy's γ penalty.
  std::vector<Mask> penalized;  // iterative_magnitude: channels below the median |γ|
  GradHook hook;
  if (strategy == BaselineStrategy::IterativeMagnitude && config.iterative_l2 > 0.0) {
    hook = [&](Network<float>& n) {
      for (std::size_t s = 0; s < n.num_sites(); ++s) {
        Tensor<float> g = site_gamma(n, s);
        auto grad = g.mutable_grad();
        for (std::size_t c = 0; c < g.numel(); ++c) {
          if (penalized[s][c]) grad[c] += static_cast<float>(2.0 * config.iterative_l2) * g[c];
        }
      }
    };
  } else if (strategy == BaselineStrategy::EqualPenalty && config.equal_penalty_lambda > 0.0) {
    hook = [&](Network<float>& n) {
      for (std::size_t s = 0; s < n.num_sites(); ++s) {
        Tensor<float> g = site_gamma(n, s);
        auto grad = g.mutable_grad();
        for (std::size_t c = 0; c < g.numel(); ++c) {
          grad[c] += static_cast<float>(config.equal_penalty_lambda) * static_cast<float>((g[c] > 0) - (g[c] < 0));
        }
      }
    };
  }
  {
    SgdOptimizer<float> opt(config.momentum, config.weight_decay);
    for (std::size_t e = 0; e < config.search_epochs; ++e) {
      if (strategy == BaselineStrategy::IterativeMagnitude) {
        std::vector<float> mags;
        for (std::size_t s = 0; s < net.num_sites(); ++s) {
          for (float g : site_gamma(net, s).data()) mags.push_back(std::abs(g));
        }
        std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2), mags.end());
        const float median = mags[mags.size() / 2];
        penalized.clear();
        for (std::size_t s = 0; s < net.num_sites(); ++s) {
          const Tensor<float> g = site_gamma(net, s);
          Mask m(g.numel(), 0);
          for (std::size_t c = 0; c < g.numel(); ++c) m[c] = std::abs(g[c]) < median ? 1 : 0;
          penalized.push_back(std::move(m));
        }
      }
      runner.epoch(Phase::Search, e, opt, [&](double t) { return search_lr(config, t); }, nullptr, hook, nullptr);
    }
  }

  const std::vector<Mask> masks = strategy == BaselineStrategy::Uniform ? uniform_masks(net, target, opts)
                                                                         : magnitude_masks(net, target, opts);
  for (std::size_t s = 0; s < masks.size(); ++s) net.set_mask(s, masks[s]);
  check_not_fully_pruned(net.masks());
  result.trajectory.epoch_masks.push_back(masks);
  runner.cosine_phase(Phase::Finetune, config.finetune_epochs);
  finish(result, test, config);
  return result;
}

template class SgdOptimizer<float>;
template class SgdOptimizer<double>;
template void sgd_step(Network<float>&, double, double, const std::vector<Mask>&);
template void sgd_step(Network<double>&, double, double, const std::vector<Mask>&);
template Evaluation evaluate(Network<float>&, const Dataset&, std::size_t);
template Evaluation evaluate(Network<double>&, const Dataset&, std::size_t);
template Tensor<float> site_gamma(const Network<float>&, std::size_t);
template Tensor<double> site_gamma(const Network<double>&, std::size_t);

}  // namespace pas
