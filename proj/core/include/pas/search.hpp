#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pas/cost.hpp"
#include "pas/datasets.hpp"
#include "pas/network.hpp"

namespace pas {

struct SearchConfig {
  std::size_t pretrain_epochs = 0;
  std::size_t search_epochs = 10;
  std::size_t finetune_epochs = 50;
  double base_lr = 0.0;  // 0 → 0.4·batch/1024
  std::size_t batch_size = 64;
  double momentum = 0.875;
  double weight_decay = 3.05e-5;
  double beta = 0.5;
  double target_macs_fraction = 0.5;
  std::uint64_t seed = 0;
  double dbc_threshold = 0.5;
  double indicator_lr_scale = 1.0;  // learning-rate multiplier for v
  double indicator_momentum = 0.875;
  bool coupled_inputs = true;
  // When false the task loss sees constant masks, so only the MACs term moves v.
  bool task_grad_to_indicators = true;
  bool augment = true;
  // PaS search normalizes with running BN statistics. Under batch statistics the task
  // loss is invariant to scaling a whole site, so nothing resists pruning it away.
  bool search_running_bn = true;
  // Anneal the search-phase learning rate (weights and indicators) to zero;
  // with a constant rate, channels near the threshold never stop flipping.
  bool search_cosine = true;
  double iterative_l2 = 1e-2;          // iterative_magnitude: extra L2 on below-median γ
  double equal_penalty_lambda = 1e-4;  // equal_penalty: λ·Σ|γ|

  double effective_lr() const { return base_lr > 0.0 ? base_lr : 0.4 * static_cast<double>(batch_size) / 1024.0; }
  void validate() const;
};

double cosine_lr(double epoch, double total, double base_lr);
// Learning rate at fractional search epoch `epoch`.
double search_lr(const SearchConfig& config, double epoch);

// Momentum SGD with channel gating: an element whose row or column channel is
// masked in the step's forward pass is skipped entirely (no decay, no update,
// momentum buffer untouched). Indicators get no weight decay, are clamped to
// [0, 1], and frozen ones are never touched.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay, double indicator_lr_scale = 1.0,
               std::optional<double> indicator_momentum = std::nullopt)
      : momentum_(momentum),
        weight_decay_(weight_decay),
        indicator_lr_scale_(indicator_lr_scale),
        indicator_momentum_(indicator_momentum.value_or(momentum)) {}

  // `masks` are the site masks used by the forward pass of this step.
  void step(Network<T>& net, double lr, const std::vector<Mask>& masks);
  void zero_grad(Network<T>& net) const;
  void reset() { buffers_.clear(); v_buffers_.clear(); }

 private:
  double momentum_;
  double weight_decay_;
  double indicator_lr_scale_;
  double indicator_momentum_;
  std::vector<std::vector<T>> buffers_;
  std::vector<std::vector<T>> v_buffers_;
};

// One-shot convenience wrapper around SgdOptimizer with no momentum state.
template <typename T>
void sgd_step(Network<T>& net, double lr, double weight_decay, const std::vector<Mask>& masks);

struct PolicyTrajectory {
  std::vector<std::vector<Mask>> epoch_masks;  // [0] is the policy before search
  std::vector<double> epoch_reg_loss;          // mean L_reg of each search epoch
  std::vector<double> step_reg_loss;
  std::vector<std::vector<Mask>> step_masks;   // masks used by each search step

  std::vector<std::size_t> widths(std::size_t epoch) const;
  std::size_t hamming(std::size_t epoch) const;  // distance between epoch and epoch − 1
  // First epoch from which the Hamming distance stays 0, if the last search
  // epoch changed nothing.
  std::optional<std::size_t> convergence_epoch() const;
  std::string to_csv() const;  // epoch,site,active_width,L_reg
};

struct EpochStats {
  double loss = 0.0;
  double task_loss = 0.0;
  double reg_loss = 0.0;
  double train_accuracy = 0.0;
};

enum class Phase { Pretrain, Search, Finetune };
std::string_view to_string(Phase phase);

struct TrainHooks {
  std::function<void(Phase, std::size_t epoch, const Network<float>&, const EpochStats&)> on_epoch;
  std::function<void(std::size_t step, const std::vector<Mask>& masks, const Network<float>&)> on_step;
};

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

template <typename T>
Evaluation evaluate(Network<T>& net, const Dataset& data, std::size_t batch_size = 256);

struct SearchResult {
  Network<float> net;
  PolicyTrajectory trajectory;
  std::vector<Mask> masks;
  std::uint64_t macs = 0;
  std::uint64_t baseline_macs = 0;
  double target_macs = 0.0;
  double test_accuracy = 0.0;
};

Network<float> pretrain(const NetworkGraph& graph, const Dataset& train, const SearchConfig& config,
                        const TrainHooks& hooks = {});

// Search (joint W and v) → freeze → cosine fine-tune of W.
SearchResult run_pas(Network<float> start, const Dataset& train, const Dataset* test, const SearchConfig& config,
                     const TrainHooks& hooks = {});
SearchResult run_pas(const NetworkGraph& graph, const Dataset& train, const Dataset* test, const SearchConfig& config,
                     const TrainHooks& hooks = {});

// Resumes fine-tuning of a frozen network for `config.finetune_epochs`.
SearchResult finetune(Network<float> net, const Dataset& train, const Dataset* test, const SearchConfig& config,
                      const TrainHooks& hooks = {});

enum class BaselineStrategy { Uniform, OneShotMagnitude, IterativeMagnitude, EqualPenalty };
std::string_view to_string(BaselineStrategy s);
BaselineStrategy parse_strategy(std::string_view name);

SearchResult run_baseline(BaselineStrategy strategy, Network<float> start, const Dataset& train, const Dataset* test,
                          const SearchConfig& config, const TrainHooks& hooks = {});

// Masks keeping ⌈(1−r)·O⌉ channels (largest |γ|) at every site, with the
// smallest r that meets the budget.
std::vector<Mask> uniform_masks(const Network<float>& net, double target_macs, CountOptions options = {});
// Global smallest-|γ| pruning until the budget is met, keeping one channel per site.
std::vector<Mask> magnitude_masks(const Network<float>& net, double target_macs, CountOptions options = {});

// BN scale vector that serves as the channel indicator of a site.
template <typename T>
Tensor<T> site_gamma(const Network<T>& net, std::size_t site);

}  // namespace pas
