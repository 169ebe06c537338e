#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pas/error.hpp"
#include "pas/search.hpp"

using namespace pas;
using namespace pas::test;

namespace {

struct Tiny {
  Dataset train, test;
  NetworkGraph graph = build_toy_net(4, 3, 4, {3, 8, 8});
  SearchConfig cfg;

  explicit Tiny(std::uint64_t seed) {
    auto [a, b] = split_dataset(synthetic_teacher_dataset(seed, 384, 4, {3, 8, 8}), 2.0 / 3.0, seed);
    train = std::move(a);
    test = std::move(b);
    cfg.seed = seed;
    cfg.batch_size = 32;
    cfg.pretrain_epochs = 2;
    cfg.search_epochs = 3;
    cfg.finetune_epochs = 1;
    cfg.beta = 10;
    cfg.indicator_lr_scale = 2;
    cfg.indicator_momentum = 0.5;
  }
};

template <typename T>
bool same_weights(Network<T>& a, Network<T>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) return false;
  return true;
}

std::vector<std::vector<float>> snapshot(Network<float>& net) {
  std::vector<std::vector<float>> s;
  for (auto& p : net.parameters()) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

void backward_on_batch(Network<double>& net, std::mt19937_64& rng, const std::vector<Mask>& masks) {
  std::vector<Tensor<double>> mt;
  for (const auto& m : masks) mt.push_back(mask_tensor<double>(m));
  const auto x = random_tensor<double>({4, 3, 8, 8}, rng);
  softmax_cross_entropy(net.forward(x, mt, true), std::vector<int>{0, 1, 2, 0}).backward();
}

}  // namespace

TEST_CASE("cosine_lr") {
  CHECK(cosine_lr(0, 10, 0.1) == doctest::Approx(0.1));
  CHECK(cosine_lr(10, 10, 0.1) == doctest::Approx(0.0));
  CHECK(cosine_lr(5, 10, 0.1) == doctest::Approx(0.05));
  SearchConfig cfg;
  cfg.batch_size = 64;
  CHECK(cfg.effective_lr() == doctest::Approx(0.025));
}

TEST_CASE("plain SGD step") {
  std::mt19937_64 rng(1);
  Network<double> net(build_toy_net(4, 3, 3, {3, 8, 8}));
  net.init(1);
  const auto on = net.masks();
  backward_on_batch(net, rng, on);
  std::vector<std::vector<double>> before, grads;
  for (auto& p : net.parameters()) {
    before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  }
  sgd_step(net, 0.1, 0.0, on);
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t e = 0; e < before[i].size(); ++e) {
      const double g = grads[i].empty() ? 0.0 : grads[i][e];
      CHECK(params[i].tensor[e] == before[i][e] - 0.1 * g);
    }
}

TEST_CASE("masked channels are not touched by the optimizer") {
  std::mt19937_64 rng(2);
  Network<double> net(build_toy_net(4, 3, 3, {3, 8, 8}));
  net.init(2);
  auto masks = net.masks();
  masks[0] = Mask{1, 0, 1, 0};
  masks[1][2] = 0;
  backward_on_batch(net, rng, masks);
  std::vector<std::vector<double>> before;
  for (auto& p : net.parameters()) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  SgdOptimizer<double> opt(0.9, 1e-2);
  opt.step(net, 0.5, masks);
  std::size_t frozen = 0, moved = 0;
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const std::size_t per_row = p.tensor.numel() / p.rows, per_col = per_row / p.cols;
    for (std::size_t e = 0; e < p.tensor.numel(); ++e) {
      const bool row_off = p.row_site >= 0 && !masks[p.row_site][e / per_row];
      const bool col_off = p.col_site >= 0 && !masks[p.col_site][(e % per_row) / per_col];
      if (row_off || col_off) {
        ++frozen;
        CHECK(p.tensor[e] == before[i][e]);
      } else {
        moved += p.tensor[e] != before[i][e];
      }
    }
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);
}

TEST_CASE("indicators: frozen ones stay, live ones are clamped") {
  std::mt19937_64 rng(3);
  Network<double> net(build_toy_net(4, 3, 3, {3, 8, 8}));
  net.init(3);
  net.dbc()[0].frozen = true;
  auto masks = net.binarize_sites();
  const auto x = random_tensor<double>({4, 3, 8, 8}, rng);
  sum(net.forward(x, masks, true)).backward();
  for (auto& d : net.dbc()) {
    if (d.frozen) continue;
    auto g = d.v.mutable_grad();
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = c % 2 ? 1e6 : -1e6;
  }
  const std::vector<double> v0(net.dbc()[0].v.data().begin(), net.dbc()[0].v.data().end());
  SgdOptimizer<double> opt(0.0, 0.0);
  opt.step(net, 1.0, net.masks());
  CHECK(std::equal(v0.begin(), v0.end(), net.dbc()[0].v.data().begin()));
  for (std::size_t s = 1; s < net.num_sites(); ++s)
    for (std::size_t c = 0; c < net.dbc()[s].width(); ++c) CHECK(net.dbc()[s].v[c] == (c % 2 ? 0.0 : 1.0));
}

TEST_CASE("non-finite gradients abort the step") {
  Network<double> net(build_toy_net(4, 3, 3, {3, 8, 8}));
  net.init(4);
  std::mt19937_64 rng(4);
  backward_on_batch(net, rng, net.masks());
  auto p = net.parameters().front();
  p.tensor.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  const double w0 = p.tensor[1];
  CHECK_THROWS_AS(sgd_step(net, 0.1, 0.0, net.masks()), NumericError);
  CHECK(p.tensor[1] == w0);
}

TEST_CASE("search is deterministic") {
  Tiny t(5);
  const auto pre = pretrain(t.graph, t.train, t.cfg);
  auto a = run_pas(pre, t.train, &t.test, t.cfg);
  auto b = run_pas(pre, t.train, &t.test, t.cfg);
  CHECK(a.masks == b.masks);
  CHECK(a.trajectory.to_csv() == b.trajectory.to_csv());
  CHECK(same_weights(a.net, b.net));
  CHECK(a.test_accuracy == b.test_accuracy);
}

TEST_CASE("full budget keeps every channel") {
  Tiny t(6);
  t.cfg.target_macs_fraction = 1.0;
  const auto r = run_pas(t.graph, t.train, &t.test, t.cfg);
  CHECK(r.trajectory.step_reg_loss.front() == 0.0);
  for (const auto& m : r.masks) CHECK(std::count(m.begin(), m.end(), 1) == static_cast<long>(m.size()));
  CHECK(r.macs == r.baseline_macs);
}

TEST_CASE("beta = 0 with the regularizer as the only path to v keeps all masks on") {
  Tiny t(7);
  t.cfg.beta = 0.0;
  t.cfg.task_grad_to_indicators = false;
  const auto r = run_pas(t.graph, t.train, &t.test, t.cfg);
  for (const auto& epoch : r.trajectory.epoch_masks)
    for (const auto& m : epoch) CHECK(std::count(m.begin(), m.end(), 1) == static_cast<long>(m.size()));
  for (const auto& d : r.net.dbc())
    for (float v : d.v.data()) CHECK(v == 1.0f);
}

TEST_CASE("freeze: no indicator moves while fine-tuning, pruned weights stay put") {
  Tiny t(8);
  t.cfg.finetune_epochs = 2;
  t.cfg.target_macs_fraction = 0.4;
  std::vector<std::vector<float>> frozen_v;
  std::vector<std::vector<float>> prev;
  std::size_t finetune_epochs = 0;
  bool preserved = true;
  TrainHooks hooks;
  hooks.on_epoch = [&](Phase phase, std::size_t, const Network<float>& net, const EpochStats&) {
    if (phase != Phase::Finetune) return;
    ++finetune_epochs;
    std::vector<std::vector<float>> v;
    for (const auto& d : net.dbc()) v.emplace_back(d.v.data().begin(), d.v.data().end());
    if (frozen_v.empty()) frozen_v = v;
    CHECK(v == frozen_v);
    CHECK(net.policy_frozen());
  };
  hooks.on_step = [&](std::size_t, const std::vector<Mask>& masks, const Network<float>& cnet) {
    auto& net = const_cast<Network<float>&>(cnet);
    auto now = snapshot(net);
    if (!prev.empty()) {
      auto params = net.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        const std::size_t per_row = now[i].size() / p.rows, per_col = per_row / p.cols;
        for (std::size_t e = 0; e < now[i].size(); ++e) {
          const bool off = (p.row_site >= 0 && !masks[p.row_site][e / per_row]) ||
                           (p.col_site >= 0 && !masks[p.col_site][(e % per_row) / per_col]);
          if (off && now[i][e] != prev[i][e]) preserved = false;
        }
      }
    }
    prev = std::move(now);
  };
  const auto r = run_pas(t.graph, t.train, &t.test, t.cfg, hooks);
  CHECK(finetune_epochs == 2);
  CHECK(preserved);
  CHECK(r.masks == r.net.masks());
  CHECK(r.macs < r.baseline_macs);
}

TEST_CASE("trajectory bookkeeping") {
  PolicyTrajectory tr;
  tr.epoch_masks = {{Mask{1, 1}}, {Mask{1, 0}}, {Mask{0, 1}}, {Mask{0, 1}}};
  tr.epoch_reg_loss = {0.3, 0.2, 0.1};
  CHECK(tr.hamming(1) == 1);
  CHECK(tr.hamming(2) == 2);
  CHECK(tr.hamming(3) == 0);
  CHECK(tr.widths(1) == std::vector<std::size_t>{1});
  REQUIRE(tr.convergence_epoch().has_value());
  CHECK(*tr.convergence_epoch() == 3);
  tr.epoch_masks.push_back({Mask{1, 1}});
  tr.epoch_reg_loss.push_back(0.0);
  CHECK_FALSE(tr.convergence_epoch().has_value());
  CHECK(tr.to_csv().rfind("epoch,site,active_width,L_reg", 0) == 0);
}

TEST_CASE("baselines") {
  Tiny t(9);
  const auto pre = pretrain(t.graph, t.train, t.cfg);

  SUBCASE("uniform keeps the same fraction everywhere and meets the budget") {
    const double target = 0.5 * static_cast<double>(total_macs(t.graph));
    const auto masks = uniform_masks(pre, target);
    CHECK(static_cast<double>(total_macs(t.graph, masks)) <= target);
    const auto sites = prunable_sites(t.graph);
    std::vector<double> kept;
    for (std::size_t s = 0; s < masks.size(); ++s)
      kept.push_back(static_cast<double>(std::count(masks[s].begin(), masks[s].end(), 1)));
    // Widths are ceil((1 - r) * O) for one r: a single r explains every site.
    bool consistent = false;
    for (int step = 0; step <= 1000 && !consistent; ++step) {
      const double r = step / 1000.0;
      consistent = true;
      for (std::size_t s = 0; s < masks.size(); ++s)
        consistent = consistent && kept[s] == std::max(1.0, std::ceil((1 - r) * static_cast<double>(sites[s].width) - 1e-9));
    }
    CHECK(consistent);
  }

  SUBCASE("magnitude pruning meets the budget and keeps every site alive") {
    const double target = 0.5 * static_cast<double>(total_macs(t.graph));
    const auto masks = magnitude_masks(pre, target);
    CHECK(static_cast<double>(total_macs(t.graph, masks)) <= target);
    for (const auto& m : masks) CHECK(std::count(m.begin(), m.end(), 1) >= 1);
  }

  SUBCASE("equal_penalty with lambda 0 is one_shot_magnitude") {
    auto cfg = t.cfg;
    cfg.equal_penalty_lambda = 0.0;
    auto a = run_baseline(BaselineStrategy::EqualPenalty, pre, t.train, &t.test, cfg);
    auto b = run_baseline(BaselineStrategy::OneShotMagnitude, pre, t.train, &t.test, cfg);
    CHECK(a.masks == b.masks);
    CHECK(same_weights(a.net, b.net));
  }

  SUBCASE("strategy names") {
    for (auto s : {BaselineStrategy::Uniform, BaselineStrategy::OneShotMagnitude, BaselineStrategy::IterativeMagnitude,
                   BaselineStrategy::EqualPenalty})
      CHECK(parse_strategy(to_string(s)) == s);
    CHECK_THROWS_AS(parse_strategy("random"), ConfigError);
  }
}

TEST_CASE("fine-tuning needs a frozen policy") {
  Tiny t(10);
  Network<float> net(t.graph);
  net.init(10);
  CHECK_THROWS_AS(finetune(net, t.train, &t.test, t.cfg), ContractError);
}

TEST_CASE("config validation names the key") {
  SearchConfig cfg;
  cfg.beta = -1;
  try {
    cfg.validate();
    FAIL("expected ConfigKeyError");
  } catch (const ConfigKeyError& e) {
    CHECK(e.key() == "beta");
  }
}

TEST_CASE("evaluate on a fixed dataset") {
  Tiny t(11);
  Network<float> net(t.graph);
  net.init(11);
  net.set_bn_finalized(true);
  const auto e = evaluate(net, t.test);
  CHECK(e.accuracy >= 0.0);
  CHECK(e.accuracy <= 1.0);
  CHECK(std::isfinite(e.loss));
  CHECK(evaluate(net, t.test).loss == e.loss);
}
