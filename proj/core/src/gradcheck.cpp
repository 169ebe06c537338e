#include "pas/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "pas/cost.hpp"
#include "pas/network.hpp"
#include "pas/ops.hpp"
#include "pas/random.hpp"

namespace pas {

namespace {

using T = double;
using Rng = std::mt19937_64;

Tensor<T> randn(Shape shape, Rng& rng, double sd = 1.0, double keep_away = 0.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) {
    do x = nd(rng);
    while (std::abs(x) < keep_away);
  }
  return t;
}

Tensor<T> param(Shape shape, Rng& rng, double sd = 1.0, double keep_away = 0.0) {
  Tensor<T> t = randn(std::move(shape), rng, sd, keep_away);
  t.set_requires_grad(true);
  return t;
}

// Compares tape gradients of `loss` against a fourth-order central difference
// at up to `max_coords` sampled coordinates per tensor. A coordinate whose
// extrapolated estimates at steps h/2 and h disagree straddles a ReLU kink and
// is skipped, not compared.
GradcheckResult check(const std::string& name, std::vector<Tensor<T>> params, const std::function<Tensor<T>()>& loss,
                      Rng& rng, double tol, std::size_t max_coords = 24, double h = 1e-3) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  GradcheckResult r{name, 0, 0, 0.0, tol, true};
  for (auto& p : params) {
    const std::vector<T> analytic(p.grad().begin(), p.grad().end());
    // Gradients far below the tensor's largest one are compared against that
    // scale instead: their difference quotient is dominated by roundoff.
    double floor = 1e-4;
    for (T a : analytic) floor = std::max(floor, 1e-3 * std::abs(a));
    std::vector<std::size_t> coords(p.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(max_coords, coords.size()));
    NoGradGuard guard;
    for (std::size_t i : coords) {
      const T saved = p[i];
      auto at = [&](T d) {
        p[i] = saved + d;
        return loss().item();
      };
      const T d_half = (at(h / 2) - at(-h / 2)) / h;
      const T d1 = (at(h) - at(-h)) / (2 * h);
      const T d2 = (at(2 * h) - at(-2 * h)) / (4 * h);
      p[i] = saved;
      const T fine = (4 * d_half - d1) / 3;
      const T numeric = (4 * d1 - d2) / 3;
      if (std::abs(fine - numeric) > tol / 2 * std::max({std::abs(fine), std::abs(numeric), floor})) {
        ++r.skipped;
        continue;
      }
      const T a = analytic.empty() ? T{0} : analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      r.max_error = std::max(r.max_error, err);
      ++r.checked;
    }
  }
  r.pass = r.max_error <= tol && r.checked > r.skipped;
  return r;
}

Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& w) { return sum(mul(y, w)); }

}  // namespace

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, double tol) {
  Rng rng(mix_seed(seed, 0x67636b));
  std::vector<GradcheckResult> out;

  {
    auto x = param({2, 3, 6, 6}, rng);
    auto k = param({4, 3, 3, 3}, rng, 0.3);
    auto b = param({4}, rng);
    auto w = randn({2, 4, 3, 3}, rng);
    out.push_back(check("conv2d", {x, k, b}, [&] { return weighted_sum(conv2d(x, k, b, {2, 1}), w); }, rng, tol));
  }
  {
    auto x = param({2, 3, 5, 5}, rng);
    auto k = param({3, 1, 3, 3}, rng, 0.3);
    auto b = param({3}, rng);
    auto w = randn({2, 3, 5, 5}, rng);
    out.push_back(
        check("depthwise_conv2d", {x, k, b}, [&] { return weighted_sum(depthwise_conv2d(x, k, b, {1, 1}), w); }, rng, tol));
  }
  {
    auto x = param({4, 3, 3, 3}, rng);
    auto g = param({3}, rng);
    auto be = param({3}, rng);
    auto w = randn({4, 3, 3, 3}, rng);
    out.push_back(check("batch_norm(train)", {x, g, be},
                        [&] {
                          Tensor<T> rm({3}), rv({3}, 1.0);
                          return weighted_sum(batch_norm(x, g, be, rm, rv, 1e-5, true, 0.1), w);
                        },
                        rng, tol));
    Tensor<T> rm = randn({3}, rng), rv({3}, 1.5);
    out.push_back(check("batch_norm(eval)", {x, g, be},
                        [&] { return weighted_sum(batch_norm(x, g, be, rm, rv, 1e-5, false, 0.1), w); }, rng, tol));
  }
  {
    auto x = param({3, 7}, rng, 1.0, 0.05);
    auto w = randn({3, 7}, rng);
    out.push_back(check("relu", {x}, [&] { return weighted_sum(relu(x), w); }, rng, tol));
  }
  {
    auto x = param({3, 5}, rng);
    auto k = param({4, 5}, rng);
    auto b = param({4}, rng);
    auto w = randn({3, 4}, rng);
    out.push_back(check("linear", {x, k, b}, [&] { return weighted_sum(linear(x, k, b), w); }, rng, tol));
  }
  {
    auto x = param({2, 3, 4, 4}, rng);
    auto w = randn({2, 3}, rng);
    out.push_back(check("global_avg_pool", {x}, [&] { return weighted_sum(global_avg_pool(x), w); }, rng, tol));
  }
  {
    auto x = param({2, 3, 4, 4}, rng);
    auto s = param({3}, rng);
    auto w = randn({2, 3, 4, 4}, rng);
    out.push_back(check("mul_channel", {x, s}, [&] { return weighted_sum(mul_channel(x, s), w); }, rng, tol));
  }
  {
    auto logits = param({4, 5}, rng);
    const std::vector<int> labels = {0, 3, 4, 1};
    out.push_back(check("softmax_cross_entropy", {logits}, [&] { return softmax_cross_entropy(logits, labels); }, rng, tol));
  }

  // Whole networks in training mode with fixed random masks.
  auto net_check = [&](const std::string& name, const NetworkGraph& graph) {
    Network<T> net(graph);
    net.init(mix_seed(seed, name.size()));
    auto x = randn({3, graph.input.channels, graph.input.height, graph.input.width}, rng);
    const std::vector<int> labels = {1, 0, 2};
    std::vector<Tensor<T>> masks;
    std::bernoulli_distribution keep(0.7);
    for (std::size_t s = 0; s < net.num_sites(); ++s) {
      Tensor<T> m({net.dbc()[s].width()});
      for (auto& b : m.data()) b = keep(rng) ? 1.0 : 0.0;
      m[0] = 1.0;
      masks.push_back(m);
    }
    // Move BN affine terms and biases off their init: with beta = 0 a pixel
    // whose inputs were all clipped lands exactly on the next ReLU's kink.
    std::vector<Tensor<T>> params;
    std::normal_distribution<double> jitter(0.0, 0.2);
    for (auto& p : net.parameters()) {
      if (p.tensor.rank() == 1) {
        for (auto& v : p.tensor.data()) v += jitter(rng);
      }
      params.push_back(p.tensor);
    }
    auto loss = [&] { return softmax_cross_entropy(net.forward(x, masks, true), labels); };
    // Many ReLUs: keep the step well inside the nearest kink.
    out.push_back(check(name, params, loss, rng, tol, 6, 1e-5));
  };
  net_check("network(rep_conv3x3)", [] {
    NetworkGraph g;
    g.input = {3, 6, 6};
    g.num_classes = 3;
    g.blocks = {BlockSpec::rep_conv3x3(3, 4, 1, true), BlockSpec::rep_conv3x3(4, 4, 1, true),
                BlockSpec::rep_conv3x3(4, 6, 2), BlockSpec::global_pool(6), BlockSpec::linear(6, 3)};
    return g;
  }());
  net_check("network(rep_lightweight)", build_toy_lightweight_net(4, 3, 3, 2, {3, 12, 12}));

  // MACs regularizer as a polynomial in relaxed masks.
  {
    const NetworkGraph g = build_toy_net(4, 3, 3, {3, 8, 8});
    const ChannelPlan plan = plan_channels(g);
    std::vector<Tensor<T>> masks;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (const auto& s : plan.sites) {
      Tensor<T> m({s.width});
      for (auto& b : m.data()) b = u(rng);
      m.set_requires_grad(true);
      masks.push_back(m);
    }
    const MacsBudget budget = MacsBudget::from_fraction(total_macs(g), 0.5, 1.0);
    out.push_back(check("reg_loss", masks, [&] { return reg_loss(plan, masks, budget); }, rng, tol));
  }

  // Straight-through contract: grad_v equals grad_b exactly.
  {
    Network<T> net(build_toy_net(4, 3, 3, {3, 8, 8}));
    net.init(mix_seed(seed, 99));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& d : net.dbc()) {
      for (auto& v : d.v.data()) v = u(rng);
      d.v.data()[0] = 0.9;
    }
    auto x = randn({2, 3, 8, 8}, rng);
    const std::vector<int> labels = {0, 2};
    auto masks = net.binarize_sites();
    for (auto& m : masks) m.retain_grad();
    const MacsBudget budget = MacsBudget::from_fraction(total_macs(net.graph()), 0.5, 1.0);
    Tensor<T> loss = total_loss(softmax_cross_entropy(net.forward(x, masks, true), labels),
                                reg_loss(net.plan(), masks, budget), 0.5);
    loss.backward();
    GradcheckResult r{"straight_through(v vs b)", 0, 0, 0.0, 0.0, true};
    for (std::size_t s = 0; s < net.num_sites(); ++s) {
      const auto gv = net.dbc()[s].v.grad();
      const auto gb = masks[s].grad();
      for (std::size_t c = 0; c < gv.size(); ++c) {
        r.max_error = std::max(r.max_error, std::abs(gv[c] - gb[c]));
        ++r.checked;
      }
    }
    r.pass = r.max_error == 0.0;
    out.push_back(r);
  }
  return out;
}

}  // namespace pas
