#include <doctest.h>

#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pas/cost.hpp"
#include "pas/error.hpp"
#include "pas/model_io.hpp"
#include "pas/reparam.hpp"

using namespace pas;
using namespace pas::test;

namespace {

template <typename T>
BatchNormParams<T> random_bn(std::size_t c, std::mt19937_64& rng) {
  BatchNormParams<T> bn = BatchNormParams<T>::identity(c);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (std::size_t i = 0; i < c; ++i) {
    bn.gamma[i] = static_cast<T>(u(rng));
    bn.beta[i] = static_cast<T>(u(rng) - 1.0);
    bn.running_mean[i] = static_cast<T>(u(rng) - 1.0);
    bn.running_var[i] = static_cast<T>(u(rng));
  }
  return bn;
}

template <typename T>
Tensor<T> bn_eval(const Tensor<T>& x, BatchNormParams<T> bn) {
  return batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps, false, bn.momentum);
}

template <typename T>
Network<T> seeded(const NetworkGraph& g, std::uint64_t seed) {
  Network<T> net(g);
  net.init(seed);
  randomize_state(net, seed + 1);
  return net;
}

}  // namespace

TEST_CASE("fuse_bn") {
  std::mt19937_64 rng(1);
  const auto k = random_tensor<float>({2, 3, 3, 3}, rng);
  auto id = BatchNormParams<float>::identity(2);
  id.eps = 0.0f;
  const auto same = fuse_bn(k, Tensor<float>{}, id);
  CHECK(max_abs_diff(same.kernel, k) == 0.0);
  CHECK(max_abs(same.bias) == 0.0);

  BatchNormParams<float> hand = BatchNormParams<float>::identity(1);
  hand.gamma[0] = 2;
  hand.beta[0] = 1;
  hand.running_mean[0] = 0.5f;
  hand.running_var[0] = 4;
  hand.eps = 0;
  const auto k1 = random_tensor<float>({1, 1, 3, 3}, rng);
  const auto f = fuse_bn(k1, Tensor<float>({1}), hand);
  CHECK(max_abs_diff(f.kernel, k1) == 0.0);
  CHECK(f.bias[0] == doctest::Approx(0.5));

  const auto bn = random_bn<float>(4, rng);
  const auto kr = random_tensor<float>({4, 3, 3, 3}, rng);
  const auto br = random_tensor<float>({4}, rng);
  const auto fused = fuse_bn(kr, br, bn, {1, 1});
  for (int t = 0; t < 10; ++t) {
    const auto x = random_tensor<float>({2, 3, 6, 6}, rng);
    CHECK(max_abs_diff(fused.apply(x), bn_eval(conv2d(x, kr, br, {1, 1}), bn)) <= 1e-5);
  }

  hand.running_var[0] = 0;
  CHECK_THROWS_AS(fuse_bn(k1, Tensor<float>{}, hand), NumericError);
}

TEST_CASE("fuse_identity") {
  FusedConv<float> zero{Tensor<float>({1, 1, 3, 3}), Tensor<float>({1}), 1, 1};
  const auto id = fuse_identity(zero);
  for (std::size_t i = 0; i < 9; ++i) CHECK(id.kernel[i] == (i == 4 ? 1.0f : 0.0f));
  CHECK(id.identity_fused);
  CHECK_THROWS_AS(fuse_identity(id), ContractError);

  std::mt19937_64 rng(2);
  const auto k = random_tensor<float>({4, 4, 3, 3}, rng);
  const auto b = random_tensor<float>({4}, rng);
  const auto fused = fuse_identity(FusedConv<float>{k, b, 1, 1});
  for (int t = 0; t < 10; ++t) {
    const auto x = random_tensor<float>({2, 4, 5, 5}, rng);
    CHECK(max_abs_diff(fused.apply(x), add(conv2d(x, k, b, {1, 1}), x)) <= 1e-5);
  }

  CHECK_THROWS_AS(fuse_identity(FusedConv<float>{random_tensor<float>({4, 3, 3, 3}, rng), b, 1, 1}), StructuralError);
  CHECK_THROWS_AS(fuse_identity(FusedConv<float>{k, b, 2, 1}), StructuralError);
}

TEST_CASE("fuse_1x1_branch") {
  std::mt19937_64 rng(3);
  const auto k1 = random_tensor<float>({3, 2, 1, 1}, rng);
  const FusedConv<float> zero_main{Tensor<float>({3, 2, 3, 3}), Tensor<float>({3}), 1, 1};
  const FusedConv<float> branch{k1, Tensor<float>({3}), 1, 0};
  const auto f = fuse_1x1_branch(zero_main, branch);
  const auto x = random_tensor<float>({1, 2, 4, 4}, rng);
  CHECK(max_abs_diff(f.apply(x), conv2d(x, k1, Tensor<float>{}, {1, 0})) <= 1e-6);

  const FusedConv<float> main{random_tensor<float>({3, 2, 3, 3}, rng), random_tensor<float>({3}, rng), 1, 1};
  const FusedConv<float> br{k1, random_tensor<float>({3}, rng), 1, 0};
  const auto sum_fused = fuse_1x1_branch(main, br);
  for (int t = 0; t < 10; ++t) {
    const auto xi = random_tensor<float>({2, 2, 5, 5}, rng);
    CHECK(max_abs_diff(sum_fused.apply(xi), add(main.apply(xi), br.apply(xi))) <= 1e-5);
  }

  const FusedConv<float> bias_only{Tensor<float>({3, 2, 1, 1}), Tensor<float>({3}, std::vector<float>{1, 2, 3}), 1, 0};
  const auto fb = fuse_1x1_branch(main, bias_only);
  for (std::size_t o = 0; o < 3; ++o) CHECK(fb.bias[o] == main.bias[o] + static_cast<float>(o + 1));
  CHECK(max_abs_diff(fb.kernel, main.kernel) == 0.0);

  CHECK_THROWS_AS(fuse_1x1_branch(main, FusedConv<float>{random_tensor<float>({2, 2, 1, 1}, rng), {}, 1, 0}),
                  StructuralError);
}

TEST_CASE("squeeze keeps the selected rows and columns in order") {
  NetworkGraph g;
  g.input = {2, 5, 5};
  g.num_classes = 2;
  g.blocks = {BlockSpec::plain_conv(2, 4, 3, 1, true, true), BlockSpec::plain_conv(4, 3, 3, 1, true, false),
              BlockSpec::global_pool(3), BlockSpec::linear(3, 2)};
  auto net = seeded<float>(g, 7);
  const auto fused = fuse_network(net);
  REQUIRE(fused.num_sites() == 1);
  const auto sq = squeeze(fused, {Mask{0, 1, 0, 1}});
  const auto& k0 = fused.blocks()[0].layers[0].kernel;
  const auto& k1 = fused.blocks()[1].layers[0].kernel;
  const auto& s0 = sq.blocks()[0].layers[0].kernel;
  const auto& s1 = sq.blocks()[1].layers[0].kernel;
  REQUIRE(s0.shape() == Shape{2, 2, 3, 3});
  REQUIRE(s1.shape() == Shape{3, 2, 3, 3});
  const std::size_t kept[] = {1, 3};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 18; ++i) CHECK(s0[r * 18 + i] == k0[kept[r] * 18 + i]);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 9; ++i) CHECK(s1[(o * 2 + c) * 9 + i] == k1[(o * 4 + kept[c]) * 9 + i]);
  CHECK(sq.blocks()[0].layers[0].bias[1] == fused.blocks()[0].layers[0].bias[3]);
  CHECK(sq.num_sites() == 0);
}

TEST_CASE("squeeze errors") {
  auto net = seeded<float>(build_toy_net(4, 3, 3, {3, 8, 8}), 3);
  CHECK_THROWS_AS(squeeze(net, net.masks()), StructuralError);
  const auto fused = fuse_network(net);
  auto masks = fused.masks();
  masks[1].assign(masks[1].size(), 0);
  try {
    squeeze(fused, masks);
    FAIL("expected StructuralError");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("layer fully pruned") != std::string::npos);
  }
  masks = fused.masks();
  masks[0].push_back(1);
  CHECK_THROWS_AS(squeeze(fused, masks), DimensionError);
  masks.pop_back();
  CHECK_THROWS_AS(squeeze(fused, masks), DimensionError);
}

TEST_CASE("masked forward equals squeezed forward") {
  std::mt19937_64 rng(4);
  const NetworkGraph graphs[] = {build_toy_net(6, 6, 5, {3, 12, 12}), build_toy_lightweight_net(4, 4, 5, 2, {3, 12, 12})};
  for (std::size_t gi = 0; gi < 2; ++gi) {
    auto net = seeded<float>(graphs[gi], 10 + gi);
    for (int pattern = 0; pattern < 5; ++pattern) {
      auto f = fuse_network(net);
      const auto masks = random_masks(site_widths(f), rng, 0.5);
      apply_masks(f, masks, false);
      auto sq = squeeze(f, masks);
      for (int t = 0; t < 5; ++t) {
        const auto x = random_tensor<float>({2, 3, 12, 12}, rng);
        CHECK(max_abs_diff(f.forward(x, false), sq.forward(x, false)) <= 1e-5);
      }
    }
  }
}

TEST_CASE("all-ones squeeze changes nothing but the indicators") {
  auto net = seeded<float>(build_toy_net(4, 4, 3, {3, 8, 8}), 5);
  const auto fused = fuse_network(net);
  const auto sq = squeeze(fused, fused.masks());
  for (std::size_t b = 0; b < fused.blocks().size(); ++b)
    for (std::size_t s = 0; s < fused.blocks()[b].layers.size(); ++s) {
      const auto& a = fused.blocks()[b].layers[s];
      if (!a.kernel.defined()) continue;
      CHECK(max_abs_diff(a.kernel, sq.blocks()[b].layers[s].kernel) == 0.0);
    }
  CHECK(sq.num_sites() == 0);
}

TEST_CASE("deploy equivalence and cost") {
  std::mt19937_64 rng(6);
  for (bool branch : {false, true}) {
    NetworkGraph g = build_toy_net(6, 4, 4, {3, 10, 10});
    for (auto& b : g.blocks)
      if (b.kind == BlockKind::RepConv3x3) b.has_1x1_branch = branch;
    auto net = seeded<double>(g, 20);
    net.freeze_policy();
    auto plain = deploy(net);
    for (int t = 0; t < 5; ++t) {
      const auto x = random_tensor<double>({2, 3, 10, 10}, rng);
      CHECK(max_abs_diff(net.forward(x, false), plain.forward(x, false)) <= 1e-10);
    }
    CHECK(total_macs(plain.graph()) == total_macs(g));

    auto half = seeded<double>(g, 21);
    const auto masks = random_masks(site_widths(half), rng, 0.5);
    apply_masks(half, masks);
    const auto compact = deploy(half);
    CHECK(total_macs(compact.graph()) == total_macs(g, masks));
    CHECK(total_macs(compact.graph()) < total_macs(g));
  }
}

TEST_CASE("deploy contracts") {
  auto net = seeded<float>(build_toy_net(4, 3, 3, {3, 8, 8}), 8);
  try {
    deploy(net);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("policy not frozen") != std::string::npos);
  }
  net.freeze_policy();
  net.set_bn_finalized(false);
  CHECK_THROWS_AS(deploy(net), ContractError);
}

TEST_CASE("a 47/128 block deploys to 47 channels") {
  NetworkGraph g;
  g.input = {3, 4, 4};
  g.num_classes = 2;
  g.blocks = {BlockSpec::rep_conv3x3(3, 128, 1), BlockSpec::global_pool(128), BlockSpec::linear(128, 2)};
  auto net = seeded<float>(g, 9);
  Mask m(128, 0);
  for (std::size_t i = 0; i < 47; ++i) m[i * 2 + 1] = 1;
  apply_masks(net, {m});
  const auto plain = deploy(net);
  CHECK(plain.blocks()[0].layers[0].kernel.dim(0) == 47);
  const auto report = arch_report(g, std::vector<Mask>{m});
  CHECK(report.rows[0].kept() == "47/128");
}

TEST_CASE("squeeze never grows the network") {
  std::mt19937_64 rng(10);
  const auto g = build_toy_lightweight_net(4, 4, 3, 2, {3, 8, 8});
  Network<float> net(g);
  const auto widths = site_widths(net);
  for (int t = 0; t < 20; ++t) {
    const auto masks = random_masks(widths, rng, 0.7);
    bool all_on = true;
    for (const auto& m : masks) all_on = all_on && std::count(m.begin(), m.end(), 1) == static_cast<long>(m.size());
    const auto macs = total_macs(g, masks);
    if (all_on) CHECK(macs == total_macs(g));
    else CHECK(macs < total_macs(g));
  }
}
