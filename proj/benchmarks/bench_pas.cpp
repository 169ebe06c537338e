#include <random>

#include <benchmark/benchmark.h>

#include "pas/cost.hpp"
#include "pas/model_io.hpp"
#include "pas/ops.hpp"
#include "pas/reparam.hpp"

using namespace pas;

namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

const InputShape kInput{3, 16, 16};

void conv_forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({32, c, 16, 16}, 1);
  const auto k = random_tensor({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, Tensor<float>{}, {1, 1}));
  state.SetItemsProcessed(state.iterations() * 32 * c * c * 9 * 256);
}
BENCHMARK(conv_forward)->Arg(16)->Arg(32)->Arg(64);

void conv_backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  auto x = random_tensor({32, c, 16, 16}, 1);
  auto k = random_tensor({c, c, 3, 3}, 2);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  for (auto _ : state) {
    x.zero_grad();
    k.zero_grad();
    sum(conv2d(x, k, Tensor<float>{}, {1, 1})).backward();
  }
}
BENCHMARK(conv_backward)->Arg(16)->Arg(32);

void network_forward(benchmark::State& state) {
  Network<float> net(build_toy_net(16, 6, 10, kInput));
  net.init(3);
  const auto x = random_tensor({64, 3, 16, 16}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, false));
}
BENCHMARK(network_forward);

void network_search_step(benchmark::State& state) {
  Network<float> net(build_toy_net(16, 6, 10, kInput));
  net.init(3);
  const auto x = random_tensor({64, 3, 16, 16}, 4);
  std::vector<int> labels(64);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  const auto budget = MacsBudget::from_fraction(total_macs(net.graph()), 0.5, 1.0);
  for (auto _ : state) {
    for (auto& p : net.parameters()) p.tensor.zero_grad();
    const auto masks = net.binarize_sites();
    total_loss(softmax_cross_entropy(net.forward(x, masks, true), labels), reg_loss(net.plan(), masks, budget), 1.0)
        .backward();
  }
}
BENCHMARK(network_search_step);

void deployed_forward(benchmark::State& state) {
  Network<float> net(build_toy_net(16, 6, 10, kInput));
  net.init(3);
  net.set_bn_finalized(true);
  net.freeze_policy();
  auto plain = deploy(net);
  const auto x = random_tensor({64, 3, 16, 16}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(plain.forward(x, false));
}
BENCHMARK(deployed_forward);

void count_reference_macs(benchmark::State& state) {
  const auto g = build_reference_graph("resnet50");
  for (auto _ : state) benchmark::DoNotOptimize(count_macs(g));
}
BENCHMARK(count_reference_macs);

void checkpoint_serialize(benchmark::State& state) {
  Network<float> net(build_toy_net(16, 6, 10, kInput));
  net.init(5);
  for (auto _ : state) benchmark::DoNotOptimize(serialize_checkpoint(net));
}
BENCHMARK(checkpoint_serialize);

void checkpoint_parse(benchmark::State& state) {
  Network<float> net(build_toy_net(16, 6, 10, kInput));
  net.init(5);
  const auto bytes = serialize_checkpoint(net);
  for (auto _ : state) benchmark::DoNotOptimize(parse_checkpoint(bytes));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(checkpoint_parse);

}  // namespace

BENCHMARK_MAIN();
