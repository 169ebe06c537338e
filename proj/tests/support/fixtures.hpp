#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "pas/network.hpp"

namespace pas::test {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(nd(rng));
  return t;
}

// Moves BN statistics, BN affine terms and biases away from their identity
// init so fusion has something to fold.
template <typename T>
void randomize_state(Network<T>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(0.5, 1.5), var(0.5, 2.0);
  std::normal_distribution<double> shift(0.0, 0.2);
  for (auto& block : net.blocks()) {
    for (auto& layer : block.layers) {
      if (layer.bias.defined())
        for (auto& v : layer.bias.data()) v = static_cast<T>(shift(rng));
      if (!layer.bn) continue;
      for (auto& v : layer.bn->gamma.data()) v = static_cast<T>(scale(rng));
      for (auto& v : layer.bn->beta.data()) v = static_cast<T>(shift(rng));
      for (auto& v : layer.bn->running_mean.data()) v = static_cast<T>(shift(rng));
      for (auto& v : layer.bn->running_var.data()) v = static_cast<T>(var(rng));
    }
  }
  net.set_bn_finalized(true);
}

// Independent Bernoulli(keep) masks with at least one kept channel per site.
inline std::vector<Mask> random_masks(const std::vector<std::size_t>& widths, std::mt19937_64& rng, double keep) {
  std::bernoulli_distribution on(keep);
  std::vector<Mask> masks;
  for (std::size_t w : widths) {
    Mask m(w);
    for (auto& b : m) b = on(rng) ? 1 : 0;
    m[std::uniform_int_distribution<std::size_t>(0, w - 1)(rng)] = 1;
    masks.push_back(m);
  }
  return masks;
}

template <typename T>
std::vector<std::size_t> site_widths(const Network<T>& net) {
  std::vector<std::size_t> w;
  for (const auto& d : net.dbc()) w.push_back(d.width());
  return w;
}

template <typename T>
void apply_masks(Network<T>& net, const std::vector<Mask>& masks, bool freeze = true) {
  for (std::size_t s = 0; s < masks.size(); ++s) net.set_mask(s, masks[s]);
  if (freeze) net.freeze_policy();
}

}  // namespace pas::test
