#include <doctest.h>

#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pas/error.hpp"
#include "pas/layers.hpp"

using namespace pas;
using namespace pas::test;

namespace {

template <typename T>
DbcState<T> state_from(std::vector<T> v) {
  DbcState<T> s;
  const std::size_t n = v.size();
  s.v = Tensor<T>({n}, std::move(v));
  s.v.set_requires_grad(true);
  return s;
}

}  // namespace

TEST_CASE("binarize: strict threshold, boundary goes to zero") {
  const std::vector<double> v = {0.7, 0.5, 0.2};
  CHECK(dbc_binarize<double>(v, 0.5) == Mask{1, 0, 0});
  CHECK(dbc_binarize<double>(std::vector<double>(5, 1.0), 0.5) == Mask(5, 1));
  CHECK(dbc_binarize<double>(std::vector<double>(5, 0.0), 0.5) == Mask(5, 0));
  CHECK(dbc_binarize(DbcState<float>::all_on(3)) == Mask(3, 1));
}

TEST_CASE("dbc_forward masks channels and is idempotent") {
  std::mt19937_64 rng(1);
  const auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  const auto s = state_from<double>({0.9, 0.1});
  const auto y = dbc_forward(x, s);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(y[(n * 2 + 0) * 9 + i] == x[(n * 2 + 0) * 9 + i]);
      CHECK(y[(n * 2 + 1) * 9 + i] == 0.0);
    }
  CHECK(max_abs_diff(dbc_forward(y, s), y) == 0.0);
  const auto on = state_from<double>({1.0, 1.0});
  CHECK(max_abs_diff(dbc_forward(x, on), x) == 0.0);
  CHECK_THROWS_AS(dbc_forward(x, state_from<double>({1.0, 1.0, 1.0})), DimensionError);
}

TEST_CASE("straight-through gradient of v is the channel sum, whatever b is") {
  std::mt19937_64 rng(2);
  const auto x = random_tensor<double>({3, 4, 2, 2}, rng);
  auto s = state_from<double>({0.9, 0.2, 0.6, 0.0});
  sum(dbc_forward(x, s)).backward();
  for (std::size_t c = 0; c < 4; ++c) {
    double expect = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 4; ++i) expect += x[(n * 4 + c) * 4 + i];
    CHECK(s.v.grad()[c] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("backward rule: masked features get no gradient, masked indicators do") {
  std::mt19937_64 rng(3);
  const Shape shape{2, 3, 2, 2};
  const auto up = random_tensor<double>(shape, rng), feat = random_tensor<double>(shape, rng);
  const std::vector<double> mask = {1, 0, 1};
  const auto [gf, gm] = dbc_backward_rule<double>(up.data(), feat.data(), mask, shape);
  for (std::size_t i = 0; i < gf.size(); ++i) {
    const std::size_t c = (i / 4) % 3;
    CHECK(gf[i] == (c == 1 ? 0.0 : up[i]));
  }
  CHECK(gm[1] != 0.0);

  // Soft model a = v·x: for v above the threshold its derivative in v is the
  // same channel sum the straight-through rule passes on.
  auto s = state_from<double>({0.8, 0.3, 0.9});
  sum(mul(dbc_forward(feat, s), up)).backward();
  Tensor<double> soft_v({3}, std::vector<double>{0.8, 0.3, 0.9});
  NoGradGuard guard;
  const auto soft = central_difference(soft_v, [&] { return sum(mul(mul_channel(feat, soft_v), up)).item(); }, 1e-3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(s.v.grad()[c] == doctest::Approx(soft[c]).epsilon(1e-9));
    CHECK(gm[c] == doctest::Approx(soft[c]).epsilon(1e-9));
  }
}

TEST_CASE("relu commutes with a binary mask") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<float>({2, 5, 3, 3}, rng);
    std::vector<float> v(5);
    for (auto& e : v) e = std::uniform_real_distribution<float>(0, 1)(rng);
    CHECK(relu_mask_commutation_check(x, state_from<float>(v)));
  }
  CHECK(relu_mask_commutation_check(random_tensor<float>({1, 3, 2, 2}, rng), state_from<float>({0, 0, 0})));
  Tensor<float> neg({1, 2, 2, 2}, -1.0f);
  CHECK(relu_mask_commutation_check(neg, state_from<float>({1, 0})));
}

TEST_CASE("layer validation") {
  LayerParams<float> l;
  CHECK_THROWS_AS(l.validate(), ContractError);
  l.kernel = Tensor<float>({4, 2, 3, 3});
  l.bias = Tensor<float>({3});
  CHECK_THROWS_AS(l.validate(), DimensionError);
  l.bias = Tensor<float>({4});
  l.bn = BatchNormParams<float>::identity(4);
  CHECK_NOTHROW(l.validate());
  CHECK(l.out_channels() == 4);
}
