#pragma once

// Deliberately naive reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pas/tensor.hpp"

namespace pas::test {

// Seven nested loops, accumulated in double.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride,
                       std::size_t pad, bool depthwise = false) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kin = k.dim(1), kk = k.dim(2);
  const std::size_t oh = (h + 2 * pad - kk) / stride + 1, ow = (w + 2 * pad - kk) / stride + 1;
  Tensor<T> y({n, o, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias.defined() ? static_cast<double>(bias[oc]) : 0.0;
          for (std::size_t ic = 0; ic < kin; ++ic) {
            const std::size_t src = depthwise ? oc : ic;
            for (std::size_t u = 0; u < kk; ++u)
              for (std::size_t v = 0; v < kk; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(h) || s >= static_cast<long>(w)) continue;
                acc += static_cast<double>(x[((b * c + src) * h + r) * w + s]) *
                       static_cast<double>(k[((oc * kin + ic) * kk + u) * kk + v]);
              }
          }
          y[((b * o + oc) * oh + i) * ow + j] = static_cast<T>(acc);
        }
  return y;
}

template <typename T>
Tensor<T> naive_batch_norm_eval(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& be, const Tensor<T>& mean,
                                const Tensor<T>& var, double eps) {
  Tensor<T> y(x.shape());
  const std::size_t c = x.dim(1), inner = x.numel() / (x.dim(0) * c);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t ch = (i / inner) % c;
    y[i] = static_cast<T>(static_cast<double>(g[ch]) * (static_cast<double>(x[i]) - static_cast<double>(mean[ch])) /
                              std::sqrt(static_cast<double>(var[ch]) + eps) +
                          static_cast<double>(be[ch]));
  }
  return y;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (T v : a.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

// Central difference of `f` with respect to every element of `p`.
inline std::vector<double> central_difference(Tensor<double> p, const std::function<double()>& f, double h) {
  std::vector<double> g(p.numel());
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    const double up = f();
    p[i] = saved - h;
    const double down = f();
    p[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace pas::test
