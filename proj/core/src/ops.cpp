#include "pas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pas/error.hpp"
#include "pas/parallel.hpp"

namespace pas {

namespace {

template <typename T>
using Accs = typename detail::Node<T>::Accumulators;

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void require_rank(const char* op, const char* what, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(shape));
  }
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Output positions o in [lo, hi) whose input coordinate o·stride − pad + k
// falls inside [0, size).
inline void valid_range(std::size_t out, std::size_t size, std::size_t stride, std::size_t pad, std::size_t k,
                        std::size_t& lo, std::size_t& hi) {
  const long long s = static_cast<long long>(stride);
  const long long offset = static_cast<long long>(k) - static_cast<long long>(pad);
  long long l = offset >= 0 ? 0 : (-offset + s - 1) / s;
  long long h = (static_cast<long long>(size) - offset + s - 1) / s;
  if (h < 0) h = 0;
  lo = static_cast<std::size_t>(std::min<long long>(l, static_cast<long long>(out)));
  hi = static_cast<std::size_t>(std::clamp<long long>(h, static_cast<long long>(lo), static_cast<long long>(out)));
}

struct ConvDims {
  std::size_t n, in_c, h, w, out_c, k, oh, ow, stride, pad;
  std::size_t in_plane() const { return h * w; }
  std::size_t out_plane() const { return oh * ow; }
  std::size_t col_rows() const { return in_c * k * k; }
};

// col[(i·K + kh)·K + kw][oh·OW + ow]
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::size_t plane = d.out_plane();
  for (std::size_t i = 0; i < d.in_c; ++i) {
    const T* xi = x + i * d.in_plane();
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      std::size_t oh_lo, oh_hi;
      valid_range(d.oh, d.h, d.stride, d.pad, kh, oh_lo, oh_hi);
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        std::size_t ow_lo, ow_hi;
        valid_range(d.ow, d.w, d.stride, d.pad, kw, ow_lo, ow_hi);
        T* row = col + ((i * d.k + kh) * d.k + kw) * plane;
        std::fill(row, row + plane, T{0});
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const T* src = xi + (oh * d.stride + kh - d.pad) * d.w;
          T* dst = row + oh * d.ow;
          if (d.stride == 1) {
            const std::size_t base = kw - d.pad;  // wraps harmlessly; ow + base is in range
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] = src[ow + base];
          } else {
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] = src[ow * d.stride + kw - d.pad];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvDims& d, T* x) {
  const std::size_t plane = d.out_plane();
  for (std::size_t i = 0; i < d.in_c; ++i) {
    T* xi = x + i * d.in_plane();
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      std::size_t oh_lo, oh_hi;
      valid_range(d.oh, d.h, d.stride, d.pad, kh, oh_lo, oh_hi);
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        std::size_t ow_lo, ow_hi;
        valid_range(d.ow, d.w, d.stride, d.pad, kw, ow_lo, ow_hi);
        const T* row = col + ((i * d.k + kh) * d.k + kw) * plane;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          T* dst = xi + (oh * d.stride + kh - d.pad) * d.w;
          const T* src = row + oh * d.ow;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow * d.stride + kw - d.pad] += src[ow];
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvDims& d) { return d.k == 1 && d.stride == 1 && d.pad == 0; }

// Per-sample kernel-gradient contributions are computed as whole dot products
// and folded into the accumulator in sample order, so the result is the same
// for any worker count.
template <typename T, typename PerSample>
void reduce_over_batch(std::size_t batch, std::size_t width, T* acc, PerSample&& per_sample) {
  const int threads = thread_count();
  if (threads <= 1 || batch <= 1) {
    std::vector<T> partial(width);
    for (std::size_t n = 0; n < batch; ++n) {
      std::fill(partial.begin(), partial.end(), T{0});
      per_sample(n, partial.data());
      for (std::size_t i = 0; i < width; ++i) acc[i] += partial[i];
    }
    return;
  }
  std::vector<T> partials(batch * width, T{0});
#pragma omp parallel for num_threads(threads) schedule(static)
  for (long long n = 0; n < static_cast<long long>(batch); ++n) {
    per_sample(static_cast<std::size_t>(n), partials.data() + static_cast<std::size_t>(n) * width);
  }
  for (std::size_t n = 0; n < batch; ++n) {
    const T* p = partials.data() + n * width;
    for (std::size_t i = 0; i < width; ++i) acc[i] += p[i];
  }
}

template <typename F>
void for_each_sample(std::size_t batch, F&& f) {
  const int threads = thread_count();
  if (threads <= 1 || batch <= 1) {
    for (std::size_t n = 0; n < batch; ++n) f(n);
    return;
  }
#pragma omp parallel for num_threads(threads) schedule(static)
  for (long long n = 0; n < static_cast<long long>(batch); ++n) f(static_cast<std::size_t>(n));
}

template <typename T>
ConvDims conv_dims(const char* op, const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                   ConvGeometry geom, bool depthwise) {
  require_rank(op, "input", input.shape(), 4);
  require_rank(op, "kernel", kernel.shape(), 4);
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (ks[2] != ks[3]) throw DimensionError(std::string(op) + ": kernel must be square, got " + shape_string(ks));
  if (depthwise) {
    if (ks[0] != is[1] || ks[1] != 1) {
      throw DimensionError(std::string(op) + ": kernel " + shape_string(ks) + " does not match input " +
                           shape_string(is) + " (expected C×1×K×K)");
    }
  } else if (ks[1] != is[1]) {
    throw DimensionError(std::string(op) + ": kernel " + shape_string(ks) + " does not match input " +
                         shape_string(is));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ks[0])) {
    throw DimensionError(std::string(op) + ": bias " + shape_string(bias.shape()) + " does not match kernel " +
                         shape_string(ks));
  }
  ConvDims d{is[0], is[1], is[2], is[3], ks[0], ks[2], 0, 0, geom.stride, geom.padding};
  d.oh = conv_output_size(d.h, d.k, d.stride, d.pad);
  d.ow = conv_output_size(d.w, d.k, d.stride, d.pad);
  return d;
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("convolution stride must be positive");
  if (input + 2 * padding < kernel) {
    throw ConfigError("non-positive convolution output size: input " + std::to_string(input) + ", kernel " +
                      std::to_string(kernel) + ", padding " + std::to_string(padding));
  }
  return (input + 2 * padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, ConvGeometry geom) {
  const ConvDims d = conv_dims("conv2d", input, kernel, bias, geom, false);
  const std::size_t plane = d.out_plane();
  const std::size_t rows = d.col_rows();
  std::vector<T> out(d.n * d.out_c * plane);
  const T* x = input.data().data();
  const T* w = kernel.data().data();
  const T* b = bias.defined() ? bias.data().data() : nullptr;

  for_each_sample(d.n, [&](std::size_t n) {
    std::vector<T> col_buf;
    const T* col = x + n * d.in_c * d.in_plane();
    if (!is_pointwise(d)) {
      col_buf.resize(rows * plane);
      im2col(col, d, col_buf.data());
      col = col_buf.data();
    }
    T* on = out.data() + n * d.out_c * plane;
    for (std::size_t o = 0; o < d.out_c; ++o) {
      T* row = on + o * plane;
      std::fill(row, row + plane, b ? b[o] : T{0});
      const T* wo = w + o * rows;
      for (std::size_t p = 0; p < rows; ++p) axpy(wo[p], col + p * plane, row, plane);
    }
  });

  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      {d.n, d.out_c, d.oh, d.ow}, std::move(out), "conv2d", std::move(inputs),
      [input, kernel, d](std::span<const T> g, Accs<T> acc) {
        const std::size_t plane = d.out_plane();
        const std::size_t rows = d.col_rows();
        const T* x = input.data().data();
        const T* w = kernel.data().data();
        if (acc.size() > 2 && acc[2]) {
          T* db = acc[2]->data();
          for (std::size_t n = 0; n < d.n; ++n) {
            for (std::size_t o = 0; o < d.out_c; ++o) {
              const T* go = g.data() + (n * d.out_c + o) * plane;
              T s = 0;
              for (std::size_t j = 0; j < plane; ++j) s += go[j];
              db[o] += s;
            }
          }
        }
        auto make_col = [&](std::size_t n, std::vector<T>& buf) -> const T* {
          const T* xn = x + n * d.in_c * d.in_plane();
          if (is_pointwise(d)) return xn;
          buf.resize(rows * plane);
          im2col(xn, d, buf.data());
          return buf.data();
        };
        if (acc[1]) {
          reduce_over_batch<T>(d.n, d.out_c * rows, acc[1]->data(), [&](std::size_t n, T* dw) {
            std::vector<T> buf;
            const T* col = make_col(n, buf);
            const T* gn = g.data() + n * d.out_c * plane;
            for (std::size_t o = 0; o < d.out_c; ++o) {
              const T* go = gn + o * plane;
              T* dwo = dw + o * rows;
              for (std::size_t p = 0; p < rows; ++p) dwo[p] = dot(go, col + p * plane, plane);
            }
          });
        }
        if (acc[0]) {
          T* dx = acc[0]->data();
          for_each_sample(d.n, [&](std::size_t n) {
            const T* gn = g.data() + n * d.out_c * plane;
            T* dxn = dx + n * d.in_c * d.in_plane();
            if (is_pointwise(d)) {
              for (std::size_t o = 0; o < d.out_c; ++o) {
                const T* wo = w + o * rows;
                for (std::size_t p = 0; p < rows; ++p) axpy(wo[p], gn + o * plane, dxn + p * plane, plane);
              }
              return;
            }
            std::vector<T> dcol(rows * plane, T{0});
            for (std::size_t o = 0; o < d.out_c; ++o) {
              const T* wo = w + o * rows;
              for (std::size_t p = 0; p < rows; ++p) axpy(wo[p], gn + o * plane, dcol.data() + p * plane, plane);
            }
            col2im(dcol.data(), d, dxn);
          });
        }
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           ConvGeometry geom) {
  const ConvDims d = conv_dims("depthwise_conv2d", input, kernel, bias, geom, true);
  const std::size_t plane = d.out_plane();
  std::vector<T> out(d.n * d.in_c * plane);
  const T* x = input.data().data();
  const T* w = kernel.data().data();
  const T* b = bias.defined() ? bias.data().data() : nullptr;

  // One channel plane: out += Σ_kh,kw w·shifted(x)
  auto forward_plane = [d](const T* xc, const T* wc, T* oc) {
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      std::size_t oh_lo, oh_hi;
      valid_range(d.oh, d.h, d.stride, d.pad, kh, oh_lo, oh_hi);
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        std::size_t ow_lo, ow_hi;
        valid_range(d.ow, d.w, d.stride, d.pad, kw, ow_lo, ow_hi);
        const T wv = wc[kh * d.k + kw];
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const T* src = xc + (oh * d.stride + kh - d.pad) * d.w;
          T* dst = oc + oh * d.ow;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += wv * src[ow * d.stride + kw - d.pad];
        }
      }
    }
  };

  for_each_sample(d.n, [&](std::size_t n) {
    for (std::size_t c = 0; c < d.in_c; ++c) {
      T* oc = out.data() + (n * d.in_c + c) * plane;
      std::fill(oc, oc + plane, b ? b[c] : T{0});
      forward_plane(x + (n * d.in_c + c) * d.in_plane(), w + c * d.k * d.k, oc);
    }
  });

  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      {d.n, d.in_c, d.oh, d.ow}, std::move(out), "depthwise_conv2d", std::move(inputs),
      [input, kernel, d](std::span<const T> g, Accs<T> acc) {
        const std::size_t plane = d.out_plane();
        const std::size_t kk = d.k * d.k;
        const T* x = input.data().data();
        const T* w = kernel.data().data();
        if (acc.size() > 2 && acc[2]) {
          T* db = acc[2]->data();
          for (std::size_t n = 0; n < d.n; ++n) {
            for (std::size_t c = 0; c < d.in_c; ++c) {
              const T* gc = g.data() + (n * d.in_c + c) * plane;
              T s = 0;
              for (std::size_t j = 0; j < plane; ++j) s += gc[j];
              db[c] += s;
            }
          }
        }
        if (acc[1]) {
          reduce_over_batch<T>(d.n, d.in_c * kk, acc[1]->data(), [&](std::size_t n, T* dw) {
            for (std::size_t c = 0; c < d.in_c; ++c) {
              const T* xc = x + (n * d.in_c + c) * d.in_plane();
              const T* gc = g.data() + (n * d.in_c + c) * plane;
              for (std::size_t kh = 0; kh < d.k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(d.oh, d.h, d.stride, d.pad, kh, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < d.k; ++kw) {
                  std::size_t ow_lo, ow_hi;
                  valid_range(d.ow, d.w, d.stride, d.pad, kw, ow_lo, ow_hi);
                  T s = 0;
                  for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    const T* src = xc + (oh * d.stride + kh - d.pad) * d.w;
                    const T* go = gc + oh * d.ow;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) s += go[ow] * src[ow * d.stride + kw - d.pad];
                  }
                  dw[c * kk + kh * d.k + kw] = s;
                }
              }
            }
          });
        }
        if (acc[0]) {
          T* dx = acc[0]->data();
          for_each_sample(d.n, [&](std::size_t n) {
            for (std::size_t c = 0; c < d.in_c; ++c) {
              T* dxc = dx + (n * d.in_c + c) * d.in_plane();
              const T* gc = g.data() + (n * d.in_c + c) * plane;
              const T* wc = w + c * kk;
              for (std::size_t kh = 0; kh < d.k; ++kh) {
                std::size_t oh_lo, oh_hi;
                valid_range(d.oh, d.h, d.stride, d.pad, kh, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < d.k; ++kw) {
                  std::size_t ow_lo, ow_hi;
                  valid_range(d.ow, d.w, d.stride, d.pad, kw, ow_lo, ow_hi);
                  const T wv = wc[kh * d.k + kw];
                  for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    T* dst = dxc + (oh * d.stride + kh - d.pad) * d.w;
                    const T* go = gc + oh * d.ow;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow * d.stride + kw - d.pad] += wv * go[ow];
                  }
                }
              }
            }
          });
        }
      });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, T eps, bool training, T momentum) {
  const auto& s = input.shape();
  if (s.size() != 4 && s.size() != 2) {
    throw DimensionError("batch_norm: input must be N×C×H×W or N×C, got " + shape_string(s));
  }
  if (!(eps >= 0)) throw ConfigError("batch_norm: eps must be non-negative");
  const std::size_t n = s[0], c = s[1], hw = s.size() == 4 ? s[2] * s[3] : 1;
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->numel() != c) {
      throw DimensionError("batch_norm: per-channel parameter " + shape_string(t->shape()) +
                           " does not match input " + shape_string(s));
    }
  }
  const std::size_t count = n * hw;
  if (training && count < 2) {
    throw ContractError("batch_norm: training mode needs at least 2 elements per channel, got " +
                        std::to_string(count));
  }

  std::vector<T> mean(c), inv_std(c);
  const T* x = input.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) acc += p[j];
      }
      mu = acc / static_cast<T>(count);
      T sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const T dv = p[j] - mu;
          sq += dv * dv;
        }
      }
      var = sq / static_cast<T>(count);
      running_mean[ch] = (1 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] =
          (1 - momentum) * running_var[ch] + momentum * sq / static_cast<T>(count - 1);
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    if (!(var + eps > 0)) {
      throw NumericError("batch_norm: variance + eps is not positive for channel " + std::to_string(ch));
    }
    mean[ch] = mu;
    inv_std[ch] = T{1} / std::sqrt(var + eps);
  }

  std::vector<T> out(input.numel());
  std::vector<T> xhat(input.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const T xh = (x[base + j] - mean[ch]) * inv_std[ch];
        xhat[base + j] = xh;
        out[base + j] = gamma[ch] * xh + beta[ch];
      }
    }
  }

  return detail::make_result<T>(
      s, std::move(out), "batch_norm", {input, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, training](std::span<const T> g,
                                                                                         Accs<T> acc) {
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              sum_g[ch] += g[base + j];
              sum_gx[ch] += g[base + j] * xhat[base + j];
            }
          }
        }
        if (acc[1]) {
          for (std::size_t ch = 0; ch < c; ++ch) (*acc[1])[ch] += sum_gx[ch];
        }
        if (acc[2]) {
          for (std::size_t ch = 0; ch < c; ++ch) (*acc[2])[ch] += sum_g[ch];
        }
        if (acc[0]) {
          T* dx = acc[0]->data();
          const T m = static_cast<T>(n * hw);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (i * c + ch) * hw;
              const T k = gamma[ch] * inv_std[ch];
              if (training) {
                const T mg = sum_g[ch] / m, mgx = sum_gx[ch] / m;
                for (std::size_t j = 0; j < hw; ++j) dx[base + j] += k * (g[base + j] - mg - xhat[base + j] * mgx);
              } else {
                for (std::size_t j = 0; j < hw; ++j) dx[base + j] += k * g[base + j];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] > 0 ? xs[i] : T{0};
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x}, [x](std::span<const T> g, Accs<T> acc) {
    const auto xs = x.data();
    auto& dx = *acc[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xs[i] > 0) dx[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", "input", x.shape(), 2);
  require_rank("linear", "weight", weight.shape(), 2);
  const std::size_t n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f) {
    throw DimensionError("linear: weight " + shape_string(weight.shape()) + " does not match input " +
                         shape_string(x.shape()));
  }
  if (bias.defined() && bias.numel() != o) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  std::vector<T> out(n * o);
  const T* xs = x.data().data();
  const T* ws = weight.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < o; ++j) {
      out[i * o + j] = dot(xs + i * f, ws + j * f, f) + (bias.defined() ? bias[j] : T{0});
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>({n, o}, std::move(out), "linear", std::move(inputs),
                                [x, weight, n, f, o](std::span<const T> g, Accs<T> acc) {
                                  const T* xs = x.data().data();
                                  const T* ws = weight.data().data();
                                  if (acc[0]) {
                                    T* dx = acc[0]->data();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < o; ++j) axpy(g[i * o + j], ws + j * f, dx + i * f, f);
                                  }
                                  if (acc[1]) {
                                    T* dw = acc[1]->data();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < o; ++j) axpy(g[i * o + j], xs + i * f, dw + j * f, f);
                                  }
                                  if (acc.size() > 2 && acc[2]) {
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < o; ++j) (*acc[2])[j] += g[i * o + j];
                                  }
                                });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank("global_avg_pool", "input", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  const T* xs = x.data().data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += xs[i * hw + j];
    out[i] = s / static_cast<T>(hw);
  }
  return detail::make_result<T>({n, c}, std::move(out), "global_avg_pool", {x},
                                [n, c, hw](std::span<const T> g, Accs<T> acc) {
                                  T* dx = acc[0]->data();
                                  const T inv = T{1} / static_cast<T>(hw);
                                  for (std::size_t i = 0; i < n * c; ++i)
                                    for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] += g[i] * inv;
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [](std::span<const T> g, Accs<T> acc) {
    for (auto* dst : acc) {
      if (!dst) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [a, b](std::span<const T> g, Accs<T> acc) {
    if (acc[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*acc[0])[i] += g[i] * b[i];
    if (acc[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*acc[1])[i] += g[i] * a[i];
  });
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> dbc_backward_rule(std::span<const T> upstream, std::span<const T> features,
                                                            std::span<const T> mask, const Shape& feature_shape) {
  const std::size_t n = feature_shape.at(0), c = feature_shape.at(1);
  const std::size_t inner = shape_numel(feature_shape) / (n * c);
  std::vector<T> grad_features(upstream.size());
  std::vector<T> grad_mask(c, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * inner;
      T s = 0;
      for (std::size_t j = 0; j < inner; ++j) {
        grad_features[base + j] = mask[ch] * upstream[base + j];
        s += upstream[base + j] * features[base + j];
      }
      grad_mask[ch] += s;
    }
  }
  return {std::move(grad_features), std::move(grad_mask)};
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() < 2) throw DimensionError("mul_channel: input must be N×C×…, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (s.numel() != c) {
    throw DimensionError("mul_channel: channel count " + std::to_string(c) + " does not match scale " +
                         shape_string(s.shape()));
  }
  const std::size_t inner = x.numel() / (n * c);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t k = (i * c + ch) * inner + j;
        out[k] = s[ch] * x[k];
      }
  return detail::make_result<T>(x.shape(), std::move(out), "mul_channel", {x, s},
                                [x, s](std::span<const T> g, Accs<T> acc) {
                                  auto [gx, gs] = dbc_backward_rule<T>(g, x.data(), s.data(), x.shape());
                                  if (acc[0])
                                    for (std::size_t i = 0; i < gx.size(); ++i) (*acc[0])[i] += gx[i];
                                  if (acc[1])
                                    for (std::size_t i = 0; i < gs.size(); ++i) (*acc[1])[i] += gs[i];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  const std::size_t count = x.numel();
  return detail::make_result<T>({}, {s}, "sum", {x}, [count](std::span<const T> g, Accs<T> acc) {
    for (std::size_t i = 0; i < count; ++i) (*acc[0])[i] += g[0];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(x.shape(), std::move(out), "scale", {x}, [factor](std::span<const T> g, Accs<T> acc) {
    for (std::size_t i = 0; i < g.size(); ++i) (*acc[0])[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
  return detail::make_result<T>(x.shape(), std::move(out), "add_scalar", {x}, [](std::span<const T> g, Accs<T> acc) {
    for (std::size_t i = 0; i < g.size(); ++i) (*acc[0])[i] += g[i];
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return detail::make_result<T>(x.shape(), std::move(out), "square", {x}, [x](std::span<const T> g, Accs<T> acc) {
    for (std::size_t i = 0; i < g.size(); ++i) (*acc[0])[i] += 2 * x[i] * g[i];
  });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", "logits", logits.shape(), 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(n));
  }
  std::vector<T> probs(n * k);
  std::vector<int> lab(labels.begin(), labels.end());
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= k) {
      throw DimensionError("softmax_cross_entropy: label " + std::to_string(lab[i]) + " outside [0, " +
                           std::to_string(k) + ")");
    }
    const T* row = logits.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    loss += std::log(z) + mx - row[lab[i]];
  }
  loss /= static_cast<T>(n);
  return detail::make_result<T>({}, {loss}, "softmax_cross_entropy", {logits},
                                [probs = std::move(probs), lab = std::move(lab), n, k](std::span<const T> g,
                                                                                      Accs<T> acc) {
                                  const T scale = g[0] / static_cast<T>(n);
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < k; ++j) {
                                      const T onehot = static_cast<int>(j) == lab[i] ? T{1} : T{0};
                                      (*acc[0])[i * k + j] += scale * (probs[i * k + j] - onehot);
                                    }
                                });
}

template <typename T>
Tensor<T> binarize_ste(const Tensor<T>& v, T threshold) {
  std::vector<T> out(v.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > threshold ? T{1} : T{0};
  return detail::make_result<T>(v.shape(), std::move(out), "binarize_ste", {v}, [](std::span<const T> g, Accs<T> acc) {
    for (std::size_t i = 0; i < g.size(); ++i) (*acc[0])[i] += g[i];
  });
}

#define PAS_INSTANTIATE_OPS(T)                                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvGeometry);                  \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvGeometry);        \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&, T, \
                                bool, T);                                                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul_channel(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                             \
  template Tensor<T> square(const Tensor<T>&);                                                                    \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                               \
  template Tensor<T> binarize_ste(const Tensor<T>&, T);                                                           \
  template std::pair<std::vector<T>, std::vector<T>> dbc_backward_rule(std::span<const T>, std::span<const T>,    \
                                                                       std::span<const T>, const Shape&);

PAS_INSTANTIATE_OPS(float)
PAS_INSTANTIATE_OPS(double)

}  // namespace pas
