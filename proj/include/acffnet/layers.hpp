#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "acffnet/error.hpp"
#include "acffnet/parallel.hpp"
#include "acffnet/tensor.hpp"

namespace acff {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kh = 3;
  std::size_t kw = 3;
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  bool depthwise() const { return groups == in_channels && groups > 1 && in_per_group() == 1; }
  std::size_t weight_count() const { return out_channels * in_per_group() * kh * kw; }
  Shape weight_shape() const { return {out_channels, in_per_group(), kh, kw}; }

  void validate() const {
    if (in_channels == 0 || out_channels == 0 || kh == 0 || kw == 0 || groups == 0)
      throw ConfigError("convolution with a zero dimension");
    if (stride < 1) throw ConfigError("convolution stride must be >= 1");
    if (dilation < 1) throw ConfigError("convolution dilation must be >= 1");
    if (in_channels % groups != 0 || out_channels % groups != 0)
      throw ConfigError("convolution channels not divisible by groups");
  }

  std::size_t out_size(std::size_t in, std::size_t k, std::size_t pad) const {
    const std::size_t span = dilation * (k - 1) + 1;
    if (in + 2 * pad < span) throw ShapeError("convolution kernel larger than padded input");
    return (in + 2 * pad - span) / stride + 1;
  }

  Shape output_shape(const Shape& in) const {
    if (in.c != in_channels)
      throw ShapeError("convolution expects " + std::to_string(in_channels) + " channels, got " +
                       std::to_string(in.c));
    return {in.n, out_channels, out_size(in.h, kh, pad_h), out_size(in.w, kw, pad_w)};
  }

  std::size_t macs(const Shape& out) const { return out.n * out.plane() * out.c * in_per_group() * kh * kw; }
};

// Zero padding that keeps ceil(in/stride) outputs for odd kernels.
inline ConvGeometry same_conv(std::size_t in, std::size_t out, std::size_t kh, std::size_t kw,
                              std::size_t stride = 1, std::size_t dilation = 1, std::size_t groups = 1) {
  ConvGeometry g{in, out, kh, kw, groups, stride, dilation, dilation * (kh - 1) / 2, dilation * (kw - 1) / 2};
  g.validate();
  return g;
}

inline ConvGeometry depthwise_conv(std::size_t channels, std::size_t k, std::size_t dilation) {
  return same_conv(channels, channels, k, k, 1, dilation, channels);
}

inline ConvGeometry pointwise_conv(std::size_t in, std::size_t out) { return same_conv(in, out, 1, 1); }

template <typename T>
struct ConvKernel {
  ConvGeometry geom;
  Tensor<T> weights;
  std::vector<T> bias;  // empty when the convolution is bias-free
};

// Side length k + (k - 1)(d - 1) covered by a dilated k-tap kernel.
constexpr std::size_t effective_receptive_field(std::size_t k, std::size_t d) { return k + (k - 1) * (d - 1); }

namespace detail {

// Output columns x in [lo, hi) whose tap x*stride + offset lands inside [0, width).
inline void valid_range(std::ptrdiff_t offset, std::size_t stride, std::size_t width, std::size_t out,
                        std::size_t& lo, std::size_t& hi) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t last = (static_cast<std::ptrdiff_t>(width) - 1 - offset);
  if (last < 0) {
    lo = hi = 0;
    return;
  }
  last = last / s + 1;
  lo = static_cast<std::size_t>(std::min<std::ptrdiff_t>(first, static_cast<std::ptrdiff_t>(out)));
  hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(out)));
  if (hi < lo) hi = lo;
}

inline bool is_plain_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
}

template <typename T>
void check_kernel(const ConvGeometry& g, const Tensor<T>& weights, std::span<const T> bias) {
  g.validate();
  if (weights.shape() != g.weight_shape())
    throw ShapeError("convolution weights " + weights.shape().str() + " do not match geometry " +
                     g.weight_shape().str());
  if (!bias.empty() && bias.size() != g.out_channels) throw ShapeError("convolution bias length mismatch");
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvGeometry& g, const Tensor<T>& weights,
                         std::span<const T> bias = {}) {
  detail::check_kernel(g, weights, bias);
  const Shape in = input.shape();
  const Shape os = g.output_shape(in);
  Tensor<T> out(os);
  const std::size_t ipg = g.in_per_group();
  const std::size_t opg = g.out_per_group();
  const std::size_t taps = g.kh * g.kw;
  const bool plain = detail::is_plain_pointwise(g);

  parallel_for(os.n * os.c, [&](std::size_t job) {
    const std::size_t n = job / os.c;
    const std::size_t o = job % os.c;
    T* dst = out.plane(n, o);
    std::fill_n(dst, os.plane(), bias.empty() ? T(0) : bias[o]);
    const std::size_t group = o / opg;
    const T* wrow = weights.raw() + o * ipg * taps;
    for (std::size_t ic = 0; ic < ipg; ++ic) {
      const T* src = input.plane(n, group * ipg + ic);
      if (plain) {
        const T wv = wrow[ic];
        const std::size_t len = os.plane();
        for (std::size_t i = 0; i < len; ++i) dst[i] += wv * src[i];
        continue;
      }
      for (std::size_t ki = 0; ki < g.kh; ++ki) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_h);
        std::size_t ylo, yhi;
        detail::valid_range(dy, g.stride, in.h, os.h, ylo, yhi);
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          const T wv = wrow[(ic * g.kh + ki) * g.kw + kj];
          const std::ptrdiff_t dx =
              static_cast<std::ptrdiff_t>(kj * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_w);
          std::size_t xlo, xhi;
          detail::valid_range(dx, g.stride, in.w, os.w, xlo, xhi);
          for (std::size_t y = ylo; y < yhi; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y * g.stride) + dy;
            T* drow = dst + y * os.w;
            const T* srow = src + sy * static_cast<std::ptrdiff_t>(in.w) + dx;
            if (g.stride == 1) {
              for (std::size_t x = xlo; x < xhi; ++x) drow[x] += wv * srow[x];
            } else {
              for (std::size_t x = xlo; x < xhi; ++x) drow[x] += wv * srow[x * g.stride];
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  return conv2d_forward(input, kernel.geom, kernel.weights, std::span<const T>(kernel.bias));
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;    // empty when not requested
  Tensor<T> weights;
  std::vector<T> bias;
};

// Reverse-mode gradients of conv2d_forward. Weight/bias gradients are
// written fresh (not accumulated).
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvGeometry& g, const Tensor<T>& weights,
                             bool has_bias, const Tensor<T>& grad_out, bool want_input = true,
                             bool want_params = true) {
  detail::check_kernel(g, weights, std::span<const T>{});
  const Shape in = input.shape();
  const Shape os = g.output_shape(in);
  if (grad_out.shape() != os)
    throw ShapeError("conv2d_backward gradient " + grad_out.shape().str() + " does not match output " + os.str());
  const std::size_t ipg = g.in_per_group();
  const std::size_t opg = g.out_per_group();
  const std::size_t taps = g.kh * g.kw;
  const bool plain = detail::is_plain_pointwise(g);
  ConvGrads<T> grads;

  if (want_input) {
    grads.input = Tensor<T>(in);
    parallel_for(in.n * in.c, [&](std::size_t job) {
      const std::size_t n = job / in.c;
      const std::size_t cin = job % in.c;
      const std::size_t group = cin / ipg;
      const std::size_t ic = cin % ipg;
      T* gin = grads.input.plane(n, cin);
      for (std::size_t oo = 0; oo < opg; ++oo) {
        const std::size_t o = group * opg + oo;
        const T* gout = grad_out.plane(n, o);
        const T* wrow = weights.raw() + (o * ipg + ic) * taps;
        if (plain) {
          const T wv = wrow[0];
          const std::size_t len = os.plane();
          for (std::size_t i = 0; i < len; ++i) gin[i] += wv * gout[i];
          continue;
        }
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          const std::ptrdiff_t dy =
              static_cast<std::ptrdiff_t>(ki * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_h);
          std::size_t ylo, yhi;
          detail::valid_range(dy, g.stride, in.h, os.h, ylo, yhi);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const T wv = wrow[ki * g.kw + kj];
            const std::ptrdiff_t dx =
                static_cast<std::ptrdiff_t>(kj * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_w);
            std::size_t xlo, xhi;
            detail::valid_range(dx, g.stride, in.w, os.w, xlo, xhi);
            for (std::size_t y = ylo; y < yhi; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y * g.stride) + dy;
              T* irow = gin + sy * static_cast<std::ptrdiff_t>(in.w) + dx;
              const T* grow = gout + y * os.w;
              if (g.stride == 1) {
                for (std::size_t x = xlo; x < xhi; ++x) irow[x] += wv * grow[x];
              } else {
                for (std::size_t x = xlo; x < xhi; ++x) irow[x * g.stride] += wv * grow[x];
              }
            }
          }
        }
      }
    });
  }

  if (want_params) {
    grads.weights = Tensor<T>(g.weight_shape());
    if (has_bias) grads.bias.assign(g.out_channels, T(0));
    parallel_for(g.out_channels, [&](std::size_t o) {
      const std::size_t group = o / opg;
      T* wgrad = grads.weights.raw() + o * ipg * taps;
      for (std::size_t n = 0; n < in.n; ++n) {
        const T* gout = grad_out.plane(n, o);
        if (has_bias) {
          T s = 0;
          for (std::size_t i = 0; i < os.plane(); ++i) s += gout[i];
          grads.bias[o] += s;
        }
        for (std::size_t ic = 0; ic < ipg; ++ic) {
          const T* src = input.plane(n, group * ipg + ic);
          if (plain) {
            T s = 0;
            for (std::size_t i = 0; i < os.plane(); ++i) s += gout[i] * src[i];
            wgrad[ic] += s;
            continue;
          }
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const std::ptrdiff_t dy =
                static_cast<std::ptrdiff_t>(ki * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_h);
            std::size_t ylo, yhi;
            detail::valid_range(dy, g.stride, in.h, os.h, ylo, yhi);
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const std::ptrdiff_t dx =
                  static_cast<std::ptrdiff_t>(kj * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_w);
              std::size_t xlo, xhi;
              detail::valid_range(dx, g.stride, in.w, os.w, xlo, xhi);
              T s = 0;
              for (std::size_t y = ylo; y < yhi; ++y) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y * g.stride) + dy;
                const T* srow = src + sy * static_cast<std::ptrdiff_t>(in.w) + dx;
                const T* grow = gout + y * os.w;
                if (g.stride == 1) {
                  for (std::size_t x = xlo; x < xhi; ++x) s += grow[x] * srow[x];
                } else {
                  for (std::size_t x = xlo; x < xhi; ++x) s += grow[x] * srow[x * g.stride];
                }
              }
              wgrad[(ic * g.kh + ki) * g.kw + kj] += s;
            }
          }
        }
      }
    });
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> mean;
  std::vector<T> var;
  T eps = T(1e-3);
  T momentum = T(0.99);

  static BatchNormParams identity(std::size_t channels) {
    return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0)), std::vector<T>(channels, T(0)),
            std::vector<T>(channels, T(1))};
  }
  std::size_t channels() const { return gamma.size(); }
};

// Non-owning view of the four per-channel vectors.
template <typename T>
struct BatchNormView {
  std::span<const T> gamma;
  std::span<const T> beta;
  std::span<const T> mean;
  std::span<const T> var;
  T eps = T(1e-3);

  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
BatchNormView<T> view_of(const BatchNormParams<T>& p) {
  return {p.gamma, p.beta, p.mean, p.var, p.eps};
}

template <typename T>
struct BatchNormCache {
  Phase phase = Phase::infer;
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

// Per-channel batch statistics observed in a train-phase pass.
template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const BatchNormView<T>& p, Phase phase,
                            BatchNormCache<T>* cache = nullptr, BatchStats<T>* stats = nullptr) {
  const Shape s = input.shape();
  const std::size_t channels = p.channels();
  if (s.c != channels || p.beta.size() != channels || p.mean.size() != channels || p.var.size() != channels)
    throw ShapeError("batchnorm channel mismatch: input " + s.str() + ", params " + std::to_string(channels));
  Tensor<T> out(s);
  std::vector<T> inv_std(channels);
  std::vector<T> mean(channels);
  std::vector<T> var(channels);
  Tensor<T>* xhat = nullptr;
  if (cache) {
    cache->phase = phase;
    cache->xhat = Tensor<T>(s);
    xhat = &cache->xhat;
  }
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);

  parallel_for(channels, [&](std::size_t c) {
    double mu, sigma2;
    if (phase == Phase::train) {
      double sum = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      }
      mu = sum / count;
      double sq = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = src[i] - mu;
          sq += d * d;
        }
      }
      sigma2 = sq / count;
    } else {
      mu = p.mean[c];
      sigma2 = p.var[c];
    }
    mean[c] = static_cast<T>(mu);
    var[c] = static_cast<T>(sigma2);
    const T istd = static_cast<T>(1.0 / std::sqrt(sigma2 + static_cast<double>(p.eps)));
    inv_std[c] = istd;
    const T m = static_cast<T>(mu);
    const T gamma = p.gamma[c];
    const T beta = p.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = input.plane(n, c);
      T* dst = out.plane(n, c);
      T* xh = xhat ? xhat->plane(n, c) : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = (src[i] - m) * istd;
        if (xh) xh[i] = v;
        dst[i] = gamma * v + beta;
      }
    }
  });
  if (cache) cache->inv_std = std::move(inv_std);
  if (stats) {
    stats->mean = std::move(mean);
    stats->var = std::move(var);
  }
  return out;
}

// Running-statistic update: r <- momentum*r + (1-momentum)*batch.
template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var, const BatchStats<T>& batch,
                          T momentum) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * batch.mean[c];
    running_var[c] = momentum * running_var[c] + (T(1) - momentum) * batch.var[c];
  }
}

// Train-phase forward that also folds the batch statistics into p.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, BatchNormParams<T>& p, Phase phase,
                            BatchNormCache<T>* cache = nullptr) {
  BatchStats<T> stats;
  Tensor<T> out = batchnorm_forward(input, view_of(p), phase, cache, phase == Phase::train ? &stats : nullptr);
  if (phase == Phase::train) update_running_stats<T>(p.mean, p.var, stats, p.momentum);
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                     const Tensor<T>& grad_out) {
  const Shape s = grad_out.shape();
  if (cache.xhat.shape() != s) throw ShapeError("batchnorm_backward shape mismatch with cached forward");
  const std::size_t channels = s.c;
  const std::size_t plane = s.plane();
  const T count = static_cast<T>(s.n * plane);
  BatchNormGrads<T> g{Tensor<T>(s), std::vector<T>(channels), std::vector<T>(channels)};
  parallel_for(channels, [&](std::size_t c) {
    T dgamma = 0, dbeta = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* go = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        dgamma += go[i] * xh[i];
        dbeta += go[i];
      }
    }
    g.gamma[c] = dgamma;
    g.beta[c] = dbeta;
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* go = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      T* gi = g.input.plane(n, c);
      if (cache.phase == Phase::train) {
        const T k = scale / count;
        for (std::size_t i = 0; i < plane; ++i) gi[i] = k * (count * go[i] - dbeta - xh[i] * dgamma);
      } else {
        for (std::size_t i = 0; i < plane; ++i) gi[i] = scale * go[i];
      }
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Capped leaky ReLU
// ---------------------------------------------------------------------------

struct ActivationSpec {
  double cap = 255.0;
  double alpha = 0.01;  // negative slope, train phase only

  void validate() const {
    if (!(cap > 0)) throw ConfigError("activation cap must be positive");
    if (!(alpha >= 0 && alpha < 1)) throw ConfigError("leak slope must be in [0, 1)");
  }
};

// train: min(cap, x >= 0 ? x : alpha*x); infer: min(cap, max(0, x)).
template <typename T>
T capped_leaky_relu(T x, const ActivationSpec& spec, Phase phase) {
  const T cap = static_cast<T>(spec.cap);
  T y = x >= T(0) ? x : (phase == Phase::train ? static_cast<T>(spec.alpha) * x : T(0));
  return y > cap ? cap : y;
}

template <typename T>
Tensor<T> capped_leaky_relu(const Tensor<T>& input, const ActivationSpec& spec, Phase phase) {
  Tensor<T> out(input.shape());
  const std::size_t count = input.size();
  const T cap = static_cast<T>(spec.cap);
  const T leak = phase == Phase::train ? static_cast<T>(spec.alpha) : T(0);
  const T* src = input.raw();
  T* dst = out.raw();
  for (std::size_t i = 0; i < count; ++i) {
    const T x = src[i];
    const T y = x >= T(0) ? x : leak * x;
    dst[i] = y > cap ? cap : y;
  }
  return out;
}

// Subgradient: 0 above the cap, 1 on [0, cap], leak (train) or 0 (infer) below.
template <typename T>
Tensor<T> capped_leaky_relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out, const ActivationSpec& spec,
                                     Phase phase) {
  if (input.shape() != grad_out.shape()) throw ShapeError("activation backward shape mismatch");
  Tensor<T> g(input.shape());
  const T cap = static_cast<T>(spec.cap);
  const T leak = phase == Phase::train ? static_cast<T>(spec.alpha) : T(0);
  const std::size_t count = input.size();
  const T* x = input.raw();
  const T* go = grad_out.raw();
  T* gi = g.raw();
  for (std::size_t i = 0; i < count; ++i) {
    const T v = x[i];
    const T slope = v >= T(0) ? (v > cap ? T(0) : T(1)) : leak;
    gi[i] = slope * go[i];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Flat in-plane offset of the winning input for every pooled output.
struct MaxPoolCache {
  Shape input;
  std::vector<std::uint32_t> argmax;
};

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window = 2, std::size_t stride = 2,
                    MaxPoolCache* cache = nullptr) {
  const Shape s = input.shape();
  if (window == 0 || stride == 0) throw ConfigError("pooling window and stride must be >= 1");
  if (s.h < window || s.w < window) throw ShapeError("pooling window larger than input " + s.str());
  const Shape os{s.n, s.c, (s.h - window) / stride + 1, (s.w - window) / stride + 1};
  Tensor<T> out(os);
  if (cache) {
    cache->input = s;
    cache->argmax.assign(os.count(), 0);
  }
  parallel_for(s.n * s.c, [&](std::size_t job) {
    const std::size_t n = job / s.c, c = job % s.c;
    const T* src = input.plane(n, c);
    T* dst = out.plane(n, c);
    std::uint32_t* arg = cache ? cache->argmax.data() + job * os.plane() : nullptr;
    for (std::size_t y = 0; y < os.h; ++y) {
      for (std::size_t x = 0; x < os.w; ++x) {
        std::size_t best = y * stride * s.w + x * stride;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (y * stride + i) * s.w + x * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        dst[y * os.w + x] = src[best];
        if (arg) arg[y * os.w + x] = static_cast<std::uint32_t>(best);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> maxpool2d_backward(const MaxPoolCache& cache, const Tensor<T>& grad_out) {
  if (grad_out.size() != cache.argmax.size()) throw ShapeError("maxpool backward shape mismatch with cached forward");
  Tensor<T> g(cache.input);
  const std::size_t out_plane = grad_out.shape().plane();
  const std::size_t planes = cache.input.n * cache.input.c;
  for (std::size_t p = 0; p < planes; ++p) {
    T* dst = g.raw() + p * cache.input.plane();
    const T* go = grad_out.raw() + p * out_plane;
    const std::uint32_t* arg = cache.argmax.data() + p * out_plane;
    for (std::size_t i = 0; i < out_plane; ++i) dst[arg[i]] += go[i];
  }
  return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = input.plane(n, c);
      double sum = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) sum += src[i];
      out.at(n, c, 0, 0) = static_cast<T>(sum / static_cast<double>(s.plane()));
    }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input, const Tensor<T>& grad_out) {
  if (grad_out.shape() != Shape{input.n, input.c, 1, 1}) throw ShapeError("global pool backward shape mismatch");
  Tensor<T> g(input);
  const T scale = T(1) / static_cast<T>(input.plane());
  for (std::size_t n = 0; n < input.n; ++n)
    for (std::size_t c = 0; c < input.c; ++c) std::fill_n(g.plane(n, c), input.plane(), grad_out.at(n, c, 0, 0) * scale);
  return g;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double e = std::exp(static_cast<double>(logits[i] - peak));
    out[i] = static_cast<T>(e);
    sum += e;
  }
  for (auto& v : out) v = static_cast<T>(v / sum);
  return out;
}

// Softmax over the channel axis of an (n, k, 1, 1) tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("softmax expects (n, k, 1, 1), got " + s.str());
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const auto p = softmax(std::span<const T>(logits.plane(n, 0), s.c));
    std::copy(p.begin(), p.end(), out.plane(n, 0));
  }
  return out;
}

// dL/dz = p * (g - <p, g>) per sample.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_out) {
  const Shape s = probs.shape();
  if (grad_out.shape() != s) throw ShapeError("softmax backward shape mismatch");
  Tensor<T> g(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = probs.plane(n, 0);
    const T* go = grad_out.plane(n, 0);
    T dot = 0;
    for (std::size_t k = 0; k < s.c; ++k) dot += p[k] * go[k];
    T* gi = g.plane(n, 0);
    for (std::size_t k = 0; k < s.c; ++k) gi[k] = p[k] * (go[k] - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Phase phase, std::mt19937_64& rng,
                  std::vector<std::uint8_t>* mask = nullptr) {
  if (!(rate >= 0 && rate < 1)) throw ConfigError("dropout rate must be in [0, 1)");
  if (phase == Phase::infer || rate == 0) return input;
  Tensor<T> out(input.shape());
  std::bernoulli_distribution drop(rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  if (mask) mask->resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const bool keep = !drop(rng);
    if (mask) (*mask)[i] = keep ? 1 : 0;
    out[i] = keep ? input[i] * scale : T(0);
  }
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const std::vector<std::uint8_t>& mask, double rate,
                           Phase phase) {
  if (phase == Phase::infer || rate == 0) return grad_out;
  if (mask.size() != grad_out.size()) throw ShapeError("dropout backward shape mismatch with cached forward");
  Tensor<T> g(grad_out.shape());
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask[i] ? grad_out[i] * scale : T(0);
  return g;
}

}  // namespace acff
