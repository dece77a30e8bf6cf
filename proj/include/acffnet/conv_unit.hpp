#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "acffnet/layers.hpp"

namespace acff {

// conv -> optional batchnorm -> optional capped leaky relu
struct ConvUnitSpec {
  ConvGeometry geom;
  bool bias = false;
  bool batchnorm = true;
  bool activation = true;

  std::size_t param_count() const {
    return geom.weight_count() + (bias ? geom.out_channels : 0) + (batchnorm ? 4 * geom.out_channels : 0);
  }
};

template <typename T>
struct ConvUnitRefs {
  const Tensor<T>* weights = nullptr;
  std::span<const T> bias;
  BatchNormView<T> bn;
};

// Owning parameters for a unit used outside a graph.
template <typename T>
struct ConvUnitParams {
  Tensor<T> weights;
  std::vector<T> bias;
  BatchNormParams<T> bn;

  static ConvUnitParams zeros(const ConvUnitSpec& spec) {
    ConvUnitParams p;
    p.weights = Tensor<T>(spec.geom.weight_shape());
    if (spec.bias) p.bias.assign(spec.geom.out_channels, T(0));
    if (spec.batchnorm) p.bn = BatchNormParams<T>::identity(spec.geom.out_channels);
    return p;
  }

  // He-normal weights over the fan-in, identity batchnorm.
  static ConvUnitParams random(const ConvUnitSpec& spec, std::mt19937_64& rng) {
    ConvUnitParams p = zeros(spec);
    const double fan_in = static_cast<double>(spec.geom.in_per_group() * spec.geom.kh * spec.geom.kw);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : p.weights.data()) v = static_cast<T>(dist(rng));
    return p;
  }

  ConvUnitRefs<T> refs() const { return {&weights, bias, view_of(bn)}; }
};

template <typename T>
struct ConvUnitCache {
  BatchNormCache<T> bn;
  BatchStats<T> stats;
  Tensor<T> pre_act;
};

template <typename T>
Tensor<T> conv_unit_forward(const Tensor<T>& input, const ConvUnitSpec& spec, const ConvUnitRefs<T>& refs,
                            Phase phase, const ActivationSpec& act, ConvUnitCache<T>* cache = nullptr) {
  Tensor<T> y = conv2d_forward(input, spec.geom, *refs.weights, spec.bias ? refs.bias : std::span<const T>{});
  if (spec.batchnorm)
    y = batchnorm_forward(y, refs.bn, phase, cache ? &cache->bn : nullptr,
                          cache && phase == Phase::train ? &cache->stats : nullptr);
  if (spec.activation) {
    if (cache) cache->pre_act = y;
    y = capped_leaky_relu(y, act, phase);
  }
  return y;
}

template <typename T>
struct ConvUnitGrads {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
ConvUnitGrads<T> conv_unit_backward(const Tensor<T>& input, const ConvUnitSpec& spec, const ConvUnitRefs<T>& refs,
                                    const ConvUnitCache<T>& cache, Phase phase, const ActivationSpec& act,
                                    const Tensor<T>& grad_out, bool want_input = true, bool want_params = true) {
  ConvUnitGrads<T> g;
  Tensor<T> grad = spec.activation ? capped_leaky_relu_backward(cache.pre_act, grad_out, act, phase) : grad_out;
  if (spec.batchnorm) {
    auto bn = batchnorm_backward(cache.bn, refs.bn.gamma, grad);
    grad = std::move(bn.input);
    g.gamma = std::move(bn.gamma);
    g.beta = std::move(bn.beta);
  }
  auto conv = conv2d_backward(input, spec.geom, *refs.weights, spec.bias, grad, want_input, want_params);
  g.input = std::move(conv.input);
  g.weights = std::move(conv.weights);
  g.bias = std::move(conv.bias);
  return g;
}

}  // namespace acff
