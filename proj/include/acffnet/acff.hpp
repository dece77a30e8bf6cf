#pragma once

// Atrous convolutional feature fusion block:
//
//   x -> 1x1 reduce + BN + act = r
//   r -> depthwise 3x3 at each dilation d + BN = U_d
//   Z  = fuse(U_d1, ..., U_dk [, r])      add | max | average | concat
//   y  = 1x1 project(Z) + BN + act
//
// Branches are fused in ascending-dilation order with the skip branch last.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "acffnet/conv_unit.hpp"
#include "acffnet/error.hpp"
#include "acffnet/tensor.hpp"

namespace acff {

enum class FusionMode { add, max, average, concat };

inline std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::add: return "add";
    case FusionMode::max: return "max";
    case FusionMode::average: return "average";
    case FusionMode::concat: return "concat";
  }
  return "add";
}

inline FusionMode parse_fusion(std::string_view s) {
  if (s == "add") return FusionMode::add;
  if (s == "max") return FusionMode::max;
  if (s == "average" || s == "avg" || s == "mean") return FusionMode::average;
  if (s == "concat" || s == "concatenate") return FusionMode::concat;
  throw ConfigError("unknown fusion mode '" + std::string(s) + "'");
}

struct AcffConfig {
  std::size_t in_channels = 16;
  std::size_t out_channels = 64;
  std::vector<std::size_t> dilation_rates{1, 2, 3};
  std::size_t reduction_factor = 2;
  FusionMode fusion = FusionMode::add;
  bool include_skip = true;

  std::size_t reduced_channels() const { return in_channels / reduction_factor; }
  std::size_t branch_count() const { return dilation_rates.size() + (include_skip ? 1 : 0); }
  std::size_t fused_channels() const {
    return fusion == FusionMode::concat ? reduced_channels() * branch_count() : reduced_channels();
  }

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ConfigError("ACFF channels must be positive");
    if (reduction_factor == 0 || in_channels % reduction_factor != 0)
      throw ConfigError("ACFF in_channels " + std::to_string(in_channels) + " not divisible by reduction factor " +
                        std::to_string(reduction_factor));
    if (dilation_rates.empty()) throw ConfigError("ACFF needs at least one dilation rate");
    std::set<std::size_t> seen;
    for (auto d : dilation_rates) {
      if (d < 1) throw ConfigError("ACFF dilation rates must be >= 1");
      if (!seen.insert(d).second) throw ConfigError("ACFF dilation rates must be distinct");
    }
    if (branch_count() < 2 && fusion != FusionMode::concat)
      throw ConfigError("ACFF elementwise fusion needs at least two branches");
  }

  ConvUnitSpec reduce_spec() const { return {pointwise_conv(in_channels, reduced_channels()), false, true, true}; }
  ConvUnitSpec branch_spec(std::size_t i) const {
    return {depthwise_conv(reduced_channels(), 3, dilation_rates.at(i)), false, true, false};
  }
  ConvUnitSpec project_spec() const { return {pointwise_conv(fused_channels(), out_channels), false, true, true}; }
};

// Stored parameters: conv weights plus four batchnorm vectors per unit.
inline std::size_t acff_param_count(const AcffConfig& cfg) {
  cfg.validate();
  std::size_t total = cfg.reduce_spec().param_count() + cfg.project_spec().param_count();
  for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i) total += cfg.branch_spec(i).param_count();
  return total;
}

// Multiply-accumulates at a given spatial size (n = 1).
inline std::size_t acff_macs(const AcffConfig& cfg, std::size_t h, std::size_t w) {
  const auto macs = [&](const ConvUnitSpec& s) { return s.geom.macs(Shape{1, s.geom.out_channels, h, w}); };
  std::size_t total = macs(cfg.reduce_spec()) + macs(cfg.project_spec());
  for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i) total += macs(cfg.branch_spec(i));
  return total;
}

template <typename T>
struct AcffRefs {
  ConvUnitRefs<T> reduce;
  std::vector<ConvUnitRefs<T>> branches;
  ConvUnitRefs<T> project;
};

template <typename T>
struct AcffParams {
  ConvUnitParams<T> reduce;
  std::vector<ConvUnitParams<T>> branches;
  ConvUnitParams<T> project;

  static AcffParams random(const AcffConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    AcffParams p;
    p.reduce = ConvUnitParams<T>::random(cfg.reduce_spec(), rng);
    for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i)
      p.branches.push_back(ConvUnitParams<T>::random(cfg.branch_spec(i), rng));
    p.project = ConvUnitParams<T>::random(cfg.project_spec(), rng);
    return p;
  }

  AcffRefs<T> refs() const {
    AcffRefs<T> r{reduce.refs(), {}, project.refs()};
    for (const auto& b : branches) r.branches.push_back(b.refs());
    return r;
  }
};

template <typename T>
struct AcffCache {
  ConvUnitCache<T> reduce;
  Tensor<T> reduced;
  std::vector<ConvUnitCache<T>> branches;
  std::vector<std::uint8_t> max_source;  // winning branch per element, max fusion only
  Tensor<T> fused;
  ConvUnitCache<T> project;
};

namespace detail {

template <typename T>
void check_acff_refs(const AcffConfig& cfg, const AcffRefs<T>& refs) {
  if (refs.branches.size() != cfg.dilation_rates.size())
    throw ConfigError("ACFF parameter set has " + std::to_string(refs.branches.size()) + " branches, config has " +
                      std::to_string(cfg.dilation_rates.size()));
  const Shape expect = cfg.project_spec().geom.weight_shape();
  if (refs.project.weights == nullptr || refs.project.weights->shape() != expect)
    throw ConfigError("ACFF pointwise projection weights " +
                      (refs.project.weights ? refs.project.weights->shape().str() : std::string("(none)")) +
                      " do not match fusion " + std::string(to_string(cfg.fusion)) + " input width " +
                      expect.str());
}

template <typename T>
Tensor<T> fuse_branches(const std::vector<const Tensor<T>*>& parts, FusionMode mode,
                        std::vector<std::uint8_t>* max_source) {
  if (parts.size() == 1) return *parts[0];
  switch (mode) {
    case FusionMode::add: return elementwise_combine<T>(std::span<const Tensor<T>* const>(parts), Combine::add);
    case FusionMode::average:
      return elementwise_combine<T>(std::span<const Tensor<T>* const>(parts), Combine::average);
    case FusionMode::concat: return channel_concat<T>(std::span<const Tensor<T>* const>(parts));
    case FusionMode::max: {
      Tensor<T> out = *parts[0];
      if (max_source) max_source->assign(out.size(), 0);
      for (std::size_t k = 1; k < parts.size(); ++k) {
        const T* src = parts[k]->raw();
        for (std::size_t i = 0; i < out.size(); ++i)
          if (src[i] > out[i]) {
            out[i] = src[i];
            if (max_source) (*max_source)[i] = static_cast<std::uint8_t>(k);
          }
      }
      return out;
    }
  }
  throw ConfigError("unknown fusion mode");
}

}  // namespace detail

template <typename T>
Tensor<T> acff_forward(const Tensor<T>& input, const AcffConfig& cfg, const AcffRefs<T>& refs, Phase phase,
                       const ActivationSpec& act = {}, AcffCache<T>* cache = nullptr) {
  cfg.validate();
  if (input.shape().c != cfg.in_channels)
    throw ShapeError("ACFF block expects " + std::to_string(cfg.in_channels) + " channels, got " +
                     std::to_string(input.shape().c));
  detail::check_acff_refs(cfg, refs);

  Tensor<T> reduced = conv_unit_forward(input, cfg.reduce_spec(), refs.reduce, phase, act,
                                        cache ? &cache->reduce : nullptr);
  std::vector<Tensor<T>> branch_out;
  branch_out.reserve(cfg.dilation_rates.size());
  if (cache) cache->branches.resize(cfg.dilation_rates.size());
  for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i)
    branch_out.push_back(conv_unit_forward(reduced, cfg.branch_spec(i), refs.branches[i], phase, act,
                                           cache ? &cache->branches[i] : nullptr));

  std::vector<const Tensor<T>*> parts;
  for (const auto& b : branch_out) parts.push_back(&b);
  if (cfg.include_skip) parts.push_back(&reduced);
  Tensor<T> fused = detail::fuse_branches(parts, cfg.fusion, cache ? &cache->max_source : nullptr);
  branch_out.clear();

  Tensor<T> out = conv_unit_forward(fused, cfg.project_spec(), refs.project, phase, act,
                                    cache ? &cache->project : nullptr);
  if (cache) {
    cache->reduced = std::move(reduced);
    cache->fused = std::move(fused);
  }
  return out;
}

template <typename T>
struct AcffGrads {
  Tensor<T> input;
  ConvUnitGrads<T> reduce;
  std::vector<ConvUnitGrads<T>> branches;
  ConvUnitGrads<T> project;
};

template <typename T>
AcffGrads<T> acff_backward(const Tensor<T>& input, const AcffConfig& cfg, const AcffRefs<T>& refs,
                           const AcffCache<T>& cache, Phase phase, const ActivationSpec& act,
                           const Tensor<T>& grad_out, bool want_input = true, bool want_params = true) {
  AcffGrads<T> g;
  g.project = conv_unit_backward(cache.fused, cfg.project_spec(), refs.project, cache.project, phase, act, grad_out,
                                 true, want_params);
  const Tensor<T>& grad_fused = g.project.input;
  const std::size_t nb = cfg.dilation_rates.size();
  const std::size_t parts = cfg.branch_count();

  // Gradient reaching each fused part (branches first, skip last).
  auto part_grad = [&](std::size_t k) -> Tensor<T> {
    if (parts == 1) return grad_fused;
    const Shape rs = cache.reduced.shape();
    switch (cfg.fusion) {
      case FusionMode::add: return grad_fused;
      case FusionMode::average: {
        Tensor<T> t = grad_fused;
        const T scale = T(1) / static_cast<T>(parts);
        for (auto& v : t.data()) v *= scale;
        return t;
      }
      case FusionMode::max: {
        Tensor<T> t(rs);
        for (std::size_t i = 0; i < t.size(); ++i)
          if (cache.max_source[i] == k) t[i] = grad_fused[i];
        return t;
      }
      case FusionMode::concat: return channel_slice(grad_fused, k * rs.c, rs.c);
    }
    return grad_fused;
  };

  Tensor<T> grad_reduced = cfg.include_skip ? part_grad(nb) : Tensor<T>(cache.reduced.shape());
  g.branches.reserve(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    Tensor<T> gp = part_grad(i);
    g.branches.push_back(conv_unit_backward(cache.reduced, cfg.branch_spec(i), refs.branches[i], cache.branches[i],
                                            phase, act, gp, true, want_params));
    const Tensor<T>& gi = g.branches.back().input;
    for (std::size_t e = 0; e < grad_reduced.size(); ++e) grad_reduced[e] += gi[e];
    g.branches.back().input = Tensor<T>();
  }
  g.project.input = Tensor<T>();
  g.reduce = conv_unit_backward(input, cfg.reduce_spec(), refs.reduce, cache.reduce, phase, act, grad_reduced,
                                want_input, want_params);
  g.input = std::move(g.reduce.input);
  return g;
}

}  // namespace acff
