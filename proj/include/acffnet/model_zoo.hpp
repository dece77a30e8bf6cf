#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "acffnet/graph.hpp"

namespace acff {

enum class BaselineKind { standard, depthwise_separable, spatially_separable };

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::standard: return "standard";
    case BaselineKind::depthwise_separable: return "depthwise-separable";
    case BaselineKind::spatially_separable: return "spatially-separable";
  }
  return "standard";
}

inline BaselineKind parse_baseline(std::string_view s) {
  if (s == "standard") return BaselineKind::standard;
  if (s == "depthwise-separable" || s == "depthwise") return BaselineKind::depthwise_separable;
  if (s == "spatially-separable" || s == "spatial") return BaselineKind::spatially_separable;
  throw ConfigError("unknown baseline '" + std::string(s) + "'");
}

namespace detail {

inline void validate_recipe(const ModelRecipe& r) {
  if (r.classes < 2) throw ConfigError("a classifier needs at least two classes");
  if (r.channels.size() < 2) throw ConfigError("channel schedule needs a stem and at least one block");
  if (r.input < 16) throw ConfigError("input size must be at least 16");
  if (!r.labels.empty() && r.labels.size() != r.classes)
    throw ConfigError("label count " + std::to_string(r.labels.size()) + " does not match class count " +
                      std::to_string(r.classes));
}

// Blocks after which a 2x2 max pool halves the resolution.
constexpr std::size_t pooled_blocks = 3;

}  // namespace detail

// Stem conv (stride 2) -> blocks with pooling after the first three ->
// dropout -> 1x1 classifier -> global pool -> softmax. `block` appends the
// per-block body for block index i (1-based) with the given output width.
template <typename T, typename BlockFn>
ModelGraph<T> build_skeleton(const ModelRecipe& r, BlockFn&& block) {
  detail::validate_recipe(r);
  GraphBuilder<T> b(Shape{1, 3, r.input, r.input});
  b.conv("conv1", {.out_channels = r.channels[0], .kh = 3, .kw = 3, .stride = 2});
  for (std::size_t i = 1; i < r.channels.size(); ++i) {
    block(b, i, r.channels[i]);
    if (i <= detail::pooled_blocks && i + 1 < r.channels.size()) b.maxpool("pool" + std::to_string(i));
  }
  if (r.dropout > 0) b.dropout("dropout", r.dropout);
  b.conv("classifier",
         {.out_channels = r.classes, .kh = 1, .kw = 1, .bias = true, .batchnorm = false, .activation = false});
  b.global_pool("gap");
  b.softmax("softmax");
  ModelGraph<T> g = std::move(b).build();
  g.set_recipe(r);
  return g;
}

template <typename T = float>
ModelGraph<T> build_emergencynet(const ModelRecipe& r) {
  if (r.arch != "emergencynet") throw ConfigError("recipe arch '" + r.arch + "' is not emergencynet");
  return build_skeleton<T>(r, [&](GraphBuilder<T>& b, std::size_t i, std::size_t out) {
    AcffConfig cfg;
    cfg.out_channels = out;
    cfg.dilation_rates = r.dilations;
    cfg.reduction_factor = r.reduction;
    cfg.fusion = r.fusion;
    cfg.include_skip = r.skip;
    b.acff("acff" + std::to_string(i), cfg);
  });
}

template <typename T = float>
ModelGraph<T> build_emergencynet(FusionMode fusion = FusionMode::add, std::size_t num_classes = 5,
                                 std::size_t input = 240) {
  ModelRecipe r;
  r.fusion = fusion;
  r.classes = num_classes;
  r.input = input;
  if (num_classes != r.labels.size()) r.labels.clear();
  return build_emergencynet<T>(r);
}

template <typename T = float>
ModelGraph<T> build_baseline(const ModelRecipe& r) {
  const BaselineKind kind = parse_baseline(r.arch);
  return build_skeleton<T>(r, [&](GraphBuilder<T>& b, std::size_t i, std::size_t out) {
    const std::string name = "block" + std::to_string(i);
    switch (kind) {
      case BaselineKind::standard: b.conv(name, {.out_channels = out}); break;
      case BaselineKind::depthwise_separable:
        b.conv(name + "_dw", {.depthwise = true});
        b.conv(name + "_pw", {.out_channels = out, .kh = 1, .kw = 1});
        break;
      case BaselineKind::spatially_separable:
        b.conv(name + "_3x1", {.out_channels = out, .kh = 3, .kw = 1});
        b.conv(name + "_1x3", {.out_channels = out, .kh = 1, .kw = 3});
        break;
    }
  });
}

template <typename T = float>
ModelGraph<T> build_baseline(BaselineKind kind, std::size_t num_classes = 5, std::size_t input = 240) {
  ModelRecipe r;
  r.arch = std::string(to_string(kind));
  r.classes = num_classes;
  r.input = input;
  if (num_classes != r.labels.size()) r.labels.clear();
  return build_baseline<T>(r);
}

template <typename T = float>
ModelGraph<T> build_from_recipe(const ModelRecipe& r) {
  if (r.arch == "emergencynet") return build_emergencynet<T>(r);
  return build_baseline<T>(r);
}

}  // namespace acff
