#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "acffnet/error.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/image.hpp"

namespace acff {

// Maps are (1, 1, h, w) in [0, 1].
template <typename T>
void normalize_map(Tensor<T>& m) {
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  const T a = *lo, b = *hi;
  if (b > a) {
    for (auto& v : m.data()) v = (v - a) / (b - a);
  } else {
    m.fill(b > T(0) ? T(1) : T(0));
  }
}

namespace detail {

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> m(Shape{1, 1, s.h, s.w});
  for (std::size_t c = 0; c < s.c; ++c) {
    const T* p = x.plane(0, c);
    for (std::size_t i = 0; i < s.plane(); ++i) m[i] += p[i];
  }
  for (auto& v : m.data()) v /= static_cast<T>(s.c);
  return m;
}

template <typename T>
void check_single_image(const ModelGraph<T>& g, const Tensor<T>& image) {
  if (!g.initialized()) throw ConfigError("explanations need an initialized (trained) graph");
  if (image.shape().n != 1) throw ShapeError("explanations take a single image, got " + image.shape().str());
}

}  // namespace detail

// Channel-averaged activations of every conv/ACFF layer up to the feature
// layer. Starting from the deepest, each map is upsampled to the next
// shallower layer's resolution and multiplied into it; the product is
// upsampled to the input size and normalized.
template <typename T>
Tensor<T> activation_saliency(const ModelGraph<T>& g, const Tensor<T>& image) {
  detail::check_single_image(g, image);
  const std::size_t last = g.feature_layer();
  if (last == npos) throw ConfigError("graph has no feature layer to explain");
  Workspace<T> ws;
  ws.keep_outputs = true;
  (void)forward(g, image, Phase::infer, &ws);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i <= last; ++i) {
    const LayerKind k = g.layers()[i].kind();
    if (k == LayerKind::conv || k == LayerKind::acff) stack.push_back(i);
  }
  Tensor<T> map = detail::channel_mean(ws.outputs[stack.back()]);
  for (std::size_t j = stack.size() - 1; j-- > 0;) {
    const Tensor<T> shallower = detail::channel_mean(ws.outputs[stack[j]]);
    map = resize_bilinear(map, shallower.shape().h, shallower.shape().w);
    for (std::size_t i = 0; i < map.size(); ++i) map[i] *= shallower[i];
  }
  map = resize_bilinear(map, image.shape().h, image.shape().w);
  normalize_map(map);
  return map;
}

// Gradient-weighted class activation map on the feature layer, with the
// pre-softmax class score as the target.
template <typename T>
Tensor<T> grad_cam(const ModelGraph<T>& g, const Tensor<T>& image, std::size_t class_index) {
  detail::check_single_image(g, image);
  if (class_index >= g.num_classes())
    throw ConfigError("class index " + std::to_string(class_index) + " out of range for " +
                      std::to_string(g.num_classes()) + " classes");
  const std::size_t feat = g.feature_layer();
  if (feat == npos) throw ConfigError("graph has no feature layer to explain");
  Workspace<T> ws = Workspace<T>::recording();
  (void)forward(g, image, Phase::infer, &ws);
  const std::size_t logits = g.logits_layer();
  Tensor<T> seed(ws.outputs[logits].shape());
  if (seed.shape().sample() != g.num_classes()) throw ShapeError("logits are not one value per class");
  seed[class_index] = T(1);
  const Tensor<T> grad = backward<T>(g, ws, logits, std::move(seed), nullptr, feat);
  const Tensor<T>& a = ws.outputs[feat];
  const Shape s = a.shape();
  Tensor<T> map(Shape{1, 1, s.h, s.w});
  for (std::size_t c = 0; c < s.c; ++c) {
    const T* gp = grad.plane(0, c);
    T weight = 0;
    for (std::size_t i = 0; i < s.plane(); ++i) weight += gp[i];
    weight /= static_cast<T>(s.plane());
    const T* ap = a.plane(0, c);
    for (std::size_t i = 0; i < s.plane(); ++i) map[i] += weight * ap[i];
  }
  for (auto& v : map.data()) v = std::max(v, T(0));
  map = resize_bilinear(map, image.shape().h, image.shape().w);
  for (auto& v : map.data()) v = std::max(v, T(0));
  normalize_map(map);
  return map;
}

}  // namespace acff
