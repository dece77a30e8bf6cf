#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <vector>

#include "acffnet/error.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/image.hpp"

namespace acff {

struct FrameOutput {
  std::vector<double> probs;
  std::vector<double> features;  // channel means of the feature layer
};

template <typename T>
FrameOutput frame_output(const ModelGraph<T>& g, const Tensor<T>& image) {
  Workspace<T> ws;
  ws.keep_outputs = true;
  const Tensor<T> out = forward(g, image, Phase::infer, &ws);
  FrameOutput f;
  f.probs.assign(out.raw(), out.raw() + out.size());
  const std::size_t feat = g.feature_layer();
  if (feat == npos) throw ConfigError("graph has no feature layer");
  const Tensor<T>& a = ws.outputs[feat];
  for (std::size_t c = 0; c < a.shape().c; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < a.shape().plane(); ++i) s += static_cast<double>(a.plane(0, c)[i]);
    f.features.push_back(s / static_cast<double>(a.shape().plane()));
  }
  return f;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("feature vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return ab / std::sqrt(aa * bb);
}

// Similarity-weighted vote over the last `window` frames. Negative
// similarities count as zero.
class StreamSmoother {
 public:
  explicit StreamSmoother(std::size_t window = 5) : window_(window) {}

  std::vector<double> push(const FrameOutput& frame) {
    std::vector<double> out = frame.probs;
    for (const auto& past : history_) {
      const double s = std::max(0.0, cosine_similarity(past.features, frame.features));
      if (past.probs.size() != out.size()) throw ShapeError("probability vectors differ in length");
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += s * past.probs[k];
    }
    double total = 0;
    for (double v : out) total += v;
    if (total > 0)
      for (auto& v : out) v /= total;
    if (window_ > 0) {
      history_.push_back(frame);
      while (history_.size() > window_) history_.pop_front();
    }
    return out;
  }

  void reset() { history_.clear(); }
  std::size_t size() const { return history_.size(); }

 private:
  std::size_t window_;
  std::deque<FrameOutput> history_;
};

struct TilePrediction {
  std::size_t y = 0;
  std::size_t x = 0;
  std::vector<double> probs;
};

struct TiledPrediction {
  std::vector<TilePrediction> tiles;
  std::vector<double> aggregate;  // per-class max over tiles, renormalized
  std::size_t label = 0;
};

// Tile origins along one axis; the last tile is anchored to the far edge.
inline std::vector<std::size_t> tile_origins(std::size_t size, std::size_t tile, std::size_t overlap) {
  if (tile == 0 || overlap >= tile) throw ConfigError("tile overlap must be smaller than the tile");
  if (size < tile) throw ShapeError("image side " + std::to_string(size) + " is smaller than tile " + std::to_string(tile));
  std::vector<std::size_t> out;
  const std::size_t stride = tile - overlap;
  for (std::size_t p = 0; p + tile < size; p += stride) out.push_back(p);
  out.push_back(size - tile);
  return out;
}

// Tiles are resized to the model input when tile differs from it.
template <typename T>
TiledPrediction classify_tiled(const ModelGraph<T>& g, const Tensor<T>& image, std::size_t tile = 0,
                               std::size_t overlap = 0, std::size_t batch = 8) {
  if (image.shape().n != 1) throw ShapeError("tiled classification takes a single image");
  if (tile == 0) tile = g.input_shape().h;
  const auto ys = tile_origins(image.shape().h, tile, overlap);
  const auto xs = tile_origins(image.shape().w, tile, overlap);
  TiledPrediction r;
  std::vector<Tensor<T>> crops;
  for (std::size_t y : ys)
    for (std::size_t x : xs) {
      crops.push_back(resize_bilinear(crop(image, y, x, tile, tile), g.input_shape().h, g.input_shape().w));
      r.tiles.push_back({y, x, {}});
    }
  for (std::size_t start = 0; start < crops.size(); start += batch) {
    const std::size_t n = std::min(batch, crops.size() - start);
    const Tensor<T> out =
        forward(g, stack_samples<T>(std::span<const Tensor<T>>(crops.data() + start, n)), Phase::infer);
    const std::size_t k = out.shape().sample();
    for (std::size_t i = 0; i < n; ++i) r.tiles[start + i].probs.assign(out.raw() + i * k, out.raw() + (i + 1) * k);
  }
  r.aggregate.assign(g.num_classes(), 0.0);
  for (const auto& t : r.tiles)
    for (std::size_t k = 0; k < t.probs.size(); ++k) r.aggregate[k] = std::max(r.aggregate[k], t.probs[k]);
  double total = 0;
  for (double v : r.aggregate) total += v;
  if (total > 0)
    for (auto& v : r.aggregate) v /= total;
  r.label = static_cast<std::size_t>(std::max_element(r.aggregate.begin(), r.aggregate.end()) - r.aggregate.begin());
  return r;
}

}  // namespace acff
