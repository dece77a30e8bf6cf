#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "acffnet/error.hpp"
#include "acffnet/image.hpp"

namespace acff {

// Per-transform probabilities and magnitudes.
struct AugmentPolicy {
  double rotate = 0.3;
  double translate = 0.3;
  double mirror = 0.3;
  double zoom = 0.3;
  double brightness = 0.3;
  double channel_shift = 0.3;
  double blur = 0.3;
  double sharpen = 0.3;
  double shadow = 0.3;

  double max_rotate_deg = 30;
  double max_translate = 0.1;  // fraction of the side
  double min_zoom = 0.9;
  double max_zoom = 1.1;
  double max_brightness = 0.25;
  double max_channel_shift = 20;

  static AugmentPolicy none() {
    AugmentPolicy p;
    p.rotate = p.translate = p.mirror = p.zoom = p.brightness = p.channel_shift = p.blur = p.sharpen = p.shadow = 0;
    return p;
  }

  std::array<double, 9> probabilities() const {
    return {rotate, translate, mirror, zoom, brightness, channel_shift, blur, sharpen, shadow};
  }

  void validate() const {
    for (double p : probabilities())
      if (!(p >= 0 && p <= 1)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
    if (!(min_zoom > 0 && min_zoom <= max_zoom)) throw ConfigError("invalid zoom range");
  }
};

enum AugmentFlag : unsigned {
  aug_rotate = 1u << 0,
  aug_translate = 1u << 1,
  aug_mirror = 1u << 2,
  aug_zoom = 1u << 3,
  aug_brightness = 1u << 4,
  aug_channel_shift = 1u << 5,
  aug_blur = 1u << 6,
  aug_sharpen = 1u << 7,
  aug_shadow = 1u << 8,
};

namespace detail {

// [1 2 1]/4 in both directions, edges clamped.
inline Image blur3(const Image& src) {
  const Shape s = src.shape();
  Image tmp(s), out(s);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const float* a = src.raw() + p * s.plane();
    float* t = tmp.raw() + p * s.plane();
    float* b = out.raw() + p * s.plane();
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const std::size_t l = x ? x - 1 : 0, r = std::min(x + 1, s.w - 1);
        t[y * s.w + x] = 0.25f * a[y * s.w + l] + 0.5f * a[y * s.w + x] + 0.25f * a[y * s.w + r];
      }
    for (std::size_t y = 0; y < s.h; ++y) {
      const std::size_t u = y ? y - 1 : 0, d = std::min(y + 1, s.h - 1);
      for (std::size_t x = 0; x < s.w; ++x)
        b[y * s.w + x] = 0.25f * t[u * s.w + x] + 0.5f * t[y * s.w + x] + 0.25f * t[d * s.w + x];
    }
  }
  return out;
}

// Inverse-mapped bilinear warp about the image centre, edges clamped.
// Output pixel p samples centre + R(-theta)(p - centre - shift) / scale.
inline Image affine_warp(const Image& src, double theta, double scale, double tx, double ty) {
  const Shape s = src.shape();
  Image out(s);
  const double cx = (static_cast<double>(s.w) - 1) / 2, cy = (static_cast<double>(s.h) - 1) / 2;
  const double c = std::cos(theta), sn = std::sin(theta);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) {
      const double dx = static_cast<double>(x) - cx - tx, dy = static_cast<double>(y) - cy - ty;
      double sx = (c * dx + sn * dy) / scale + cx;
      double sy = (-sn * dx + c * dy) / scale + cy;
      sx = std::clamp(sx, 0.0, static_cast<double>(s.w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(s.h - 1));
      const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      const std::size_t x1 = std::min(x0 + 1, s.w - 1), y1 = std::min(y0 + 1, s.h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const float* a = src.raw() + p * s.plane();
        const double top = a[y0 * s.w + x0] * (1 - fx) + a[y0 * s.w + x1] * fx;
        const double bot = a[y1 * s.w + x0] * (1 - fx) + a[y1 * s.w + x1] * fx;
        out.raw()[p * s.plane() + y * s.w + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  return out;
}

}  // namespace detail

// Each transform fires independently with its probability. Geometric ones
// are composed into a single warp. The result keeps the input size and is
// clipped to [0, 255]. `applied` receives the AugmentFlag bits that fired.
inline Image augment(const Image& image, std::mt19937_64& rng, const AugmentPolicy& policy = {},
                     unsigned* applied = nullptr) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("augment expects a 3-channel image, got " + s.str());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  unsigned fired = 0;
  const auto probs = policy.probabilities();
  for (std::size_t k = 0; k < probs.size(); ++k)
    if (probs[k] > 0 && unit(rng) < probs[k]) fired |= 1u << k;
  if (applied) *applied = fired;
  if (!fired) return image;

  Image out = image;
  if (fired & aug_mirror) out = mirror_horizontal(out);
  if (fired & (aug_rotate | aug_translate | aug_zoom)) {
    double theta = 0, scale = 1, tx = 0, ty = 0;
    if (fired & aug_rotate) {
      const double m = policy.max_rotate_deg * std::numbers::pi / 180;
      theta = uniform(-m, m);
    }
    if (fired & aug_translate) {
      tx = uniform(-policy.max_translate, policy.max_translate) * static_cast<double>(s.w);
      ty = uniform(-policy.max_translate, policy.max_translate) * static_cast<double>(s.h);
    }
    if (fired & aug_zoom) scale = uniform(policy.min_zoom, policy.max_zoom);
    out = detail::affine_warp(out, theta, scale, tx, ty);
  }
  if (fired & aug_brightness) {
    const auto f = static_cast<float>(1 + uniform(-policy.max_brightness, policy.max_brightness));
    for (auto& v : out.data()) v *= f;
  }
  if (fired & aug_channel_shift) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto d = static_cast<float>(uniform(-policy.max_channel_shift, policy.max_channel_shift));
      for (std::size_t n = 0; n < s.n; ++n) {
        float* p = out.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) p[i] += d;
      }
    }
  }
  if (fired & aug_blur) out = detail::blur3(out);
  if (fired & aug_sharpen) {
    const Image soft = detail::blur3(out);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += out[i] - soft[i];
  }
  if (fired & aug_shadow) {
    // Darken the side of a random line through the image.
    const double angle = uniform(0, 2 * std::numbers::pi);
    const double px = uniform(0, static_cast<double>(s.w)), py = uniform(0, static_cast<double>(s.h));
    const auto factor = static_cast<float>(uniform(0.4, 0.8));
    const double nx = std::cos(angle), ny = std::sin(angle);
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        if ((static_cast<double>(x) - px) * nx + (static_cast<double>(y) - py) * ny > 0)
          for (std::size_t p = 0; p < s.n * s.c; ++p) out.raw()[p * s.plane() + y * s.w + x] *= factor;
  }
  clip_inplace(out);
  return out;
}

// Pixel-wise mean of two images; the caller keeps a's label.
inline Image sample_pairing(const Image& a, const Image& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sample pairing shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Image out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5f * (a[i] + b[i]);
  return out;
}

}  // namespace acff
