#pragma once

// Toy five-class image set: each class is a distinct colour and texture
// (checkerboard, flame gradient, waves, diagonal stripes, speckled field)
// with per-image jitter and pixel noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "acffnet/dataset.hpp"
#include "acffnet/image.hpp"
#include "acffnet/training.hpp"

namespace acff {

inline constexpr std::size_t synthetic_classes = 5;

inline Image synthetic_image(std::size_t label, std::size_t size, std::mt19937_64& rng) {
  if (label >= synthetic_classes) throw ConfigError("synthetic label out of range");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 8.0);
  static const double base[synthetic_classes][3] = {
      {120, 110, 100}, {220, 90, 30}, {40, 90, 190}, {70, 70, 75}, {70, 160, 60}};
  double col[3];
  for (int c = 0; c < 3; ++c) col[c] = base[label][c] + (u(rng) - 0.5) * 40;
  const double phase = u(rng) * 2 * std::numbers::pi;
  const double period = static_cast<double>(size) / (4 + 4 * u(rng));
  const double s = static_cast<double>(size);
  Image img(Shape{1, 3, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double tex = 0;
      switch (label) {
        case 0: {  // checkerboard
          const auto cx = static_cast<long>((fx + phase * period) / period);
          const auto cy = static_cast<long>((fy + phase * period) / period);
          tex = ((cx + cy) % 2 == 0) ? 35 : -35;
          break;
        }
        case 1: tex = 60 * (fy / s - 0.5) + 25 * std::sin(2 * std::numbers::pi * fx / period + phase); break;
        case 2: tex = 30 * std::sin(2 * std::numbers::pi * fy / period + phase + 0.3 * std::sin(fx / 7)); break;
        case 3: tex = std::fmod(fx + fy + phase * period, period) < period / 2 ? 45 : -25; break;
        default: tex = 0; break;
      }
      for (int c = 0; c < 3; ++c) {
        double v = col[c] + tex + noise(rng);
        if (label == 4 && u(rng) < 0.02) v += 60;
        img.at(0, static_cast<std::size_t>(c), y, x) = static_cast<float>(std::clamp(v, 0.0, 255.0));
      }
    }
  return img;
}

struct SyntheticSet {
  DatasetIndex index;
  MemoryImages images;
};

// In-memory set, split per class with the given ratios.
inline SyntheticSet make_synthetic(std::size_t per_class, std::size_t size, std::uint64_t seed = 42,
                                   const SplitRatios& ratios = {}) {
  std::mt19937_64 rng(seed);
  DatasetIndex index;
  index.class_names = default_class_names();
  std::vector<Image> images;
  for (std::size_t label = 0; label < synthetic_classes; ++label)
    for (std::size_t i = 0; i < per_class; ++i) {
      images.push_back(synthetic_image(label, size, rng));
      index.samples.push_back({{}, label, Split::train});
    }
  assign_splits(index, ratios, seed);
  return {std::move(index), MemoryImages(std::move(images))};
}

// Writes PNGs into one directory per class under root.
inline void write_synthetic(const std::filesystem::path& root, std::size_t per_class, std::size_t size,
                            std::uint64_t seed = 42) {
  std::mt19937_64 rng(seed);
  const auto& names = default_class_names();
  for (std::size_t label = 0; label < synthetic_classes; ++label) {
    const auto dir = root / names[label];
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < per_class; ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "%05zu.png", i);
      write_png(dir / file, synthetic_image(label, size, rng));
    }
  }
}

}  // namespace acff
