#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "acffnet/error.hpp"
#include "acffnet/image.hpp"

namespace acff {

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"collapsed_building", "fire_smoke", "flood", "traffic_accident",
                                              "normal"};
  return names;
}

struct Sample {
  std::filesystem::path path;  // empty for in-memory samples
  std::size_t label = 0;
  Split split = Split::train;
};

struct Rejected {
  std::filesystem::path path;
  std::string reason;
};

struct DatasetIndex {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  std::vector<Rejected> rejected;

  std::size_t num_classes() const { return class_names.size(); }

  // Sample ids of one class within one split.
  std::vector<std::size_t> ids(Split split, std::size_t label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split && samples[i].label == label) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> ids(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }

  std::size_t count(Split split) const { return ids(split).size(); }
  std::size_t count(Split split, std::size_t label) const { return ids(split, label).size(); }
};

struct SplitRatios {
  double train = 0.5;
  double val = 0.2;
  double test = 0.3;

  void validate() const {
    for (double r : {train, val, test})
      if (!(r >= 0 && r <= 1)) throw ConfigError("split ratios must lie in [0, 1]");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  }
};

// Per-split counts for n samples: floors of the ratios, leftover samples
// handed out one each to train, then val, then test.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& r) {
  r.validate();
  const double ratios[3] = {r.train, r.val, r.test};
  std::array<std::size_t, 3> c{};
  std::size_t used = 0;
  for (int k = 0; k < 3; ++k) {
    c[k] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[k] + 1e-9));
    used += c[k];
  }
  for (std::size_t k = 0; used < n; k = (k + 1) % 3) {
    if (ratios[k] > 0) {
      ++c[k];
      ++used;
    }
  }
  return c;
}

// Stratified shuffle-then-split of per-class sample id lists.
inline void assign_splits(DatasetIndex& index, const SplitRatios& ratios, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t label = 0; label < index.num_classes(); ++label) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < index.samples.size(); ++i)
      if (index.samples[i].label == label) ids.push_back(i);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto c = split_counts(ids.size(), ratios);
    for (std::size_t j = 0; j < ids.size(); ++j)
      index.samples[ids[j]].split = j < c[0] ? Split::train : j < c[0] + c[1] ? Split::val : Split::test;
  }
}

inline constexpr const char* manifest_name = "splits.tsv";

namespace detail {

// The canonical order when the directories are exactly the default classes,
// alphabetical otherwise.
inline std::vector<std::string> order_classes(std::vector<std::string> dirs) {
  std::sort(dirs.begin(), dirs.end());
  std::vector<std::string> defaults = default_class_names();
  std::vector<std::string> sorted_defaults = defaults;
  std::sort(sorted_defaults.begin(), sorted_defaults.end());
  return dirs == sorted_defaults ? defaults : dirs;
}

inline std::unordered_map<std::string, Split> read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read manifest '" + file.string() + "'");
  std::unordered_map<std::string, Split> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError("manifest line " + std::to_string(lineno) + " lacks a tab separator");
    const std::string rel = std::filesystem::path(line.substr(0, tab)).lexically_normal().generic_string();
    if (!out.emplace(rel, parse_split(line.substr(tab + 1))).second)
      throw FormatError("manifest lists '" + rel + "' twice");
  }
  return out;
}

}  // namespace detail

// One subdirectory per class holding PNG/JPEG files. Files without an image
// signature are listed in `rejected`. A splits.tsv manifest in the root, when
// present, fixes the split of every image; otherwise the ratios apply.
inline DatasetIndex index_dataset(const std::filesystem::path& root, const SplitRatios& ratios = {},
                                  std::uint64_t seed = 42) {
  namespace fs = std::filesystem;
  ratios.validate();
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path().filename().string());
  if (dirs.empty()) throw ConfigError("dataset root '" + root.string() + "' has no class directories");

  DatasetIndex index;
  index.class_names = detail::order_classes(std::move(dirs));
  for (std::size_t label = 0; label < index.class_names.size(); ++label) {
    const fs::path dir = root / index.class_names[label];
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto& f : files) {
      if (!looks_like_image(f)) {
        index.rejected.push_back({f, "not a PNG or JPEG file"});
        continue;
      }
      index.samples.push_back({f, label, Split::train});
      ++kept;
    }
    if (kept == 0) throw ConfigError("class directory '" + dir.string() + "' has no images");
  }

  const fs::path manifest = root / manifest_name;
  if (fs::exists(manifest)) {
    const auto splits = detail::read_manifest(manifest);
    std::set<std::string> seen;
    for (auto& s : index.samples) {
      const std::string rel = s.path.lexically_relative(root).generic_string();
      auto it = splits.find(rel);
      if (it == splits.end()) throw ConfigError("manifest does not list '" + rel + "'");
      s.split = it->second;
      seen.insert(rel);
    }
    for (const auto& [rel, split] : splits)
      if (!seen.count(rel)) throw ConfigError("manifest entry '" + rel + "' is not a readable image");
  } else {
    assign_splits(index, ratios, seed);
  }
  return index;
}

inline void write_manifest(const DatasetIndex& index, const std::filesystem::path& root) {
  std::ostringstream os;
  for (const auto& s : index.samples)
    os << s.path.lexically_relative(root).generic_string() << '\t' << to_string(s.split) << '\n';
  const std::string text = os.str();
  detail::write_atomically(root / manifest_name, text.data(), text.size());
}

inline std::string summary(const DatasetIndex& index) {
  std::ostringstream os;
  os << "class                  train    val   test\n";
  for (std::size_t k = 0; k < index.num_classes(); ++k) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-20s %7zu %6zu %6zu\n", index.class_names[k].c_str(),
                  index.count(Split::train, k), index.count(Split::val, k), index.count(Split::test, k));
    os << buf;
  }
  os << "total " << index.samples.size() << ", rejected " << index.rejected.size() << '\n';
  return os.str();
}

}  // namespace acff
