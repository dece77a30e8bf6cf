#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "acffnet/error.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/parallel.hpp"

namespace acff {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;
  std::vector<std::string> names;

  explicit ConfusionMatrix(std::size_t k = 0, std::vector<std::string> labels = {})
      : classes(k), counts(k * k, 0), names(std::move(labels)) {}

  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  std::size_t row_sum(std::size_t i) const {
    std::size_t s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += at(i, j);
    return s;
  }
  std::size_t col_sum(std::size_t j) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < classes; ++i) s += at(i, j);
    return s;
  }

  void add(std::size_t truth, std::size_t pred) {
    if (truth >= classes || pred >= classes) throw ConfigError("label out of range for confusion matrix");
    ++at(truth, pred);
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> truths, std::span<const std::size_t> preds,
                                        std::size_t classes, std::vector<std::string> names = {}) {
  if (truths.size() != preds.size()) throw ConfigError("truth and prediction sequences differ in length");
  ConfusionMatrix cm(classes, std::move(names));
  for (std::size_t i = 0; i < truths.size(); ++i) cm.add(truths[i], preds[i]);
  return cm;
}

struct ClassScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

namespace detail {
inline double safe_ratio(double num, double den) { return den == 0 ? 0.0 : num / den; }
}  // namespace detail

inline std::vector<ClassScore> class_scores(const ConfusionMatrix& cm) {
  std::vector<ClassScore> out(cm.classes);
  for (std::size_t i = 0; i < cm.classes; ++i) {
    const double tp = static_cast<double>(cm.at(i, i));
    const double fp = static_cast<double>(cm.col_sum(i)) - tp;
    const double fn = static_cast<double>(cm.row_sum(i)) - tp;
    auto& s = out[i];
    s.precision = detail::safe_ratio(tp, tp + fp);
    s.recall = detail::safe_ratio(tp, tp + fn);
    s.f1 = 2 * detail::safe_ratio(s.precision * s.recall, s.precision + s.recall);
    s.support = cm.row_sum(i);
  }
  return out;
}

enum class F1Weighting { macro, support };

// (2/K) * sum_i prec_i*sens_i/(prec_i+sens_i); 0/0 terms contribute 0.
// F1Weighting::support weights each class's F1 by its share of samples instead.
inline double mean_f1(const ConfusionMatrix& cm, F1Weighting weighting = F1Weighting::macro) {
  if (cm.classes < 2) throw ConfigError("mean F1 needs at least two classes");
  const auto scores = class_scores(cm);
  if (weighting == F1Weighting::support) {
    const double total = static_cast<double>(cm.total());
    if (total == 0) return 0.0;
    double sum = 0;
    for (const auto& s : scores) sum += static_cast<double>(s.support) / total * s.f1;
    return sum;
  }
  double sum = 0;
  for (const auto& s : scores) sum += detail::safe_ratio(s.precision * s.recall, s.precision + s.recall);
  return 2.0 / static_cast<double>(cm.classes) * sum;
}

inline std::string to_text(const ConfusionMatrix& cm) {
  std::ostringstream os;
  const auto name = [&](std::size_t i) { return i < cm.names.size() ? cm.names[i] : "class_" + std::to_string(i); };
  std::size_t width = 8;
  for (std::size_t i = 0; i < cm.classes; ++i) width = std::max(width, name(i).size() + 2);
  os << std::left << std::setw(static_cast<int>(width)) << "true\\pred";
  for (std::size_t j = 0; j < cm.classes; ++j) os << std::right << std::setw(8) << j;
  os << '\n';
  for (std::size_t i = 0; i < cm.classes; ++i) {
    os << std::left << std::setw(static_cast<int>(width)) << name(i);
    for (std::size_t j = 0; j < cm.classes; ++j) os << std::right << std::setw(8) << cm.at(i, j);
    os << '\n';
  }
  const auto scores = class_scores(cm);
  os << '\n' << std::left << std::setw(static_cast<int>(width)) << "class" << std::right << std::setw(11)
     << "precision" << std::setw(9) << "recall" << std::setw(9) << "f1" << std::setw(9) << "support" << '\n';
  os << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < cm.classes; ++i)
    os << std::left << std::setw(static_cast<int>(width)) << name(i) << std::right << std::setw(11)
       << scores[i].precision << std::setw(9) << scores[i].recall << std::setw(9) << scores[i].f1 << std::setw(9)
       << scores[i].support << '\n';
  if (cm.classes >= 2) os << "mean F1 " << mean_f1(cm) << '\n';
  return os.str();
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < cm.classes; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < cm.classes; ++j) row.push_back(cm.at(i, j));
    rows.push_back(row);
  }
  nlohmann::json classes = nlohmann::json::array();
  const auto scores = class_scores(cm);
  for (std::size_t i = 0; i < cm.classes; ++i)
    classes.push_back({{"name", i < cm.names.size() ? cm.names[i] : "class_" + std::to_string(i)},
                       {"precision", scores[i].precision},
                       {"recall", scores[i].recall},
                       {"f1", scores[i].f1},
                       {"support", scores[i].support}});
  nlohmann::json j{{"confusion", rows}, {"classes", classes}, {"samples", cm.total()}};
  if (cm.classes >= 2) {
    j["mean_f1"] = mean_f1(cm);
    j["weighted_f1"] = mean_f1(cm, F1Weighting::support);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Frame rate
// ---------------------------------------------------------------------------

struct TimingSample {
  std::vector<double> seconds;  // per-image wall-clock time
};

// Reciprocal of the mean per-image time.
inline double fps(const TimingSample& t) {
  if (t.seconds.empty()) throw ConfigError("fps needs at least one timing sample");
  double sum = 0;
  for (double s : t.seconds) {
    if (!(s > 0)) throw ConfigError("timing samples must be positive");
    sum += s;
  }
  return 1.0 / (sum / static_cast<double>(t.seconds.size()));
}

struct LatencyStats {
  double fps = 0;
  double mean = 0;
  double median = 0;
  double p95 = 0;
  std::size_t samples = 0;
};

inline LatencyStats latency_stats(const TimingSample& t) {
  LatencyStats s;
  s.fps = fps(t);
  s.samples = t.seconds.size();
  s.mean = std::accumulate(t.seconds.begin(), t.seconds.end(), 0.0) / static_cast<double>(s.samples);
  std::vector<double> sorted = t.seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95 = sorted[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

struct BenchOptions {
  std::size_t iterations = 50;
  std::size_t warmup = 10;
  std::uint64_t seed = 42;
};

struct BenchResult {
  TimingSample timings;  // warmup excluded
  LatencyStats stats;
};

// Batch-1 inference on a fixed random input, single worker, monotonic clock.
template <typename T>
BenchResult bench(const ModelGraph<T>& g, const BenchOptions& opt = {}) {
  if (opt.iterations < 1) throw ConfigError("bench needs at least one iteration");
  ScopedThreads single(1);
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> pixel(0.0, 255.0);
  Shape s = g.input_shape();
  s.n = 1;
  Tensor<T> x(s);
  for (auto& v : x.data()) v = static_cast<T>(pixel(rng));
  for (std::size_t i = 0; i < opt.warmup; ++i) (void)forward(g, x, Phase::infer);
  BenchResult r;
  r.timings.seconds.reserve(opt.iterations);
  for (std::size_t i = 0; i < opt.iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<T> out = forward(g, x, Phase::infer);
    const auto t1 = std::chrono::steady_clock::now();
    volatile T sink = out[0];
    (void)sink;
    r.timings.seconds.push_back(std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9));
  }
  r.stats = latency_stats(r.timings);
  return r;
}

inline nlohmann::json to_json(const LatencyStats& s) {
  return {{"fps", s.fps}, {"mean_ms", s.mean * 1e3}, {"median_ms", s.median * 1e3}, {"p95_ms", s.p95 * 1e3},
          {"samples", s.samples}};
}

}  // namespace acff
