#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "acffnet/augment.hpp"
#include "acffnet/dataset.hpp"
#include "acffnet/error.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/image.hpp"
#include "acffnet/metrics.hpp"
#include "acffnet/parallel.hpp"

namespace acff {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 300;
  std::size_t iterations_per_epoch = 60;
  double lr0 = 0.1;
  double l2 = 5e-4;
  double label_smoothing = 0.1;
  double pairing = 0.1;  // sample pairing probability per batch image
  AugmentPolicy augment;
  std::uint64_t seed = 42;
  std::size_t eval_batch = 32;

  void validate(std::size_t num_classes) const {
    if (batch_size < num_classes)
      throw ConfigError("batch size " + std::to_string(batch_size) + " is smaller than the class count " +
                        std::to_string(num_classes));
    if (iterations_per_epoch == 0) throw ConfigError("iterations per epoch must be positive");
    for (double r : {l2, label_smoothing, pairing})
      if (!(r >= 0 && r <= 1)) throw ConfigError("training rates must lie in [0, 1]");
    if (!(lr0 >= 0)) throw ConfigError("learning rate must be non-negative");
    if (eval_batch == 0) throw ConfigError("evaluation batch must be positive");
    augment.validate();
  }
};

// 0.5 (1 + cos(pi t / T)) lr0 for 0 <= t <= T.
inline double cosine_lr(double t, double T = 300, double lr0 = 0.1) {
  if (!(T > 0)) throw ConfigError("cosine schedule length must be positive");
  if (!(t >= 0 && t <= T)) throw ConfigError("epoch " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return 0.5 * (1 + std::cos(std::numbers::pi * t / T)) * lr0;
}

// (1 - eps) one_hot + eps / K
inline std::vector<double> smooth_labels(const std::vector<double>& one_hot, double eps = 0.1) {
  const double k = static_cast<double>(one_hot.size());
  std::vector<double> out(one_hot.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1 - eps) * one_hot[i] + eps / k;
  return out;
}

inline std::vector<double> smooth_labels(std::size_t label, std::size_t classes, double eps = 0.1) {
  std::vector<double> one_hot(classes, 0.0);
  one_hot.at(label) = 1.0;
  return smooth_labels(one_hot, eps);
}

// ---------------------------------------------------------------------------
// Sample sources
// ---------------------------------------------------------------------------

class ImageProvider {
 public:
  virtual ~ImageProvider() = default;
  // Decoded (1, 3, s, s) image of sample id. Must be safe to call concurrently.
  virtual Image image(std::size_t id) const = 0;
};

class MemoryImages final : public ImageProvider {
 public:
  explicit MemoryImages(std::vector<Image> images) : images_(std::move(images)) {}
  Image image(std::size_t id) const override { return images_.at(id); }
  std::size_t size() const { return images_.size(); }

 private:
  std::vector<Image> images_;
};

// Decodes from disk at the target size and keeps an 8-bit copy of each image.
class FileImages final : public ImageProvider {
 public:
  FileImages(const DatasetIndex& index, std::size_t size, bool cache = true)
      : index_(&index), size_(size), cache_(cache), slots_(index.samples.size()), once_(index.samples.size()) {}

  Image image(std::size_t id) const override {
    const auto& sample = index_->samples.at(id);
    if (!cache_) return decode_resize(sample.path, size_);
    std::call_once(once_[id], [&] {
      const Image img = decode_resize(sample.path, size_);
      auto& slot = slots_[id];
      slot.resize(img.size());
      for (std::size_t i = 0; i < img.size(); ++i) slot[i] = static_cast<std::uint8_t>(std::lround(img[i]));
    });
    const auto& slot = slots_[id];
    Image out(Shape{1, 3, size_, size_});
    for (std::size_t i = 0; i < slot.size(); ++i) out[i] = slot[i];
    return out;
  }

 private:
  const DatasetIndex* index_;
  std::size_t size_;
  bool cache_;
  mutable std::vector<std::vector<std::uint8_t>> slots_;
  mutable std::vector<std::once_flag> once_;
};

// ---------------------------------------------------------------------------
// Balanced batches
// ---------------------------------------------------------------------------

// floor(B / K) samples per class, plus one more for B mod K distinct classes
// picked uniformly at random.
inline std::vector<std::size_t> balanced_counts(std::size_t batch_size, std::size_t classes, std::mt19937_64& rng) {
  if (classes == 0) throw ConfigError("balanced batches need at least one class");
  std::vector<std::size_t> counts(classes, batch_size / classes);
  std::vector<std::size_t> order(classes);
  for (std::size_t i = 0; i < classes; ++i) order[i] = i;
  const std::size_t extra = batch_size % classes;
  for (std::size_t i = 0; i < extra; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, classes - 1);
    std::swap(order[i], order[pick(rng)]);
    ++counts[order[i]];
  }
  return counts;
}

struct BatchPlan {
  std::vector<std::size_t> ids;     // sample ids, batch order
  std::vector<std::size_t> labels;  // class of each entry
};

// Draws each class's quota uniformly with replacement from its train list.
inline BatchPlan balanced_plan(const DatasetIndex& index, std::size_t batch_size, std::mt19937_64& rng) {
  const std::size_t k = index.num_classes();
  std::vector<std::vector<std::size_t>> pools(k);
  for (std::size_t c = 0; c < k; ++c) {
    pools[c] = index.ids(Split::train, c);
    if (pools[c].empty()) throw ConfigError("class '" + index.class_names[c] + "' has no training samples");
  }
  const auto counts = balanced_counts(batch_size, k, rng);
  BatchPlan plan;
  for (std::size_t c = 0; c < k; ++c) {
    std::uniform_int_distribution<std::size_t> pick(0, pools[c].size() - 1);
    for (std::size_t j = 0; j < counts[c]; ++j) {
      plan.ids.push_back(pools[c][pick(rng)]);
      plan.labels.push_back(c);
    }
  }
  std::vector<std::size_t> perm(plan.ids.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  BatchPlan out;
  for (std::size_t i : perm) {
    out.ids.push_back(plan.ids[i]);
    out.labels.push_back(plan.labels[i]);
  }
  return out;
}

template <typename T = float>
struct Batch {
  Tensor<T> images;               // (B, 3, s, s)
  Tensor<T> targets;              // (B, K, 1, 1) smoothed labels
  std::vector<std::size_t> labels;
  std::vector<std::size_t> ids;
};

// Augmented, optionally sample-paired images with smoothed targets. Each
// entry gets its own seed from rng, so the result does not depend on the
// worker count.
template <typename T = float>
Batch<T> balanced_batch(const DatasetIndex& index, const ImageProvider& images, std::size_t batch_size,
                        std::mt19937_64& rng, const AugmentPolicy& policy = {}, double label_smoothing = 0.1,
                        double pairing = 0.1) {
  const BatchPlan plan = balanced_plan(index, batch_size, rng);
  const std::size_t k = index.num_classes();
  const std::vector<std::size_t> train = index.ids(Split::train);
  std::vector<std::uint64_t> seeds(plan.ids.size());
  for (auto& s : seeds) s = rng();

  std::vector<Image> done(plan.ids.size());
  parallel_for(plan.ids.size(), [&](std::size_t i) {
    std::mt19937_64 local(seeds[i]);
    Image img = augment(images.image(plan.ids[i]), local, policy);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (pairing > 0 && unit(local) < pairing) {
      std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
      img = sample_pairing(img, augment(images.image(train[pick(local)]), local, policy));
    }
    done[i] = std::move(img);
  });

  Batch<T> b;
  const Shape s = done.front().shape();
  b.images = Tensor<T>(Shape{done.size(), 3, s.h, s.w});
  b.targets = Tensor<T>(Shape{done.size(), k, 1, 1});
  for (std::size_t i = 0; i < done.size(); ++i) {
    if (done[i].shape() != s) throw ShapeError("training images differ in size");
    std::transform(done[i].raw(), done[i].raw() + done[i].size(), b.images.raw() + i * s.sample(),
                   [](float v) { return static_cast<T>(v); });
    const auto y = smooth_labels(plan.labels[i], k, label_smoothing);
    for (std::size_t c = 0; c < k; ++c) b.targets[i * k + c] = static_cast<T>(y[c]);
  }
  b.labels = plan.labels;
  b.ids = plan.ids;
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 0;  // penalty l2 * sum(w^2) on conv weights
};

template <typename T>
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  explicit AdamState(const ParameterStore<T>& store) {
    for (const auto& p : store) {
      m.emplace_back(p.value.size(), 0.0);
      v.emplace_back(p.value.size(), 0.0);
    }
  }
};

// One bias-corrected Adam update of every trainable parameter.
template <typename T>
void adam_step(ParameterStore<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr,
               const AdamOptions& opt = {}) {
  if (grads.values.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("optimizer state does not match the parameter store");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1 - std::pow(opt.beta1, t), c2 = 1 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!is_trainable(p.role)) continue;
    if (grads.values[i].size() != p.value.size()) throw ShapeError("gradient shape mismatch for " + p.name);
    const bool decay = p.role == ParamRole::conv_weight && opt.l2 > 0;
    T* w = p.value.raw();
    const T* g = grads.values[i].raw();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = static_cast<double>(g[j]) + (decay ? 2 * opt.l2 * static_cast<double>(w[j]) : 0.0);
      m[j] = opt.beta1 * m[j] + (1 - opt.beta1) * gj;
      v[j] = opt.beta2 * v[j] + (1 - opt.beta2) * gj * gj;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt.eps));
    }
  }
}

template <typename T>
double l2_penalty(const ParameterStore<T>& params, double l2) {
  double sum = 0;
  for (const auto& p : params)
    if (p.role == ParamRole::conv_weight)
      for (T w : p.value.data()) sum += static_cast<double>(w) * static_cast<double>(w);
  return l2 * sum;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0;       // mean cross-entropy over the batch
  Tensor<T> grad;        // w.r.t. the logits, (B, K, 1, 1)
};

// Mean cross-entropy of softmax probabilities against target rows; the
// gradient is taken w.r.t. the logits, (p - y) / B.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, const Tensor<T>& targets) {
  if (probs.shape() != targets.shape())
    throw ShapeError("loss shapes differ: " + probs.shape().str() + " vs " + targets.shape().str());
  const std::size_t b = probs.shape().n, k = probs.shape().sample();
  LossResult<T> r{0, Tensor<T>(probs.shape())};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double p = static_cast<double>(probs[i * k + c]);
      const double y = static_cast<double>(targets[i * k + c]);
      if (y != 0) r.loss -= y * std::log(std::max(p, std::numeric_limits<double>::min()));
      r.grad[i * k + c] = static_cast<T>((p - y) / static_cast<double>(b));
    }
  r.loss /= static_cast<double>(b);
  return r;
}

// Class probabilities of a forward pass.
template <typename T>
Tensor<T> probabilities_of(const ModelGraph<T>& g, const Tensor<T>& output) {
  return g.layers().back().kind() == LayerKind::softmax ? output : softmax(output);
}

template <typename T>
struct StepResult {
  double loss = 0;  // cross-entropy + L2 penalty
  double data_loss = 0;
};

// Forward (train phase), cross-entropy backward from the logits, Adam update,
// then batchnorm running statistics.
template <typename T>
StepResult<T> train_step(ModelGraph<T>& g, const Tensor<T>& images, const Tensor<T>& targets, AdamState<T>& state,
                         double lr, const AdamOptions& opt, std::uint64_t dropout_seed) {
  Workspace<T> ws = Workspace<T>::recording();
  const Tensor<T> out = forward(g, images, Phase::train, &ws, dropout_seed);
  LossResult<T> ce = cross_entropy(probabilities_of(g, out), targets);
  StepResult<T> r{ce.loss + l2_penalty(g.params(), opt.l2), ce.loss};
  if (!std::isfinite(r.loss)) return r;
  Gradients<T> grads(g.params());
  const std::size_t logits =
      g.layers().back().kind() == LayerKind::softmax ? g.layers().size() - 2 : g.layers().size() - 1;
  backward(g, ws, logits, std::move(ce.grad), &grads);
  adam_step(g.params(), grads, state, lr, opt);
  apply_batch_stats(g, ws);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Evaluation {
  ConfusionMatrix confusion;
  std::vector<std::size_t> truths;
  std::vector<std::size_t> predictions;
  double mean_f1 = 0;
};

template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Infer-phase predictions over one split, no augmentation.
template <typename T>
Evaluation evaluate(const ModelGraph<T>& g, const DatasetIndex& index, const ImageProvider& images, Split split,
                    std::size_t batch = 32) {
  const auto ids = index.ids(split);
  Evaluation e{ConfusionMatrix(index.num_classes(), index.class_names), {}, {}, 0};
  if (g.num_classes() != index.num_classes())
    throw ConfigError("model has " + std::to_string(g.num_classes()) + " classes, dataset has " +
                      std::to_string(index.num_classes()));
  for (std::size_t start = 0; start < ids.size(); start += batch) {
    const std::size_t n = std::min(batch, ids.size() - start);
    std::vector<Image> imgs(n);
    parallel_for(n, [&](std::size_t i) { imgs[i] = images.image(ids[start + i]); });
    std::vector<Tensor<T>> cast;
    cast.reserve(n);
    for (auto& im : imgs) cast.push_back(im.template cast<T>());
    const Tensor<T> probs = probabilities_of(g, forward(g, stack_samples<T>(cast), Phase::infer));
    const std::size_t k = probs.shape().sample();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t truth = index.samples[ids[start + i]].label;
      const std::size_t pred = argmax<T>(std::span<const T>(probs.raw() + i * k, k));
      e.truths.push_back(truth);
      e.predictions.push_back(pred);
      e.confusion.add(truth, pred);
    }
  }
  e.mean_f1 = index.num_classes() >= 2 ? mean_f1(e.confusion) : 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;  // mean over the epoch's iterations
  double val_f1 = 0;
  double seconds = 0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  double best_val_f1 = -1;
  std::size_t best_epoch = 0;
  std::size_t images_seen = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Runs the balanced-batch loop and leaves the best-validation-F1 parameters
// in g. Throws DivergenceError on a non-finite loss.
template <typename T>
FitResult fit(ModelGraph<T>& g, const DatasetIndex& index, const ImageProvider& images, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {}) {
  cfg.validate(index.num_classes());
  if (!g.initialized()) throw ConfigError("fit needs an initialized graph");
  if (g.num_classes() != index.num_classes())
    throw ConfigError("model has " + std::to_string(g.num_classes()) + " classes, dataset has " +
                      std::to_string(index.num_classes()));
  if (index.count(Split::val) == 0) throw ConfigError("fit needs a non-empty validation split");
  std::mt19937_64 rng(cfg.seed);
  AdamState<T> state(g.params());
  const AdamOptions opt{.l2 = cfg.l2};
  FitResult result;
  std::vector<Tensor<T>> best;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(static_cast<double>(epoch), static_cast<double>(cfg.epochs), cfg.lr0);
    double loss_sum = 0;
    for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
      Batch<T> batch =
          balanced_batch<T>(index, images, cfg.batch_size, rng, cfg.augment, cfg.label_smoothing, cfg.pairing);
      const auto step = train_step(g, batch.images, batch.targets, state, lr, opt, rng());
      if (!std::isfinite(step.loss))
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) + ", iteration " +
                              std::to_string(it) + " (lr " + std::to_string(lr) + ")");
      loss_sum += step.loss;
      result.images_seen += batch.labels.size();
    }
    const Evaluation val = evaluate(g, index, images, Split::val, cfg.eval_batch);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(cfg.iterations_per_epoch), val.mean_f1,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.history.push_back(rec);
    if (val.mean_f1 > result.best_val_f1) {
      result.best_val_f1 = val.mean_f1;
      result.best_epoch = epoch;
      best.clear();
      for (const auto& p : g.params()) best.push_back(p.value);
    }
    if (on_epoch) on_epoch(rec);
  }
  if (!best.empty())
    for (std::size_t i = 0; i < best.size(); ++i) g.params()[i].value = std::move(best[i]);
  return result;
}

// Tab-separated epoch, lr, loss, val_f1.
inline void write_history(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch\tlr\tloss\tval_f1\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\n", r.epoch, r.lr, r.loss, r.val_f1);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

enum class CheckLoss { cross_entropy, linear };

struct GradCheckOptions {
  std::size_t probes = 100;
  double step = 1e-5;
  double floor = 1e-7;  // relative error denominator floor
  std::size_t max_attempts = 1000;
  std::uint64_t seed = 42;
  CheckLoss loss = CheckLoss::cross_entropy;
};

struct GradProbe {
  std::string param;
  std::size_t element = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::vector<GradProbe> probes;
  std::size_t rejected = 0;  // probes whose +-step passes crossed a kink
};

namespace detail {

// Piecewise-linear region of every kinked op in a recorded pass: activation
// side of 0 and the cap, max-pool winners, max-fusion winners.
template <typename T>
std::vector<std::uint32_t> kink_signature(const Workspace<T>& ws, const ActivationSpec& act) {
  std::vector<std::uint32_t> sig;
  auto unit = [&](const ConvUnitCache<T>& c) {
    for (T v : c.pre_act.data()) sig.push_back(v < T(0) ? 0u : v > static_cast<T>(act.cap) ? 2u : 1u);
  };
  for (const auto& cache : ws.caches) {
    if (const auto* c = std::get_if<ConvUnitCache<T>>(&cache)) {
      unit(*c);
    } else if (const auto* a = std::get_if<AcffCache<T>>(&cache)) {
      unit(a->reduce);
      for (const auto& b : a->branches) unit(b);
      sig.insert(sig.end(), a->max_source.begin(), a->max_source.end());
      unit(a->project);
    } else if (const auto* m = std::get_if<MaxPoolCache>(&cache)) {
      sig.insert(sig.end(), m->argmax.begin(), m->argmax.end());
    }
  }
  return sig;
}

template <typename T>
double check_loss(const ModelGraph<T>& g, const Tensor<T>& out, const Tensor<T>& targets, CheckLoss kind,
                  LossResult<T>* grad) {
  if (kind == CheckLoss::linear) {
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * static_cast<double>(targets[i]);
    if (grad) *grad = {s, targets};
    return s;
  }
  LossResult<T> r = cross_entropy(probabilities_of(g, out), targets);
  if (grad) *grad = r;
  return r.loss;
}

}  // namespace detail

// Central differences against the analytic gradient on randomly chosen
// trainable parameters (a tensor uniformly, then an element uniformly).
// Cross-entropy differentiates from the logits; the linear loss is
// sum(output * targets) taken at the final layer. Probes whose perturbed
// passes land in a different piecewise-linear region are discarded.
template <typename T>
GradCheckResult grad_check(ModelGraph<T>& g, const Tensor<T>& input, const Tensor<T>& targets,
                           const GradCheckOptions& opt = {}, Phase phase = Phase::train,
                           std::uint64_t dropout_seed = 7) {
  Workspace<T> ws = Workspace<T>::recording();
  const Tensor<T> out = forward(g, input, phase, &ws, dropout_seed);
  LossResult<T> lg;
  detail::check_loss(g, out, targets, opt.loss, &lg);
  Gradients<T> grads(g.params());
  std::size_t from = g.layers().size() - 1;
  if (opt.loss == CheckLoss::cross_entropy && g.layers().back().kind() == LayerKind::softmax) --from;
  backward(g, ws, from, lg.grad, &grads);
  const auto base_sig = detail::kink_signature(ws, g.activation());

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < g.params().size(); ++i)
    if (is_trainable(g.params()[i].role)) trainable.push_back(i);
  if (trainable.empty()) throw ConfigError("graph has no trainable parameters");

  std::mt19937_64 rng(opt.seed);
  GradCheckResult r;
  auto eval_at = [&](std::size_t pid, std::size_t e, double v, std::vector<std::uint32_t>* sig) {
    T& slot = g.params()[pid].value[e];
    const T saved = slot;
    slot = static_cast<T>(v);
    Workspace<T> w = Workspace<T>::recording();
    const Tensor<T> o = forward(g, input, phase, &w, dropout_seed);
    slot = saved;
    *sig = detail::kink_signature(w, g.activation());
    return detail::check_loss<T>(g, o, targets, opt.loss, nullptr);
  };
  for (std::size_t attempt = 0; attempt < opt.max_attempts && r.probes.size() < opt.probes; ++attempt) {
    const std::size_t pid = trainable[std::uniform_int_distribution<std::size_t>(0, trainable.size() - 1)(rng)];
    const auto& p = g.params()[pid];
    const std::size_t e = std::uniform_int_distribution<std::size_t>(0, p.value.size() - 1)(rng);
    const double w0 = static_cast<double>(p.value[e]);
    std::vector<std::uint32_t> sp, sm;
    const double lp = eval_at(pid, e, w0 + opt.step, &sp);
    const double lm = eval_at(pid, e, w0 - opt.step, &sm);
    if (sp != base_sig || sm != base_sig) {
      ++r.rejected;
      continue;
    }
    GradProbe probe{p.name, e, static_cast<double>(grads.values[pid][e]), (lp - lm) / (2 * opt.step), 0};
    probe.rel_error = std::abs(probe.analytic - probe.numeric) /
                      std::max({std::abs(probe.analytic), std::abs(probe.numeric), opt.floor});
    r.max_rel_error = std::max(r.max_rel_error, probe.rel_error);
    r.probes.push_back(probe);
  }
  return r;
}

}  // namespace acff
