#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "acffnet/model_zoo.hpp"
#include "acffnet/synthetic.hpp"
#include "acffnet/training.hpp"
#include "oracles.hpp"

using namespace acff;

namespace {

std::vector<Tensor<float>> trainable_values(const ModelGraph<float>& g) {
  std::vector<Tensor<float>> out;
  for (const auto& p : g.params())
    if (is_trainable(p.role)) out.push_back(p.value);
  return out;
}

ModelGraph<double> linear_graph() {
  GraphBuilder<double> b(Shape{1, 3, 6, 6});
  b.conv("lin", {.out_channels = 4, .kh = 3, .kw = 3, .bias = true, .batchnorm = false, .activation = false});
  b.conv("lin2", {.out_channels = 2, .kh = 1, .kw = 1, .bias = true, .batchnorm = false, .activation = false});
  auto g = std::move(b).build();
  initialize(g, 5);
  return g;
}

}  // namespace

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_NEAR(cosine_lr(0), 0.1, 1e-12);
  EXPECT_NEAR(cosine_lr(150), 0.05, 1e-12);
  EXPECT_NEAR(cosine_lr(300), 0.0, 1e-12);
  EXPECT_NEAR(cosine_lr(5, 10, 2.0), 1.0, 1e-12);
  EXPECT_THROW(cosine_lr(301), ConfigError);
  EXPECT_THROW(cosine_lr(-1), ConfigError);
  EXPECT_THROW(cosine_lr(0, 0), ConfigError);
}

TEST(Schedule, MonotoneNonIncreasing) {
  double prev = cosine_lr(0);
  for (int i = 1; i <= 3000; ++i) {
    const double v = cosine_lr(i / 10.0);
    EXPECT_LE(v, prev);
    prev = v;
  }
}

TEST(Smoothing, FormulaAndRowSums) {
  const auto y = smooth_labels(0, 5, 0.1);
  EXPECT_NEAR(y[0], 0.92, 1e-15);
  for (int i = 1; i < 5; ++i) EXPECT_NEAR(y[i], 0.02, 1e-15);
  EXPECT_EQ(smooth_labels(2, 4, 0.0), (std::vector<double>{0, 0, 1, 0}));
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    const double eps = u(rng);
    const auto row = smooth_labels(static_cast<std::size_t>(t % 7), 7, eps);
    double s = 0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Sampler, CountsForIndivisibleBatch) {
  std::mt19937_64 rng(52);
  for (int t = 0; t < 200; ++t) {
    auto c = balanced_counts(64, 5, rng);
    std::sort(c.begin(), c.end());
    EXPECT_EQ(c, (std::vector<std::size_t>{12, 13, 13, 13, 13}));
  }
  EXPECT_EQ(balanced_counts(60, 5, rng), (std::vector<std::size_t>(5, 12)));
  EXPECT_THROW(balanced_counts(4, 0, rng), ConfigError);
}

TEST(Sampler, LongRunFrequencyIsUniform) {
  std::mt19937_64 rng(53);
  std::vector<double> total(5, 0);
  for (int t = 0; t < 10000; ++t) {
    const auto c = balanced_counts(64, 5, rng);
    for (int k = 0; k < 5; ++k) total[k] += static_cast<double>(c[k]);
  }
  for (double v : total) EXPECT_NEAR(v / (64.0 * 10000), 0.2, 0.005);
}

TEST(Sampler, PlanDrawsOnlyTrainSamplesOfTheRightClass) {
  auto set = make_synthetic(10, 16, 3);
  std::mt19937_64 rng(54);
  for (int t = 0; t < 50; ++t) {
    const auto plan = balanced_plan(set.index, 64, rng);
    ASSERT_EQ(plan.ids.size(), 64u);
    std::vector<std::size_t> per(5, 0);
    for (std::size_t i = 0; i < 64; ++i) {
      const auto& s = set.index.samples[plan.ids[i]];
      EXPECT_EQ(s.split, Split::train);
      EXPECT_EQ(s.label, plan.labels[i]);
      ++per[plan.labels[i]];
    }
    EXPECT_LE(*std::max_element(per.begin(), per.end()) - *std::min_element(per.begin(), per.end()), 1u);
  }
}

TEST(Sampler, PlanNeedsTrainSamplesPerClass) {
  auto set = make_synthetic(4, 16, 3);
  for (auto& s : set.index.samples)
    if (s.label == 2) s.split = Split::test;
  std::mt19937_64 rng(55);
  EXPECT_THROW(balanced_plan(set.index, 10, rng), ConfigError);
}

TEST(Batch, TargetsAndUnaugmentedImages) {
  auto set = make_synthetic(6, 16, 4);
  std::mt19937_64 rng(56);
  const auto b = balanced_batch<float>(set.index, set.images, 10, rng, AugmentPolicy::none(), 0.1, 0.0);
  EXPECT_EQ(b.images.shape(), (Shape{10, 3, 16, 16}));
  EXPECT_EQ(b.targets.shape(), (Shape{10, 5, 1, 1}));
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(sample_of(b.images, i), set.images.image(b.ids[i]));
    for (std::size_t c = 0; c < 5; ++c)
      EXPECT_NEAR(b.targets[i * 5 + c], c == b.labels[i] ? 0.92f : 0.02f, 1e-7);
  }
}

TEST(Batch, IndependentOfWorkerCount) {
  auto set = make_synthetic(6, 16, 4);
  Batch<float> a, b;
  {
    ScopedThreads one(1);
    std::mt19937_64 rng(57);
    a = balanced_batch<float>(set.index, set.images, 12, rng);
  }
  {
    ScopedThreads four(4);
    std::mt19937_64 rng(57);
    b = balanced_batch<float>(set.index, set.images, 12, rng);
  }
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.ids, b.ids);
}

TEST(Augment, DisabledPolicyIsIdentity) {
  std::mt19937_64 rng(58);
  const auto img = oracle::random_tensor<float>(Shape{1, 3, 20, 20}, rng, 0, 255);
  unsigned flags = 99;
  EXPECT_EQ(augment(img, rng, AugmentPolicy::none(), &flags), img);
  EXPECT_EQ(flags, 0u);
}

TEST(Augment, MirrorIsAnInvolution) {
  std::mt19937_64 rng(59);
  const auto img = oracle::random_tensor<float>(Shape{1, 3, 9, 14}, rng, 0, 255);
  auto p = AugmentPolicy::none();
  p.mirror = 1;
  const Image once = augment(img, rng, p);
  EXPECT_NE(once, img);
  EXPECT_EQ(once.at(0, 1, 2, 0), img.at(0, 1, 2, 13));
  EXPECT_EQ(augment(once, rng, p), img);
}

TEST(Augment, UntouchedFractionMatchesBernoulliProduct) {
  std::mt19937_64 rng(60);
  const auto img = oracle::random_tensor<float>(Shape{1, 3, 8, 8}, rng, 0, 255);
  const AugmentPolicy p;
  const int n = 20000;
  int untouched = 0;
  for (int i = 0; i < n; ++i) {
    unsigned flags = 0;
    const Image out = augment(img, rng, p, &flags);
    if (flags == 0) {
      ++untouched;
      EXPECT_EQ(out, img);
    }
  }
  const double q = std::pow(0.7, 9), sigma = std::sqrt(q * (1 - q) / n);
  EXPECT_NEAR(static_cast<double>(untouched) / n, q, 3 * sigma);
}

TEST(Augment, OutputStaysInPixelRangeAndShape) {
  std::mt19937_64 rng(61);
  auto p = AugmentPolicy{};
  for (double* v : {&p.rotate, &p.translate, &p.mirror, &p.zoom, &p.brightness, &p.channel_shift, &p.blur,
                    &p.sharpen, &p.shadow})
    *v = 1;
  const auto img = oracle::random_tensor<float>(Shape{1, 3, 24, 24}, rng, 0, 255);
  for (int i = 0; i < 20; ++i) {
    unsigned flags = 0;
    const Image out = augment(img, rng, p, &flags);
    EXPECT_EQ(flags, 0x1FFu);
    EXPECT_EQ(out.shape(), img.shape());
    for (float v : out.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 255.0f);
    }
  }
}

TEST(Augment, PolicyValidation) {
  AugmentPolicy p;
  p.blur = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p = AugmentPolicy{};
  p.min_zoom = 1.2;
  EXPECT_THROW(p.validate(), ConfigError);
  std::mt19937_64 rng(62);
  EXPECT_THROW(augment(Image(Shape{1, 1, 4, 4}), rng), ShapeError);
}

TEST(Pairing, Examples) {
  std::mt19937_64 rng(63);
  const auto x = oracle::random_tensor<float>(Shape{1, 3, 6, 6}, rng, 0, 255);
  EXPECT_EQ(sample_pairing(x, x), x);
  const Image black(Shape{1, 3, 2, 2}, 0.0f), white(Shape{1, 3, 2, 2}, 255.0f);
  const Image grey = sample_pairing(black, white);
  for (float v : grey.data()) EXPECT_EQ(v, 127.5f);
  const auto y = oracle::random_tensor<float>(Shape{1, 3, 6, 6}, rng, 0, 255);
  auto mean = [](const Image& t) {
    double s = 0;
    for (float v : t.data()) s += v;
    return s / static_cast<double>(t.size());
  };
  EXPECT_NEAR(mean(sample_pairing(x, y)), 0.5 * (mean(x) + mean(y)), 1e-4);
  EXPECT_THROW(sample_pairing(x, black), ShapeError);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto g = build_emergencynet<float>(FusionMode::add, 5, 32);
  initialize(g, 1);
  const auto before = trainable_values(g);
  AdamState<float> state(g.params());
  adam_step(g.params(), Gradients<float>(g.params()), state, 0.1);
  EXPECT_EQ(trainable_values(g), before);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto g = build_emergencynet<float>(FusionMode::add, 5, 32);
  initialize(g, 1);
  auto before = g.params();
  Gradients<float> grads(g.params());
  for (auto& t : grads.values) t.fill(0.37f);
  AdamState<float> state(g.params());
  adam_step(g.params(), grads, state, 0.01);
  for (std::size_t i = 0; i < g.params().size(); ++i) {
    const auto& p = g.params()[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double d = static_cast<double>(before[i].value[j]) - p.value[j];
      if (is_trainable(p.role))
        ASSERT_NEAR(d, 0.01 * 0.37 / (0.37 + 1e-8), 1e-6) << p.name;
      else
        ASSERT_EQ(d, 0.0) << p.name;
    }
  }
}

TEST(Adam, L2DecaysOnlyConvWeights) {
  auto g = build_emergencynet<float>(FusionMode::add, 5, 32);
  initialize(g, 1);
  for (auto& p : g.params())
    if (p.role == ParamRole::bn_gamma) p.value.fill(1.5f);
  auto before = g.params();
  AdamState<float> state(g.params());
  adam_step(g.params(), Gradients<float>(g.params()), state, 0.01, AdamOptions{.l2 = 1e-3});
  for (std::size_t i = 0; i < g.params().size(); ++i) {
    const auto& p = g.params()[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double w = before[i].value[j], d = w - static_cast<double>(p.value[j]);
      const double grad = 2e-3 * w;
      if (p.role == ParamRole::conv_weight) {
        ASSERT_NEAR(d, 0.01 * grad / (std::abs(grad) + 1e-8), 1e-6);
      } else {
        ASSERT_EQ(d, 0.0);
      }
    }
  }
  double sq = 0;
  for (const auto& p : before)
    if (p.role == ParamRole::conv_weight)
      for (float w : p.value.data()) sq += static_cast<double>(w) * w;
  EXPECT_NEAR(l2_penalty(before, 1e-3), 1e-3 * sq, 1e-9 * sq);
}

TEST(Adam, DeterministicTrajectories) {
  auto run = [] {
    auto g = build_emergencynet<float>(FusionMode::add, 5, 32);
    initialize(g, 9);
    auto set = make_synthetic(4, 32, 2);
    AdamState<float> state(g.params());
    std::mt19937_64 rng(3);
    for (int i = 0; i < 3; ++i) {
      const auto b = balanced_batch<float>(set.index, set.images, 5, rng);
      (void)train_step(g, b.images, b.targets, state, 0.01, AdamOptions{.l2 = 5e-4}, rng());
    }
    return g.params();
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value, b[i].value) << a[i].name;
}

TEST(Loss, CrossEntropyValueAndLogitGradient) {
  std::mt19937_64 rng(64);
  const auto z = oracle::random_tensor<double>(Shape{3, 4, 1, 1}, rng, -2, 2);
  Tensor<double> y(z.shape());
  for (std::size_t i = 0; i < 3; ++i) {
    const auto row = smooth_labels(i, 4, 0.1);
    for (std::size_t c = 0; c < 4; ++c) y[i * 4 + c] = row[c];
  }
  auto ce_of = [&](const Tensor<double>& logits) {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      double m = -1e300, lse = 0;
      for (std::size_t c = 0; c < 4; ++c) m = std::max(m, logits[i * 4 + c]);
      for (std::size_t c = 0; c < 4; ++c) lse += std::exp(logits[i * 4 + c] - m);
      lse = m + std::log(lse);
      for (std::size_t c = 0; c < 4; ++c) s -= y[i * 4 + c] * (logits[i * 4 + c] - lse);
    }
    return s / 3;
  };
  const auto r = cross_entropy(softmax(z), y);
  EXPECT_NEAR(r.loss, ce_of(z), 1e-12);
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto up = z, down = z;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    EXPECT_NEAR(r.grad[i], (ce_of(up) - ce_of(down)) / 2e-6, 1e-8);
  }
}

TEST(Loss, UniformPredictionGivesLogK) {
  const Tensor<double> p(Shape{2, 5, 1, 1}, 0.2);
  Tensor<double> y(p.shape());
  y[1] = 1;
  y[7] = 1;
  EXPECT_NEAR(cross_entropy(p, y).loss, std::log(5.0), 1e-12);
  EXPECT_THROW(cross_entropy(p, Tensor<double>(Shape{2, 4, 1, 1})), ShapeError);
}

TEST(Loss, FiniteForStrictlyPositiveProbabilities) {
  Tensor<double> p(Shape{1, 3, 1, 1}, std::vector<double>{1e-300, 0.5, 0.5});
  Tensor<double> y(p.shape(), std::vector<double>{0.9, 0.05, 0.05});
  EXPECT_TRUE(std::isfinite(cross_entropy(p, y).loss));
}

class FitTest : public ::testing::Test {
 protected:
  SyntheticSet set = make_synthetic(8, 32, 5);
  TrainConfig cfg = [] {
    TrainConfig c;
    c.batch_size = 5;
    c.epochs = 2;
    c.iterations_per_epoch = 3;
    c.lr0 = 0.01;
    return c;
  }();
  ModelGraph<float> fresh() {
    auto g = build_emergencynet<float>(FusionMode::add, 5, 32);
    initialize(g, 17);
    return g;
  }
};

TEST_F(FitTest, CountsImagesAndRecordsHistory) {
  auto g = fresh();
  std::size_t calls = 0;
  const auto r = fit(g, set.index, set.images, cfg, [&](const EpochRecord&) { ++calls; });
  EXPECT_EQ(r.images_seen, 2u * 3u * 5u);
  EXPECT_EQ(calls, 2u);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_NEAR(r.history[0].lr, 0.01, 1e-15);
  EXPECT_NEAR(r.history[1].lr, 0.005, 1e-15);
  EXPECT_GE(r.best_val_f1, 0.0);
  std::ostringstream os;
  write_history(os, r.history);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST_F(FitTest, DefaultEpochConsumes3840Images) {
  TrainConfig d;
  EXPECT_EQ(d.batch_size * d.iterations_per_epoch, 3840u);
}

TEST_F(FitTest, ZeroLearningRateKeepsWeights) {
  auto g = fresh();
  const auto before = trainable_values(g);
  cfg.lr0 = 0;
  cfg.epochs = 1;
  (void)fit(g, set.index, set.images, cfg);
  EXPECT_EQ(trainable_values(g), before);
}

TEST_F(FitTest, BitReproducibleForFixedSeed) {
  auto a = fresh(), b = fresh();
  const auto ra = fit(a, set.index, set.images, cfg);
  const auto rb = fit(b, set.index, set.images, cfg);
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  for (std::size_t e = 0; e < ra.history.size(); ++e) EXPECT_EQ(ra.history[e].loss, rb.history[e].loss);
}

TEST_F(FitTest, DivergenceIsReported) {
  auto g = fresh();
  cfg.lr0 = 1e30;
  cfg.epochs = 3;
  EXPECT_THROW(fit(g, set.index, set.images, cfg), DivergenceError);
}

TEST_F(FitTest, RejectsBadSetups) {
  auto g = fresh();
  auto c = cfg;
  c.batch_size = 3;
  EXPECT_THROW(fit(g, set.index, set.images, c), ConfigError);
  auto index = set.index;
  for (auto& s : index.samples)
    if (s.split == Split::val) s.split = Split::test;
  EXPECT_THROW(fit(g, index, set.images, cfg), ConfigError);
  auto blank = build_emergencynet<float>(FusionMode::add, 5, 32);
  EXPECT_THROW(fit(blank, set.index, set.images, cfg), ConfigError);
  auto three = build_emergencynet<float>(FusionMode::add, 3, 32);
  initialize(three, 1);
  EXPECT_THROW(fit(three, set.index, set.images, cfg), ConfigError);
}

TEST_F(FitTest, EvaluateCoversTheSplit) {
  auto g = fresh();
  const auto e = evaluate(g, set.index, set.images, Split::test, 3);
  EXPECT_EQ(e.truths.size(), set.index.count(Split::test));
  EXPECT_EQ(e.confusion.total(), e.truths.size());
  EXPECT_EQ(e.mean_f1, mean_f1(e.confusion));
}

TEST(GradCheck, LinearLayersBelow1e7) {
  auto g = linear_graph();
  std::mt19937_64 rng(65);
  const auto x = oracle::random_tensor<double>(Shape{2, 3, 6, 6}, rng);
  const auto t = oracle::random_tensor<double>(g.output_shapes().back(), rng);
  Tensor<double> targets(Shape{2, t.shape().c, t.shape().h, t.shape().w});
  for (auto& v : targets.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  GradCheckOptions opt;
  opt.loss = CheckLoss::linear;
  const auto r = grad_check(g, x, targets, opt);
  EXPECT_EQ(r.probes.size(), 100u);
  EXPECT_EQ(r.rejected, 0u);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradCheck, SmallEmergencyNetBelow1e3) {
  for (FusionMode m : {FusionMode::add, FusionMode::max, FusionMode::concat}) {
    auto g = build_emergencynet<double>(m, 5, 32);
    initialize(g, 23);
    std::mt19937_64 rng(66);
    const auto x = oracle::random_tensor<double>(Shape{2, 3, 32, 32}, rng, 0, 255);
    Tensor<double> targets(Shape{2, 5, 1, 1});
    for (std::size_t i = 0; i < 2; ++i) {
      const auto row = smooth_labels(i * 3, 5, 0.1);
      for (std::size_t c = 0; c < 5; ++c) targets[i * 5 + c] = row[c];
    }
    const auto r = grad_check(g, x, targets);
    EXPECT_GE(r.probes.size(), 100u) << to_string(m);
    // A batchnorm shift followed by another train-phase batchnorm has an
    // exactly zero gradient; there the difference quotient is pure roundoff
    // (~eps * loss / step), so both sides must be zero at that scale instead.
    std::size_t live = 0;
    double worst = 0;
    for (const auto& p : r.probes) {
      if (std::abs(p.numeric) < 1e-8) {
        EXPECT_LT(std::abs(p.analytic), 1e-12) << p.param;
        continue;
      }
      ++live;
      worst = std::max(worst, p.rel_error);
    }
    EXPECT_GE(live, 50u) << to_string(m);
    EXPECT_LT(worst, 1e-3) << to_string(m);
  }
}

TEST(GradCheck, KinkedProbesAreRejected) {
  // A unit sitting exactly on the cap cannot be differenced cleanly.
  GraphBuilder<double> b(Shape{1, 1, 1, 1}, ActivationSpec{1.0, 0.01});
  b.conv("c", {.out_channels = 1, .kh = 1, .kw = 1, .bias = true, .batchnorm = false, .activation = true});
  auto g = std::move(b).build();
  g.params()[0].value.fill(1.0);
  g.params()[1].value.fill(0.0);
  g.mark_initialized();
  GradCheckOptions opt;
  opt.loss = CheckLoss::linear;
  opt.probes = 10;
  opt.max_attempts = 20;
  const auto r = grad_check(g, Tensor<double>(Shape{1, 1, 1, 1}, 1.0), Tensor<double>(Shape{1, 1, 1, 1}, 1.0), opt);
  EXPECT_EQ(r.probes.size(), 0u);
  EXPECT_EQ(r.rejected, 20u);
}
