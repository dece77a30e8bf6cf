#include <gtest/gtest.h>

#include <random>

#include "acffnet/acff.hpp"
#include "oracles.hpp"

using namespace acff;
using Td = Tensor<double>;

namespace {

// conv -> batchnorm -> optional activation, all spelled out by hand.
Td unit_by_hand(const Td& x, const ConvUnitParams<double>& p, std::size_t groups, std::size_t dilation,
                bool activation, Phase phase) {
  const std::size_t k = p.weights.shape().h;
  const std::size_t pad = dilation * (k - 1) / 2;
  Td y = oracle::naive_conv(x, p.weights, {}, groups, 1, dilation, pad, pad);
  const Shape s = y.shape();
  for (std::size_t c = 0; c < s.c; ++c) {
    double mu = p.bn.mean[c], var = p.bn.var[c];
    if (phase == Phase::train) {
      mu = var = 0;
      const double n = static_cast<double>(s.n * s.plane());
      for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t i = 0; i < s.plane(); ++i) mu += y.plane(b, c)[i] / n;
      for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t i = 0; i < s.plane(); ++i) var += std::pow(y.plane(b, c)[i] - mu, 2) / n;
    }
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t i = 0; i < s.plane(); ++i) {
        double& v = y.plane(b, c)[i];
        v = p.bn.gamma[c] * (v - mu) / std::sqrt(var + 1e-3) + p.bn.beta[c];
        if (activation) {
          if (v < 0) v = phase == Phase::train ? 0.01 * v : 0.0;
          if (v > 255) v = 255;
        }
      }
  }
  return y;
}

Td acff_by_hand(const Td& x, const AcffConfig& cfg, const AcffParams<double>& p, Phase phase) {
  const Td reduced = unit_by_hand(x, p.reduce, 1, 1, true, phase);
  std::vector<Td> parts;
  for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i)
    parts.push_back(unit_by_hand(reduced, p.branches[i], reduced.shape().c, cfg.dilation_rates[i], false, phase));
  if (cfg.include_skip) parts.push_back(reduced);
  const Shape rs = reduced.shape();
  Td fused(Shape{rs.n, cfg.fused_channels(), rs.h, rs.w});
  for (std::size_t b = 0; b < rs.n; ++b)
    for (std::size_t c = 0; c < rs.c; ++c)
      for (std::size_t i = 0; i < rs.plane(); ++i) {
        if (cfg.fusion == FusionMode::concat) {
          for (std::size_t k = 0; k < parts.size(); ++k) fused.plane(b, k * rs.c + c)[i] = parts[k].plane(b, c)[i];
          continue;
        }
        double acc = cfg.fusion == FusionMode::max ? -1e300 : 0.0;
        for (const auto& t : parts) {
          const double v = t.plane(b, c)[i];
          acc = cfg.fusion == FusionMode::max ? std::max(acc, v) : acc + v;
        }
        if (cfg.fusion == FusionMode::average) acc /= static_cast<double>(parts.size());
        fused.plane(b, c)[i] = acc;
      }
  return unit_by_hand(fused, p.project, 1, 1, true, phase);
}

AcffParams<double> random_params(const AcffConfig& cfg, std::mt19937_64& rng) {
  auto p = AcffParams<double>::random(cfg, rng);
  std::uniform_real_distribution<double> u(0.5, 1.5), s(-0.3, 0.3);
  auto perturb = [&](ConvUnitParams<double>& q) {
    for (std::size_t c = 0; c < q.bn.channels(); ++c) {
      q.bn.gamma[c] = u(rng);
      q.bn.beta[c] = s(rng);
      q.bn.mean[c] = s(rng);
      q.bn.var[c] = u(rng);
    }
  };
  perturb(p.reduce);
  for (auto& b : p.branches) perturb(b);
  perturb(p.project);
  return p;
}

double dot(const Td& a, const Td& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

class AcffFusion : public ::testing::TestWithParam<std::tuple<FusionMode, bool>> {};

TEST_P(AcffFusion, MatchesHandComposition) {
  const auto [mode, skip] = GetParam();
  std::mt19937_64 rng(21);
  AcffConfig cfg{8, 12, {1, 2, 3}, 2, mode, skip};
  const auto p = random_params(cfg, rng);
  const auto x = oracle::random_tensor<double>(Shape{2, 8, 9, 7}, rng, -2, 2);
  for (Phase phase : {Phase::train, Phase::infer}) {
    const Td got = acff_forward(x, cfg, p.refs(), phase);
    const Td want = acff_by_hand(x, cfg, p, phase);
    ASSERT_EQ(got.shape(), (Shape{2, 12, 9, 7}));
    EXPECT_LT(oracle::max_abs_diff(got, want), 1e-10);
  }
}

TEST_P(AcffFusion, BackwardMatchesFiniteDifferences) {
  const auto [mode, skip] = GetParam();
  std::mt19937_64 rng(22);
  AcffConfig cfg{4, 6, {1, 2}, 2, mode, skip};
  auto p = random_params(cfg, rng);
  auto x = oracle::random_tensor<double>(Shape{2, 4, 6, 5}, rng, -2, 2);
  AcffCache<double> cache;
  const Td y = acff_forward(x, cfg, p.refs(), Phase::train, ActivationSpec{}, &cache);
  const Td r = oracle::random_tensor<double>(y.shape(), rng);
  const auto g = acff_backward(x, cfg, p.refs(), cache, Phase::train, ActivationSpec{}, r);
  auto loss = [&](const Td& in, const AcffParams<double>& q) { return dot(acff_forward(in, cfg, q.refs(), Phase::train), r); };
  const double h = 1e-6;
  auto check = [&](double analytic, double& slot, const char* what) {
    const double keep = slot;
    slot = keep + h;
    const double up = loss(x, p);
    slot = keep - h;
    const double down = loss(x, p);
    slot = keep;
    const double num = (up - down) / (2 * h);
    EXPECT_LE(std::abs(analytic - num), 1e-5 * std::max(1.0, std::abs(num))) << what;
  };
  for (std::size_t i = 0; i < x.size(); i += 7) check(g.input[i], x[i], "input");
  for (std::size_t i = 0; i < p.reduce.weights.size(); i += 3) check(g.reduce.weights[i], p.reduce.weights[i], "reduce");
  for (std::size_t b = 0; b < p.branches.size(); ++b)
    for (std::size_t i = 0; i < p.branches[b].weights.size(); i += 2)
      check(g.branches[b].weights[i], p.branches[b].weights[i], "branch");
  for (std::size_t i = 0; i < p.project.weights.size(); i += 3)
    check(g.project.weights[i], p.project.weights[i], "project");
  for (std::size_t c = 0; c < p.project.bn.channels(); ++c) {
    check(g.project.gamma[c], p.project.bn.gamma[c], "gamma");
    check(g.project.beta[c], p.project.bn.beta[c], "beta");
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, AcffFusion,
                         ::testing::Combine(::testing::Values(FusionMode::add, FusionMode::max, FusionMode::average,
                                                              FusionMode::concat),
                                            ::testing::Bool()),
                         [](const auto& info) {
                           return std::string(to_string(std::get<0>(info.param))) +
                                  (std::get<1>(info.param) ? "_skip" : "_noskip");
                         });

TEST(AcffCounts, ParamCountFormula) {
  for (FusionMode m : {FusionMode::add, FusionMode::max, FusionMode::average, FusionMode::concat}) {
    AcffConfig cfg{16, 64, {1, 2, 3}, 2, m, true};
    const std::size_t r = 8, fused = m == FusionMode::concat ? 4 * r : r;
    const std::size_t want = (16 * r + 4 * r) + 3 * (9 * r + 4 * r) + (fused * 64 + 4 * 64);
    EXPECT_EQ(acff_param_count(cfg), want);
    EXPECT_EQ(acff_macs(cfg, 10, 10), 100 * (16 * r + 3 * 9 * r + fused * 64));
  }
}

TEST(AcffCounts, ElementwiseModesShareCostConcatGrows) {
  AcffConfig cfg{64, 96};
  std::size_t add_params = 0;
  for (FusionMode m : {FusionMode::add, FusionMode::max, FusionMode::average}) {
    cfg.fusion = m;
    if (!add_params) add_params = acff_param_count(cfg);
    EXPECT_EQ(acff_param_count(cfg), add_params);
  }
  cfg.fusion = FusionMode::concat;
  EXPECT_GT(acff_param_count(cfg), add_params);
}

TEST(AcffCounts, DilationDoesNotChangeParameters) {
  AcffConfig a{32, 32, {1, 2, 3}}, b{32, 32, {1, 4, 7}};
  EXPECT_EQ(acff_param_count(a), acff_param_count(b));
}

TEST(AcffConfig, Validation) {
  EXPECT_THROW((AcffConfig{15, 32}.validate()), ConfigError);
  EXPECT_THROW((AcffConfig{16, 32, {}}.validate()), ConfigError);
  EXPECT_THROW((AcffConfig{16, 32, {1, 1}}.validate()), ConfigError);
  EXPECT_THROW((AcffConfig{16, 32, {0, 2}}.validate()), ConfigError);
  EXPECT_THROW((AcffConfig{16, 32, {1}, 2, FusionMode::add, false}.validate()), ConfigError);
  EXPECT_NO_THROW((AcffConfig{16, 32, {1}, 2, FusionMode::concat, false}.validate()));
  EXPECT_THROW(parse_fusion("sum"), ConfigError);
  for (FusionMode m : {FusionMode::add, FusionMode::max, FusionMode::average, FusionMode::concat})
    EXPECT_EQ(parse_fusion(to_string(m)), m);
}

TEST(AcffShapes, ConcatProjectionSizedForAllParts) {
  std::mt19937_64 rng(23);
  AcffConfig add{8, 8, {1, 2, 3}, 2, FusionMode::add, true};
  AcffConfig cat = add;
  cat.fusion = FusionMode::concat;
  const auto p = AcffParams<double>::random(add, rng);
  EXPECT_EQ(AcffParams<double>::random(cat, rng).project.weights.shape(), (Shape{8, 16, 1, 1}));
  Td x(Shape{1, 8, 5, 5});
  // An add-sized projection cannot serve the concat block.
  EXPECT_THROW(acff_forward(x, cat, p.refs(), Phase::infer), ConfigError);
  EXPECT_THROW(acff_forward(Td(Shape{1, 6, 5, 5}), add, p.refs(), Phase::infer), ShapeError);
}

TEST(AcffShapes, PreservesSpatialSize) {
  std::mt19937_64 rng(24);
  AcffConfig cfg{4, 10, {1, 2, 3}};
  const auto p = AcffParams<float>::random(cfg, rng);
  for (std::size_t s : {3, 8, 13})
    EXPECT_EQ(acff_forward(Tensor<float>(Shape{1, 4, s, s + 1}), cfg, p.refs(), Phase::infer).shape(),
              (Shape{1, 10, s, s + 1}));
}
