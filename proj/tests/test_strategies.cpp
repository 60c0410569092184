#include "fedagg/rng.hpp"
#include "fedagg/strategies.hpp"
#include "helpers.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace fedagg;
using fedagg::testing::context;
using fedagg::testing::uniform_context;

namespace {

// softmax of (5, 10) in the smaller coordinate: 1 / (1 + e^5).
constexpr double kSoftSmall = 0.0066928509242848554;
constexpr double kSoftLarge = 0.99330714907571515;

void expect_alpha(const CoefficientVector& a, std::vector<double> expected, double tol = 1e-12) {
  ASSERT_EQ(a.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(a[i], expected[i], tol) << "index " << i;
}

RoundContext random_context(Stream& rng, std::size_t n) {
  std::vector<double> p(n), gaps(n);
  double sum = 0.0;
  for (auto& v : p) sum += (v = 0.05 + rng.uniform());
  for (auto& v : p) v /= sum;
  for (auto& v : gaps) v = 3.0 * rng.uniform();
  return context(p, gaps, static_cast<int>(rng.below(40)));
}

}  // namespace

TEST(FedAvg, ReturnsP) {
  expect_alpha(fedavg(uniform_context(2, {1, 2})), {0.5, 0.5});
  expect_alpha(fedavg(context({0.75, 0.25}, {1, 2})), {0.75, 0.25});
  const auto a = fedavg(uniform_context(100, std::vector<double>(100, 1.0)));
  for (double v : a.alpha) EXPECT_NEAR(v, 0.01, 1e-15);
}

TEST(FedWorse, PicksLargestGap) {
  expect_alpha(fedworse(uniform_context(2, {1, 2})), {0, 1});
  expect_alpha(fedworse(uniform_context(3, {3, 1, 2})), {1, 0, 0});
}

TEST(FedWorse, TieGoesToLowestId) { expect_alpha(fedworse(uniform_context(2, {2, 2})), {1, 0}); }

TEST(FedWorseK, TwoWorstOfTenUniform) {
  std::vector<double> gaps{0.1, 0.9, 0.2, 0.3, 0.8, 0.4, 0.5, 0.6, 0.7, 0.05};
  const auto a = fedworse_k(uniform_context(10, gaps), 0.2);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(a[i], (i == 1 || i == 4) ? 0.5 : 0.0, 1e-15);
}

TEST(FedWorseK, FullSetIsFedAvgAndSmallKIsFedWorse) {
  const auto ctx = context({0.1, 0.2, 0.3, 0.4}, {4, 1, 3, 2});
  EXPECT_EQ(fedworse_k(ctx, 1.0).alpha, fedavg(ctx).alpha);
  EXPECT_EQ(fedbetter_k(ctx, 1.0).alpha, fedavg(ctx).alpha);
  const auto u = uniform_context(4, {4, 1, 3, 2});
  EXPECT_EQ(fedworse_k(u, 1e-6).alpha, fedworse(u).alpha);
  EXPECT_EQ(fedbetter_k(u, 1e-6).alpha, fedbetter(u).alpha);
}

TEST(FedSoftWorse, TemperaturePointTwoOracle) {
  expect_alpha(fedsoftworse(uniform_context(2, {1, 2}), 0.2), {kSoftSmall, kSoftLarge}, 1e-9);
}

TEST(FedSoftWorse, EqualGapsReturnP) {
  expect_alpha(fedsoftworse(context({0.3, 0.7}, {1.5, 1.5}), 0.01), {0.3, 0.7}, 1e-15);
  expect_alpha(fedsoftbetter(context({0.3, 0.7}, {1.5, 1.5}), 5.0), {0.3, 0.7}, 1e-15);
}

TEST(FedSoftWorse, HugeTemperatureApproachesP) {
  const auto ctx = context({0.2, 0.3, 0.5}, {0.1, 5.0, 2.0});
  expect_alpha(fedsoftworse(ctx, 1e9), {0.2, 0.3, 0.5}, 1e-9);
  expect_alpha(fedsoftbetter(ctx, 1e9), {0.2, 0.3, 0.5}, 1e-9);
}

TEST(FedBetter, MirrorsFedWorse) {
  expect_alpha(fedbetter(uniform_context(2, {1, 2})), {1, 0});
  expect_alpha(fedsoftbetter(uniform_context(2, {1, 2}), 0.2), {kSoftLarge, kSoftSmall}, 1e-9);
}

TEST(SoftStrategies, ShiftInvariantAndScaleCovariant) {
  Stream rng(3, Purpose::Diagnostics);
  for (int trial = 0; trial < 200; ++trial) {
    auto ctx = random_context(rng, 6);
    auto shifted = ctx;
    for (auto& l : shifted.eval_losses) l += 7.25;
    auto scaled = ctx;
    for (auto& l : scaled.eval_losses) l *= 4.0;
    const auto a = fedsoftworse(ctx, 0.3);
    const auto b = fedsoftworse(shifted, 0.3);
    const auto c = fedsoftworse(scaled, 1.2);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_NEAR(a[i], c[i], 1e-12);
    }
  }
}

TEST(SoftStrategies, ExtremeTemperaturesStayFinite) {
  const auto ctx = uniform_context(3, {0.0, 1e4, 2.0});
  EXPECT_TRUE(fedsoftworse(ctx, 1e-8).on_simplex());
  EXPECT_TRUE(fedsoftbetter(ctx, 1e-8).on_simplex());
}

TEST(Aggregate, WeightedMeans) {
  auto ctx = uniform_context(2, {1, 2});
  ctx.local_models = {ParamVector::Constant(2, 1.0), ParamVector::Constant(2, 9.0)};
  EXPECT_TRUE(aggregate(ctx, CoefficientVector{{1, 0}}).isApprox(ParamVector::Constant(2, 1.0)));
  ParamVector a(2), b(2);
  a << 0, 2;
  b << 2, 0;
  ctx.local_models = {a, b};
  EXPECT_TRUE(aggregate(ctx, CoefficientVector{{0.5, 0.5}}).isApprox(ParamVector::Constant(2, 1.0)));
  ctx.local_models = {ParamVector::Constant(1, 0.0), ParamVector::Constant(1, 4.0)};
  EXPECT_DOUBLE_EQ(aggregate(ctx, CoefficientVector{{0.25, 0.75}})[0], 3.0);
}

TEST(HybridDiscrete, SwitchesAtRoundTwenty) {
  const auto s = Strategy::discrete({Phase{Strategy::fedsoftbetter(0.2), Trigger::round_below(20)},
                                     Phase{Strategy::fedavg(), Trigger::always()}});
  const auto early = uniform_context(2, {1, 2}, 5);
  expect_alpha(s.coefficients(early), fedsoftbetter(early, 0.2).alpha, 0.0);
  const auto late = uniform_context(2, {1, 2}, 20);
  expect_alpha(s.coefficients(late), {0.5, 0.5}, 0.0);
}

TEST(HybridDiscrete, SinglePhaseIsThatStrategy) {
  const auto s = Strategy::discrete({Phase{Strategy::fedavg(), Trigger::always()}});
  for (int r : {0, 7, 100}) expect_alpha(s.coefficients(context({0.2, 0.8}, {3, 1}, r)), {0.2, 0.8}, 0.0);
}

TEST(HybridDiscrete, AccuracyTriggerStaysFired) {
  const auto s = Strategy::parse("discrete[fedworse@acc<0.5 -> fedavg]");
  auto ctx = uniform_context(2, {1, 2}, 3);
  ctx.accuracy_history = {0.2, 0.4};
  expect_alpha(s.coefficients(ctx), {0, 1});
  ctx.accuracy_history = {0.2, 0.6, 0.4};
  expect_alpha(s.coefficients(ctx), {0.5, 0.5});
}

TEST(HybridAnnealed, Endpoints) {
  const auto ctx = uniform_context(2, {1, 2});
  const auto at0 = Strategy::annealed(Strategy::fedworse(), Strategy::fedavg(), LambdaSchedule::constant(0.0));
  const auto at1 = Strategy::annealed(Strategy::fedworse(), Strategy::fedavg(), LambdaSchedule::constant(1.0));
  expect_alpha(at0.coefficients(ctx), {0, 1}, 0.0);
  expect_alpha(at1.coefficients(ctx), {0.5, 0.5}, 0.0);
}

TEST(HybridAnnealed, ConvexMidpoint) {
  const auto s = Strategy::annealed(Strategy::fedbetter(), Strategy::fedavg(), LambdaSchedule::constant(0.5));
  expect_alpha(s.coefficients(uniform_context(2, {1, 2})), {0.75, 0.25});
}

TEST(HybridAnnealed, StaysInsideTheHullOfItsInputs) {
  Stream rng(8, Purpose::Diagnostics);
  const auto s = Strategy::parse("anneal[fedsoftworse(T=0.5) -> fedbetter; lambda=linear(0,1,30)]");
  for (int trial = 0; trial < 200; ++trial) {
    const auto ctx = random_context(rng, 5);
    const auto a = fedsoftworse(ctx, 0.5);
    const auto b = fedbetter(ctx);
    const auto mix = s.coefficients(ctx);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_GE(mix[i], std::min(a[i], b[i]) - 1e-15);
      EXPECT_LE(mix[i], std::max(a[i], b[i]) + 1e-15);
    }
  }
}

TEST(Strategies, EveryConstructorStaysOnTheSimplex) {
  const std::vector<Strategy> all{
      Strategy::fedavg(),
      Strategy::fedworse(),
      Strategy::fedbetter(),
      Strategy::fedworse_k(0.3),
      Strategy::fedbetter_k(0.3),
      Strategy::fedsoftworse(0.2),
      Strategy::fedsoftbetter(0.2),
      Strategy::parse("fedsoftbetteravg"),
      Strategy::parse("anneal[fedworse -> fedsoftbetter(T=0.1); lambda=linear(0.2,0.9,25)]"),
  };
  Stream rng(1, Purpose::Diagnostics);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto ctx = random_context(rng, 1 + rng.below(12));
    for (const auto& s : all) ASSERT_TRUE(s.coefficients(ctx).on_simplex()) << s.describe();
  }
}

TEST(StrategyParser, CanonicalRoundTrip) {
  for (const char* text : {"fedavg", "fedworse", "fedbetter", "fedworse_k(k=0.2)", "fedbetter_k(k=0.1)",
                           "fedsoftworse(T=0.2)", "fedsoftbetter(T=1.5)",
                           "discrete[fedsoftbetter(T=0.2)@round<20 -> fedavg]",
                           "anneal[fedworse -> fedavg; lambda=linear(0,1,100)]",
                           "discrete[fedworse@acc<0.5 -> anneal[fedavg -> fedbetter; lambda=const(0.25)]]"}) {
    const auto s = Strategy::parse(text);
    EXPECT_EQ(Strategy::parse(s.describe()).describe(), s.describe()) << text;
  }
}

TEST(StrategyParser, DefaultsAndAliases) {
  const auto ctx = uniform_context(2, {1, 2}, 3);
  expect_alpha(Strategy::parse("fedsoftworse").coefficients(ctx), {kSoftSmall, kSoftLarge}, 1e-9);
  expect_alpha(Strategy::parse("FedSoftBetter").coefficients(ctx), {kSoftLarge, kSoftSmall}, 1e-9);
  EXPECT_EQ(Strategy::parse("fedsoftbetteravg").describe(),
            Strategy::parse("discrete[fedsoftbetter(T=0.2)@round<20 -> fedavg]").describe());
  EXPECT_EQ(Strategy::parse("fedavgsoftworse(T=0.5, switch=10)").describe(),
            Strategy::parse("discrete[fedavg@round<10 -> fedsoftworse(T=0.5)]").describe());
  EXPECT_EQ(Strategy::parse("fedsoftbetteravgsoftworse").describe(),
            Strategy::parse("discrete[fedsoftbetter@round<20 -> fedavg@round<40 -> fedsoftworse]").describe());
  EXPECT_TRUE(Strategy::parse("fedavgsoftbetter").is_hybrid());
  EXPECT_FALSE(Strategy::parse("fedworse").is_hybrid());
}

TEST(StrategyParser, ErrorsCarryPositions) {
  auto position_of = [](const char* text) -> std::size_t {
    try {
      Strategy::parse(text);
    } catch (const StrategyParseError& e) {
      return e.position();
    }
    ADD_FAILURE() << "expected a parse error for " << text;
    return 0;
  };
  EXPECT_EQ(position_of("fedmedian"), 0u);
  EXPECT_EQ(position_of("fedavg)"), 6u);
  EXPECT_EQ(position_of("fedsoftworse(T=)"), 15u);
  EXPECT_EQ(position_of("fedsoftworse(Q=1)"), 12u);
  EXPECT_GT(position_of("discrete[fedavg@round<20 -> ]"), 20u);
  EXPECT_THROW(Strategy::parse("fedsoftworse(T=-1)"), StrategyParseError);
  EXPECT_THROW(Strategy::parse("fedworse_k(k=2)"), StrategyParseError);
}
