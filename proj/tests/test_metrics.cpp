#include "fedagg/metrics.hpp"
#include "fedagg/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fedagg;

namespace {

LabeledDataset labelled(std::vector<int> labels, int n_classes) {
  LabeledDataset ds;
  ds.n_classes = n_classes;
  ds.features = RowMatrix::Identity(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(labels.size()));
  ds.labels = std::move(labels);
  return ds;
}

}  // namespace

TEST(Accuracy, ConstantPredictorScoresOneOverK) {
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int s = 0; s < 25; ++s) labels.push_back(c);
  const RowMatrix scores = RowMatrix::Zero(100, 4);  // ties resolve to class 0
  EXPECT_DOUBLE_EQ(accuracy_from_scores(scores, labels), 0.25);
}

TEST(Accuracy, MemorisingLinearModelScoresOne) {
  // Features are one-hot sample ids; W maps sample j to its label.
  const auto ds = labelled({0, 1, 1, 0, 1}, 2);
  ClassifierModel m{Architecture::SoftmaxLinear, 5, 2};
  // W is k x d row-major: W(c, j) sits at c * d + j.
  ParamVector w = ParamVector::Zero(m.param_dim());
  for (int j = 0; j < 5; ++j) w[ds.labels[static_cast<std::size_t>(j)] * 5 + j] = 1.0;
  EXPECT_DOUBLE_EQ(accuracy(m, w, ds), 1.0);
}

TEST(Accuracy, RandomScoresNearChance) {
  Stream rng(4, Purpose::Diagnostics);
  const int n = 20000;
  RowMatrix scores(n, 2);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    scores(i, 0) = rng.uniform();
    scores(i, 1) = rng.uniform();
    labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
  }
  EXPECT_NEAR(accuracy_from_scores(scores, labels), 0.5, 0.015);
}

TEST(Accuracy, RejectsEmptyAndMismatchedInputs) {
  EXPECT_THROW(accuracy_from_scores(RowMatrix::Zero(0, 2), std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(accuracy_from_scores(RowMatrix::Zero(2, 2), std::vector<int>{0}), std::invalid_argument);
}

TEST(RoundsToThreshold, FirstCrossingIsOneBased) {
  const std::vector<double> curve{0.3, 0.55, 0.62, 0.61};
  EXPECT_EQ(rounds_to_threshold(curve, 0.6), 3);
  EXPECT_EQ(rounds_to_threshold(curve, 0.3), 1);
}

TEST(RoundsToThreshold, NeverReached) {
  const std::vector<double> curve{0.3, 0.55, 0.59};
  EXPECT_FALSE(rounds_to_threshold(curve, 0.6).has_value());
  EXPECT_FALSE(rounds_to_threshold(std::vector<double>{}, 0.1).has_value());
}

TEST(RoundsToThreshold, MonotoneInThreshold) {
  const std::vector<double> curve{0.1, 0.4, 0.35, 0.5, 0.7, 0.65, 0.8};
  int prev = 0;
  for (double thr = 0.05; thr <= 0.8; thr += 0.05) {
    const auto r = rounds_to_threshold(curve, thr);
    ASSERT_TRUE(r.has_value());
    EXPECT_GE(*r, prev);
    prev = *r;
  }
}

TEST(ConfidenceInterval, IdenticalSamplesHaveZeroWidth) {
  const std::vector<double> xs(10, 3.5);
  const auto s = confidence_interval(xs);
  EXPECT_DOUBLE_EQ(s.mean, 3.5);
  EXPECT_DOUBLE_EQ(s.ci_half_width, 0.0);
  EXPECT_EQ(s.n_runs, 10);
}

TEST(ConfidenceInterval, TwoSamplesUseOneDegreeOfFreedom) {
  // s = sqrt(2), half width = t_{0.975,1} * sqrt(2) / sqrt(2) = 12.7062047...
  const auto s = confidence_interval(std::vector<double>{4.0, 6.0});
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_NEAR(s.ci_half_width, 12.706204736174707, 1e-9);
}

TEST(ConfidenceInterval, TooFewSamplesThrow) {
  EXPECT_THROW(confidence_interval(std::vector<double>{1.0}), std::invalid_argument);
  EXPECT_THROW(confidence_interval(std::vector<double>{1.0, 2.0}, 1.5), std::invalid_argument);
}

TEST(ConfidenceInterval, StudentQuantiles) {
  EXPECT_NEAR(student_t_quantile(0.975, 1.0), 12.706204736174707, 1e-9);
  EXPECT_NEAR(student_t_quantile(0.975, 19.0), 2.0930240544083096, 1e-9);
}

TEST(ConfidenceInterval, CoversTheMeanAtTheNominalRate) {
  Stream rng(11, Purpose::Diagnostics);
  const int trials = 4000;
  int covered = 0;
  std::vector<double> xs(8);
  for (int t = 0; t < trials; ++t) {
    for (auto& x : xs) x = 2.0 + rng.normal();
    const auto s = confidence_interval(xs);
    if (std::abs(s.mean - 2.0) <= s.ci_half_width) ++covered;
  }
  const double rate = static_cast<double>(covered) / trials;
  EXPECT_NEAR(rate, 0.95, 3.0 * std::sqrt(0.95 * 0.05 / trials));
}

TEST(ConfidenceInterval, WidthShrinksLikeInverseRootN) {
  Stream rng(12, Purpose::Diagnostics);
  auto mean_width = [&](int n) {
    double total = 0.0;
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (int t = 0; t < 400; ++t) {
      for (auto& x : xs) x = rng.normal();
      total += confidence_interval(xs).ci_half_width / student_t_quantile(0.975, n - 1.0);
    }
    return total / 400.0;
  };
  EXPECT_NEAR(mean_width(25) / mean_width(100), 2.0, 0.1);
}
