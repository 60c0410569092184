#pragma once

// Experiment-facing measurements: test accuracy, rounds-to-threshold, and
// Student-t confidence intervals over repeated runs.

#include "fedagg/datasets.hpp"
#include "fedagg/objectives.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace fedagg {

// Fraction of rows whose highest score sits on the true label; ties go to
// the lowest class index.
inline double accuracy_from_scores(const RowMatrix& scores, std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy: empty test set");
  if (static_cast<std::size_t>(scores.rows()) != labels.size())
    throw std::invalid_argument("accuracy: score rows and labels disagree");
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c)
      if (scores(r, c) > scores(r, best)) best = c;
    if (best == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double accuracy(const ClassifierModel& model, const ParamVector& params, const LabeledDataset& test_set) {
  if (test_set.size() == 0) throw std::invalid_argument("accuracy: empty test set");
  return accuracy_from_scores(model.scores(params, test_set.features), test_set.labels);
}

// 1-based index of the first round whose accuracy reaches `threshold`.
inline std::optional<int> rounds_to_threshold(std::span<const double> curve, double threshold) {
  for (std::size_t r = 0; r < curve.size(); ++r)
    if (curve[r] >= threshold) return static_cast<int>(r) + 1;
  return std::nullopt;
}

struct RunStats {
  double mean = 0.0;
  double ci_half_width = 0.0;
  int n_runs = 0;
};

inline double student_t_quantile(double p, double df) {
  return boost::math::quantile(boost::math::students_t_distribution<double>(df), p);
}

// mean +- t_{(1+level)/2, n-1} * s / sqrt(n)
inline RunStats confidence_interval(std::span<const double> samples, double level = 0.95) {
  if (samples.size() < 2) throw std::invalid_argument("confidence_interval: need at least 2 samples");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence_interval: level must lie in (0, 1)");
  const auto n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= n;
  double ss = 0.0;
  for (double s : samples) ss += (s - mean) * (s - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  RunStats out;
  out.mean = mean;
  out.n_runs = static_cast<int>(samples.size());
  out.ci_half_width = sd == 0.0 ? 0.0 : student_t_quantile(0.5 + level / 2.0, n - 1.0) * sd / std::sqrt(n);
  return out;
}

}  // namespace fedagg
