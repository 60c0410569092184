#pragma once

// Per-round statistics of a coefficient vector relative to the client
// distribution p: the weighting skew rho and the ratios kappa = alpha / p.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>

namespace fedagg {

// rho = sum_i alpha_i gap_i / (F(w) - sum_i p_i F_i*), where gap_i = F_i(w) - F_i*.
// Undefined (nullopt) when the denominator vanishes relative to the numerator.
inline std::optional<double> weighting_skew(std::span<const double> alpha, std::span<const double> gaps,
                                            double global_loss, double weighted_client_optima) {
  if (alpha.size() != gaps.size()) throw std::invalid_argument("weighting_skew: alpha and gaps differ in length");
  double num = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) num += alpha[i] * gaps[i];
  const double den = global_loss - weighted_client_optima;
  if (std::abs(den) < 1e-12 * std::max(1.0, std::abs(num))) return std::nullopt;
  return num / den;
}

// Same quantity with the denominator written as sum_i p_i gap_i, which is
// exact arithmetic for alpha = p.
inline std::optional<double> weighting_skew_from_gaps(std::span<const double> alpha, std::span<const double> p,
                                                      std::span<const double> gaps) {
  if (p.size() != gaps.size()) throw std::invalid_argument("weighting_skew: p and gaps differ in length");
  double den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) den += p[i] * gaps[i];
  return weighting_skew(alpha, gaps, den, 0.0);
}

inline constexpr double kKappaFloor = 1e-9;

struct KappaStats {
  double pi = 0.0;  // min_i alpha_i / p_i
  double Pi = 0.0;  // max_i alpha_i / p_i
};

// Zero coefficients are raised to kKappaFloor; the added mass is taken from
// the positive coefficients in proportion to their size.
inline KappaStats kappa_stats(std::span<const double> alpha, std::span<const double> p) {
  if (alpha.size() != p.size() || alpha.empty()) throw std::invalid_argument("kappa_stats: length mismatch");
  std::size_t zeros = 0;
  double positive = 0.0;
  for (double a : alpha) {
    if (a <= 0.0)
      ++zeros;
    else
      positive += a;
  }
  const double scale = zeros == 0 ? 1.0 : (positive - static_cast<double>(zeros) * kKappaFloor) / positive;
  KappaStats out{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (!(p[i] > 0.0)) throw std::invalid_argument("kappa_stats: p must be positive");
    const double a = alpha[i] <= 0.0 ? kKappaFloor : alpha[i] * scale;
    out.pi = std::min(out.pi, a / p[i]);
    out.Pi = std::max(out.Pi, a / p[i]);
  }
  return out;
}

}  // namespace fedagg
