#pragma once

// Convergence-theory quantities and empirical checks on quadratic runs.
//
// Expectations are estimated by averaging independent runs over seeds. A
// check compares the seed mean of (observed - bound) against zero with a
// Monte-Carlo allowance of three standard errors of that mean.

#include "fedagg/local_update.hpp"
#include "fedagg/objectives.hpp"
#include "fedagg/protocol.hpp"
#include "fedagg/rng.hpp"
#include "fedagg/skew.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedagg {

struct TheoryConstants {
  double mu = 0.0;
  double L = 0.0;
  double sigma2 = 0.0;   // E|g - grad F|^2, configured
  double G_hat = 0.0;    // largest stochastic gradient norm observed
  double Gamma = 0.0;    // heterogeneity
  double gamma = 0.0;    // 4 L / mu
  double w0_dist2 = 0.0; // |w0 - w*|^2
  int E_steps = 1;       // local SGD steps per round; also stands in for tau
  int n_clients = 1;
};

// F(w*) - sum_i p_i F_i(w_i*). Non-negative up to roundoff.
inline double heterogeneity(std::span<const QuadraticObjective> clients, std::span<const double> p) {
  std::vector<ClientObjective> objs(clients.begin(), clients.end());
  const auto global = std::get<QuadraticObjective>(global_objective(objs, p));
  double weighted = 0.0;
  for (std::size_t i = 0; i < clients.size(); ++i) weighted += p[i] * optimum(clients[i]).f_star;
  return optimum(global).f_star - weighted;
}

// mu and L cover every client and the global objective, so the smoothness
// and convexity assumptions hold for each F_i as well as for F.
inline TheoryConstants theory_constants(std::span<const QuadraticObjective> clients, std::span<const double> p,
                                        std::span<const ExperimentResult> runs, int e_steps) {
  if (clients.empty()) throw std::invalid_argument("theory_constants: no clients");
  TheoryConstants c;
  std::vector<ClientObjective> objs(clients.begin(), clients.end());
  const auto global = std::get<QuadraticObjective>(global_objective(objs, p));
  c.mu = global.mu();
  c.L = global.ell();
  for (const auto& q : clients) {
    c.mu = std::min(c.mu, q.mu());
    c.L = std::max(c.L, q.ell());
    c.sigma2 = std::max(c.sigma2, q.noise_variance());
  }
  c.Gamma = heterogeneity(clients, p);
  c.gamma = 4.0 * c.L / c.mu;
  c.E_steps = e_steps;
  c.n_clients = static_cast<int>(clients.size());
  for (const auto& r : runs) {
    c.G_hat = std::max(c.G_hat, r.max_grad_norm);
    if (r.initial_dist2) c.w0_dist2 = std::max(c.w0_dist2, *r.initial_dist2);
  }
  return c;
}

struct SkewTrajectory {
  std::vector<std::optional<double>> rho_wt;     // first run, per round
  std::vector<std::optional<double>> rho_wstar;  // first run, per round
  std::optional<double> rho_bar;                 // min over runs and rounds of rho(t, w_t)
  std::optional<double> rho_tilde;               // max over runs and rounds of rho(t, w*)
  std::vector<double> pi_t;                      // first run, per round
  std::vector<double> Pi_t;
  double pi = std::numeric_limits<double>::infinity();
  double Pi = 0.0;
};

inline SkewTrajectory skew_trajectory(std::span<const ExperimentResult> runs) {
  SkewTrajectory s;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& run = runs[k];
    for (const auto& rec : run.records) {
      std::vector<double> p_sel;
      double total = 0.0;
      for (int id : rec.selected) total += run.p[static_cast<std::size_t>(id)];
      for (int id : rec.selected) p_sel.push_back(run.p[static_cast<std::size_t>(id)] / total);
      const auto ks = kappa_stats(rec.alpha, p_sel);
      s.pi = std::min(s.pi, ks.pi);
      s.Pi = std::max(s.Pi, ks.Pi);
      if (rec.rho_wt) s.rho_bar = s.rho_bar ? std::min(*s.rho_bar, *rec.rho_wt) : *rec.rho_wt;
      if (rec.rho_wstar) s.rho_tilde = s.rho_tilde ? std::max(*s.rho_tilde, *rec.rho_wstar) : *rec.rho_wstar;
      if (k == 0) {
        s.rho_wt.push_back(rec.rho_wt);
        s.rho_wstar.push_back(rec.rho_wstar);
        s.pi_t.push_back(ks.pi);
        s.Pi_t.push_back(ks.Pi);
      }
    }
  }
  return s;
}

struct ConvergenceBound {
  double V = 0.0;
  double E_err = 0.0;
  double V_min = 0.0;
  double lambda1 = 0.0;  // 4L(32 E^2 G^2 + sigma^2) / (3 mu^2)
  double lambda2 = 0.0;  // 8 L Gamma / (3 mu)
};

// E[F(w_T)] - F* <= V / (T + gamma) + E_err, with
//   V     = lambda1 / rho_bar + 8 L^2 Gamma / mu^2 + L gamma |w0 - w*|^2 / 2
//   E_err = lambda2 (rho_tilde / rho_bar - 1)
// The local step count E stands in for the undefined tau.
inline ConvergenceBound bound_V_E(const TheoryConstants& c, double rho_bar, double rho_tilde, int e_steps) {
  if (!(rho_bar > 0.0)) throw std::invalid_argument("bound_V_E: rho_bar must be positive");
  const double e2 = static_cast<double>(e_steps) * e_steps;
  ConvergenceBound b;
  b.lambda1 = 4.0 * c.L * (32.0 * e2 * c.G_hat * c.G_hat + c.sigma2) / (3.0 * c.mu * c.mu);
  b.lambda2 = 8.0 * c.L * c.Gamma / (3.0 * c.mu);
  b.V_min = 8.0 * c.L * c.L * c.Gamma / (c.mu * c.mu) + c.L * c.gamma * c.w0_dist2 / 2.0;
  b.V = b.lambda1 / rho_bar + b.V_min;
  b.E_err = b.lambda2 * (rho_tilde / rho_bar - 1.0);
  return b;
}

// (1 / (T + gamma)) [V_min + lambda1 / pi] + lambda2 (1 / (pi p_min) - N)
inline double final_bound(double pi, double p_min, const TheoryConstants& c, double t_rounds) {
  if (!(pi > 0.0) || !(p_min > 0.0)) throw std::invalid_argument("final_bound: pi and p_min must be positive");
  const auto b = bound_V_E(c, 1.0, 1.0, c.E_steps);
  return (b.V_min + b.lambda1 / pi) / (t_rounds + c.gamma) + b.lambda2 * (1.0 / (pi * p_min) - c.n_clients);
}

struct CheckReport {
  std::string name;
  int tested = 0;
  int violations = 0;
  double worst_margin = -std::numeric_limits<double>::infinity();  // max of (observed - bound), scaled per check
  bool pass = false;
  std::optional<double> statistic;  // check-specific (e.g. worst ratio, fitted slope)
  std::string detail;
};

// |grad F(w)|^2 / (2 L (F(w) - F*)); 1 on the top eigenvector, mu/L on the bottom one.
inline double smoothness_ratio(const QuadraticObjective& q, const ParamVector& w, const Optimum& opt) {
  const double gap = q.loss(w) - opt.f_star;
  return q.gradient(w).squaredNorm() / (2.0 * q.ell() * gap);
}

inline CheckReport check_lemma_smooth(const QuadraticObjective& q, int n_samples, Stream& rng) {
  const auto opt = optimum(q);
  CheckReport rep;
  rep.name = "lemma_smooth";
  double worst = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    ParamVector dir(q.dim());
    for (Eigen::Index j = 0; j < dir.size(); ++j) dir[j] = rng.normal();
    const double scale = std::exp(4.0 * rng.uniform() - 2.0);
    const ParamVector w = opt.w_star + scale * dir;
    const double lhs = q.gradient(w).squaredNorm();
    const double rhs = 2.0 * q.ell() * (q.loss(w) - opt.f_star);
    if (!(rhs > 0.0)) continue;
    ++rep.tested;
    worst = std::max(worst, lhs / rhs);
    rep.worst_margin = std::max(rep.worst_margin, lhs / rhs - 1.0);
    if (lhs > rhs * (1.0 + 1e-9)) ++rep.violations;
  }
  rep.statistic = worst;
  rep.pass = rep.violations == 0;
  rep.detail = "worst ratio " + std::to_string(worst);
  return rep;
}

namespace detail {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(std::span<const double> xs) {
  MeanSe out;
  const auto n = static_cast<double>(xs.size());
  for (double x : xs) out.mean += x;
  out.mean /= n;
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(ss / (n - 1.0) / n);
  return out;
}

inline void require_trajectories(std::span<const ExperimentResult> runs) {
  if (runs.empty()) throw std::invalid_argument("diagnostics: no runs");
  for (const auto& r : runs) {
    if (r.trajectories.size() != r.records.size() || r.records.empty())
      throw std::invalid_argument("diagnostics: runs did not retain client trajectories");
    if (r.partial_participation) throw std::invalid_argument("diagnostics: runs must use full participation");
  }
}

}  // namespace detail

// Seed-averaged sum_i alpha_i |w_t - w_t^i|^2 at every local step, with
// w_t = sum_i alpha_i w_t^i, against 16 eta_{t0}^2 E^2 G^2.
inline CheckReport check_discrepancy(std::span<const ExperimentResult> runs, const TheoryConstants& c,
                                     const LrSchedule& schedule) {
  detail::require_trajectories(runs);
  CheckReport rep;
  rep.name = "lemma_discrepancy";
  const auto& first = runs.front();
  const double e2 = static_cast<double>(c.E_steps) * c.E_steps;
  double worst_ratio = 0.0;
  for (std::size_t r = 0; r < first.records.size(); ++r) {
    const auto t0 = first.records[r].t_start;
    const double eta0 = schedule.rate(t0, static_cast<std::int64_t>(r));
    const double bound = 16.0 * eta0 * eta0 * e2 * c.G_hat * c.G_hat;
    const auto steps = first.trajectories[r].clients.front().size() - 1;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<double> vals;
      for (const auto& run : runs) {
        const auto& traj = run.trajectories[r].clients;
        const auto& alpha = run.records[r].alpha;
        ParamVector v = ParamVector::Zero(traj.front()[s].size());
        for (std::size_t k = 0; k < traj.size(); ++k) v += alpha[k] * traj[k][s];
        double disc = 0.0;
        for (std::size_t k = 0; k < traj.size(); ++k) disc += alpha[k] * (v - traj[k][s]).squaredNorm();
        vals.push_back(disc);
      }
      const auto ms = detail::mean_se(vals);
      ++rep.tested;
      rep.worst_margin = std::max(rep.worst_margin, ms.mean - bound);
      if (bound > 0.0) worst_ratio = std::max(worst_ratio, ms.mean / bound);
      if (ms.mean > bound + 3.0 * ms.se) ++rep.violations;
    }
  }
  rep.statistic = worst_ratio;
  rep.pass = rep.violations == 0;
  rep.detail = "largest discrepancy/bound ratio " + std::to_string(worst_ratio);
  return rep;
}

struct RecursionOptions {
  double allowed_violation_fraction = 0.05;
  double abs_tol = 0.0;
  double se_multiplier = 3.0;
};

// One-step recursion
//   D_{t+1} <= (1 - eta_t mu (1 + 3 rho_bar / 8)) D_t
//              + eta_t^2 (32 E^2 G^2 + 6 rho_bar L Gamma + sigma^2) + 2 eta_t Gamma (rho_tilde - rho_bar)
// composed over the E steps of each round and checked between consecutive
// served models, D = |w - w*|^2.
inline CheckReport check_theorem_recursion(std::span<const ExperimentResult> runs, const TheoryConstants& c,
                                           const SkewTrajectory& skew, const LrSchedule& schedule,
                                           const RecursionOptions& opts = {}) {
  if (schedule.kind() != LrSchedule::Kind::InverseTheory)
    throw std::invalid_argument("check_theorem_recursion: requires the inverse-theory schedule");
  if (schedule.rate(0, 0) > (1.0 + 1e-12) / (4.0 * c.L))
    throw std::invalid_argument("check_theorem_recursion: eta_0 = " + std::to_string(schedule.rate(0, 0)) +
                                " exceeds 1/(4L) = " + std::to_string(1.0 / (4.0 * c.L)));
  if (runs.empty()) throw std::invalid_argument("check_theorem_recursion: no runs");
  if (!skew.rho_bar) throw std::invalid_argument("check_theorem_recursion: rho_bar undefined on every round");
  const double rho_bar = *skew.rho_bar;
  const double rho_tilde = skew.rho_tilde.value_or(rho_bar);
  const double e2 = static_cast<double>(c.E_steps) * c.E_steps;
  const double quad = 32.0 * e2 * c.G_hat * c.G_hat + 6.0 * rho_bar * c.L * c.Gamma + c.sigma2;
  const double lin = 2.0 * c.Gamma * (rho_tilde - rho_bar);

  CheckReport rep;
  rep.name = "theorem_recursion";
  const auto& first = runs.front();
  for (std::size_t r = 0; r < first.records.size(); ++r) {
    const auto t0 = first.records[r].t_start;
    const auto t1 = first.records[r].t_step;
    double coef = 1.0, add = 0.0;
    for (auto t = t0; t < t1; ++t) {
      const double eta = schedule.rate(t, static_cast<std::int64_t>(r));
      const double a = 1.0 - eta * c.mu * (1.0 + 3.0 * rho_bar / 8.0);
      coef *= a;
      add = a * add + eta * eta * quad + eta * lin;
    }
    std::vector<double> slack;
    double scale = 0.0;
    for (const auto& run : runs) {
      if (!run.initial_dist2 || !run.records[r].dist2_to_opt)
        throw std::invalid_argument("check_theorem_recursion: runs lack distances to the optimum");
      const double before = r == 0 ? *run.initial_dist2 : *run.records[r - 1].dist2_to_opt;
      const double after = *run.records[r].dist2_to_opt;
      const double rhs = coef * before + add;
      slack.push_back(after - rhs);
      scale = std::max(scale, rhs);
    }
    const auto ms = detail::mean_se(slack);
    ++rep.tested;
    rep.worst_margin = std::max(rep.worst_margin, ms.mean);
    if (ms.mean > opts.se_multiplier * ms.se + opts.abs_tol) ++rep.violations;
  }
  const double frac = rep.tested == 0 ? 0.0 : static_cast<double>(rep.violations) / rep.tested;
  rep.statistic = 1.0 - frac;
  rep.pass = rep.tested > 0 && frac <= opts.allowed_violation_fraction;
  rep.detail = "rho_bar " + std::to_string(rho_bar) + ", rho_tilde " + std::to_string(rho_tilde) + ", " +
               std::to_string(rep.tested - rep.violations) + "/" + std::to_string(rep.tested) + " rounds hold";
  return rep;
}

struct RateOptions {
  double tail_fraction = 0.5;
  double max_slope = -0.8;
};

// Envelope E[F(w_T)] - F* <= V / (T + gamma) + E_err at every served model
// (T counts SGD steps), plus a least-squares slope of log(gap - E_err)
// against log(T + gamma) over the tail of the run.
inline CheckReport check_corollary_rate(std::span<const ExperimentResult> runs, const TheoryConstants& c,
                                        const ConvergenceBound& bound, const RateOptions& opts = {}) {
  if (runs.empty() || runs.front().records.empty()) throw std::invalid_argument("check_corollary_rate: no runs");
  if (!runs.front().global_optimum) throw std::invalid_argument("check_corollary_rate: runs lack the global optimum");
  const double f_star = runs.front().global_optimum->f_star;
  CheckReport rep;
  rep.name = "corollary_rate";

  const auto n_rounds = runs.front().records.size();
  std::vector<double> xs, ys;
  const auto tail_start = static_cast<std::size_t>(std::floor((1.0 - opts.tail_fraction) * n_rounds));
  for (std::size_t r = 0; r <= n_rounds; ++r) {
    double mean = 0.0;
    for (const auto& run : runs) mean += (r == 0 ? run.initial_global_loss : run.records[r - 1].global_loss) - f_star;
    mean /= static_cast<double>(runs.size());
    const double t = r == 0 ? 0.0 : static_cast<double>(runs.front().records[r - 1].t_step);
    const double env = bound.V / (t + c.gamma) + bound.E_err;
    ++rep.tested;
    rep.worst_margin = std::max(rep.worst_margin, mean / env);
    if (mean > env) ++rep.violations;
    if (r > tail_start && mean - bound.E_err > 0.0) {
      xs.push_back(std::log(t + c.gamma));
      ys.push_back(std::log(mean - bound.E_err));
    }
  }
  double slope = std::numeric_limits<double>::quiet_NaN();
  if (xs.size() >= 2) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(xs.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += (xs[i] - mx) * (ys[i] - my);
      sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    slope = sxy / sxx;
  }
  rep.statistic = slope;
  rep.pass = rep.violations == 0 && slope <= opts.max_slope;
  rep.detail = "tail log-log slope " + std::to_string(slope) + ", largest gap/envelope " +
               std::to_string(rep.worst_margin);
  return rep;
}

}  // namespace fedagg
