#pragma once

// The federated round loop: sample clients, broadcast, train locally,
// aggregate, record.

#include "fedagg/local_update.hpp"
#include "fedagg/metrics.hpp"
#include "fedagg/objectives.hpp"
#include "fedagg/rng.hpp"
#include "fedagg/skew.hpp"
#include "fedagg/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fedagg {

enum class LossEval { GlobalAtRoundStart, LocalAtRoundEnd };
enum class Track { TheoryQuadratic, Classification };

inline std::string to_string(LossEval e) {
  return e == LossEval::GlobalAtRoundStart ? "global_at_round_start" : "local_at_round_end";
}
inline std::string to_string(Track t) { return t == Track::TheoryQuadratic ? "theory-quadratic" : "classification"; }

struct FedConfig {
  int n_clients = 1;
  double participation = 1.0;  // C
  int rounds = 1;              // T
  LocalPlan local;             // E and b
  LrSchedule schedule = LrSchedule::constant(0.01);
  Strategy strategy = Strategy::fedavg();
  std::uint64_t seed = 0;
  LossEval loss_eval = LossEval::GlobalAtRoundStart;
  Track track = Track::Classification;
  int workers = 1;
  bool retain_trajectories = false;

  void validate() const {
    if (n_clients < 1) throw std::invalid_argument("config: n_clients must be positive");
    if (!(participation > 0.0 && participation <= 1.0)) throw std::invalid_argument("config: participation must lie in (0, 1]");
    if (rounds < 1) throw std::invalid_argument("config: rounds must be positive");
    if (local.count < 1) throw std::invalid_argument("config: local_epochs must be positive");
    if (local.batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
    if (workers < 1) throw std::invalid_argument("config: workers must be positive");
  }
};

// Everything the server-side loop needs besides the config.
struct Federation {
  std::vector<ClientObjective> clients;
  std::vector<double> p;
  ParamVector w0;
  std::shared_ptr<const LabeledDataset> test_set;  // classification only
  std::optional<ClassifierModel> model;            // classification only
};

struct RoundRecord {
  int round = 0;
  std::int64_t t_start = 0;  // global SGD step at broadcast
  std::int64_t t_step = 0;   // global SGD step of the aggregated model
  std::vector<int> selected;
  std::vector<double> alpha;
  double global_loss = 0.0;  // F at the aggregated model
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> rho_wt;
  std::optional<double> rho_wstar;
  double start_global_loss = 0.0;      // F at the broadcast model
  std::optional<double> dist2_to_opt;  // |w_{t+E} - w*|^2 when w* is known
  double max_grad_norm = 0.0;
};

// Per-round client iterates: trajectories[k][s] is the k-th selected client's
// model before local step s (the last entry is its returned model).
struct RoundTrajectory {
  std::vector<std::vector<ParamVector>> clients;
};

struct ExperimentResult {
  enum class Status { Success, Divergent };

  Status status = Status::Success;
  std::string divergence;
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> records;
  ParamVector final_model;
  ParamVector initial_model;
  double initial_global_loss = 0.0;
  std::optional<double> initial_dist2;
  std::vector<double> p;
  std::vector<double> client_f_star;
  std::optional<Optimum> global_optimum;
  double max_grad_norm = 0.0;
  bool partial_participation = false;
  std::vector<RoundTrajectory> trajectories;  // empty unless retained

  std::vector<double> accuracy_curve() const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.accuracy);
    return out;
  }
};

// Uniform m-subset without replacement, m = max(round(C N), 1), ascending.
inline std::vector<int> sample_clients(Stream& rng, int n, double c) {
  const int m = std::clamp(static_cast<int>(std::lround(c * n)), 1, n);
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  if (m == n) return ids;
  for (int i = 0; i < m; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace detail {

template <typename F>
void parallel_for(std::size_t n, int workers, F&& body) {
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(std::min(w, n));
  for (std::size_t k = 0; k < errors.size(); ++k)
    pool.emplace_back([&, k] {
      try {
        for (std::size_t i = k; i < n; i += errors.size()) body(i);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline ExperimentResult run_federated(const FedConfig& config, const Federation& fed) {
  config.validate();
  const auto n = static_cast<std::size_t>(config.n_clients);
  if (fed.clients.size() != n)
    throw std::invalid_argument("run_federated: config has " + std::to_string(n) + " clients, federation has " +
                                std::to_string(fed.clients.size()));
  if (fed.p.size() != n) throw std::invalid_argument("run_federated: weight count differs from client count");
  const auto d = fed.w0.size();
  for (const auto& c : fed.clients) require_dim("run_federated: client objective", d, dim(c));

  ExperimentResult res;
  res.strategy = config.strategy.describe();
  res.seed = config.seed;
  res.p = fed.p;
  res.partial_participation = std::lround(config.participation * config.n_clients) < config.n_clients;
  res.initial_model = fed.w0;

  for (const auto& c : fed.clients) res.client_f_star.push_back(f_star(c));
  std::vector<double> f_at_opt;
  if (config.track == Track::TheoryQuadratic) {
    const auto global = global_objective(fed.clients, fed.p);
    res.global_optimum = optimum(std::get<QuadraticObjective>(global));
    for (const auto& c : fed.clients) f_at_opt.push_back(loss(c, res.global_optimum->w_star));
  }

  const auto global_loss = [&](const ParamVector& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += fed.p[i] * loss(fed.clients[i], w);
    return s;
  };

  ParamVector w = fed.w0;
  res.initial_global_loss = global_loss(w);
  if (res.global_optimum) res.initial_dist2 = (w - res.global_optimum->w_star).squaredNorm();
  double current_loss = res.initial_global_loss;
  std::vector<double> accuracy_history;
  std::int64_t t = 0;

  for (int r = 0; r < config.rounds; ++r) {
    Stream sampler(config.seed, Purpose::ClientSampling, 0, static_cast<std::uint32_t>(r));
    const auto ids = sample_clients(sampler, config.n_clients, config.participation);
    const auto m = ids.size();

    RoundContext ctx;
    ctx.round_index = r;
    ctx.client_ids = ids;
    ctx.accuracy_history = accuracy_history;
    ctx.global_model_prev = w;
    double p_sel = 0.0;
    for (int id : ids) p_sel += fed.p[static_cast<std::size_t>(id)];
    std::vector<double> start_losses(m);
    for (std::size_t k = 0; k < m; ++k) {
      const auto i = static_cast<std::size_t>(ids[k]);
      ctx.p.push_back(fed.p[i] / p_sel);
      ctx.f_star.push_back(res.client_f_star[i]);
      start_losses[k] = loss(fed.clients[i], w);
    }

    std::vector<LocalRunRecord> runs(m);
    detail::parallel_for(m, config.workers, [&](std::size_t k) {
      const auto i = static_cast<std::size_t>(ids[k]);
      ClientStreams streams(config.seed, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(r));
      runs[k] = client_update(fed.clients[i], w, config.schedule, config.local, t, r, streams,
                              config.retain_trajectories);
    });

    RoundRecord rec;
    rec.round = r;
    rec.t_start = t;
    rec.selected = ids;
    rec.start_global_loss = current_loss;
    int steps = 0;
    for (std::size_t k = 0; k < m; ++k) {
      if (runs[k].divergent) {
        res.status = ExperimentResult::Status::Divergent;
        res.divergence = "client " + std::to_string(ids[k]) + " diverged at step " +
                         std::to_string(runs[k].divergent_step) + " (" + runs[k].divergence_reason + ")";
        res.final_model = w;
        return res;
      }
      steps = std::max(steps, runs[k].steps_taken);
      rec.max_grad_norm = std::max(rec.max_grad_norm, runs[k].max_grad_norm);
    }
    res.max_grad_norm = std::max(res.max_grad_norm, rec.max_grad_norm);

    ctx.eval_losses = config.loss_eval == LossEval::GlobalAtRoundStart ? start_losses : std::vector<double>{};
    if (config.loss_eval == LossEval::LocalAtRoundEnd)
      for (const auto& run : runs) ctx.eval_losses.push_back(run.end_loss);
    for (auto& run : runs) ctx.local_models.push_back(run.w_end);
    if (config.retain_trajectories) {
      RoundTrajectory traj;
      for (auto& run : runs) traj.clients.push_back(std::move(run.trajectory));
      res.trajectories.push_back(std::move(traj));
    }
    ctx.validate();

    const auto alpha = config.strategy.coefficients(ctx);
    const ParamVector next = aggregate(ctx, alpha);

    std::vector<double> gaps(m);
    for (std::size_t k = 0; k < m; ++k) gaps[k] = start_losses[k] - ctx.f_star[k];
    rec.rho_wt = weighting_skew_from_gaps(alpha.alpha, ctx.p, gaps);
    if (res.global_optimum) {
      for (std::size_t k = 0; k < m; ++k)
        gaps[k] = f_at_opt[static_cast<std::size_t>(ids[k])] - ctx.f_star[k];
      rec.rho_wstar = weighting_skew_from_gaps(alpha.alpha, ctx.p, gaps);
    }

    w = next;
    if (!w.allFinite() || w.cwiseAbs().maxCoeff() > kDivergenceLimit) {
      res.status = ExperimentResult::Status::Divergent;
      res.divergence = "aggregated model diverged in round " + std::to_string(r);
      res.final_model = w;
      return res;
    }
    t += steps;
    rec.t_step = t;
    rec.alpha = alpha.alpha;
    current_loss = global_loss(w);
    rec.global_loss = current_loss;
    if (res.global_optimum) rec.dist2_to_opt = (w - res.global_optimum->w_star).squaredNorm();
    if (fed.test_set && fed.model) {
      rec.accuracy = accuracy(*fed.model, w, *fed.test_set);
      accuracy_history.push_back(rec.accuracy);
    }
    res.records.push_back(std::move(rec));
  }
  res.final_model = w;
  return res;
}

// Analysis-only iterate between barriers: at local step s of a round,
// sum_i weight_i w^i_s. The default weights are p (the virtual sequence of the
// convergence analysis); RoundAlpha uses the coefficients chosen that round.
enum class VirtualWeights { Population, RoundAlpha };

inline std::vector<ParamVector> virtual_iterate(const ExperimentResult& result,
                                                VirtualWeights weights = VirtualWeights::Population) {
  if (result.trajectories.size() != result.records.size() || result.records.empty())
    throw std::invalid_argument("virtual_iterate: run did not retain client trajectories");
  if (result.partial_participation) throw std::invalid_argument("virtual_iterate: requires full participation");
  std::vector<ParamVector> out;
  for (std::size_t r = 0; r < result.records.size(); ++r) {
    const auto& rec = result.records[r];
    const auto& traj = result.trajectories[r].clients;
    const auto steps = traj.front().size() - 1;
    for (std::size_t s = 0; s < steps; ++s) {
      ParamVector v = ParamVector::Zero(traj.front()[s].size());
      for (std::size_t k = 0; k < traj.size(); ++k) {
        const double wgt = weights == VirtualWeights::Population
                               ? result.p[static_cast<std::size_t>(rec.selected[k])]
                               : rec.alpha[k];
        v += wgt * traj[k][s];
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace fedagg
