#pragma once

// Client-side training: plain mini-batch SGD from the received global model.

#include "fedagg/objectives.hpp"
#include "fedagg/rng.hpp"
#include "fedagg/types.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedagg {

class LrSchedule {
 public:
  enum class Kind { InverseTheory, Geometric };

  // eta_t = 1 / (mu (t + gamma)), indexed by global SGD step t.
  static LrSchedule inverse_theory(double mu, double gamma) {
    if (!(mu > 0.0) || !(gamma > 0.0)) throw std::invalid_argument("inverse-theory schedule needs mu > 0 and gamma > 0");
    LrSchedule s;
    s.kind_ = Kind::InverseTheory;
    s.a_ = mu;
    s.b_ = gamma;
    return s;
  }

  // eta_r = eta0 * decay^r, indexed by communication round r and constant within it.
  static LrSchedule geometric(double eta0, double decay) {
    if (!(eta0 > 0.0) || !(decay > 0.0) || decay > 1.0)
      throw std::invalid_argument("geometric schedule needs eta0 > 0 and decay in (0, 1]");
    LrSchedule s;
    s.kind_ = Kind::Geometric;
    s.a_ = eta0;
    s.b_ = decay;
    return s;
  }

  static LrSchedule constant(double eta) { return geometric(eta, 1.0); }

  Kind kind() const { return kind_; }
  double mu() const { return a_; }
  double gamma() const { return b_; }
  double eta0() const { return a_; }
  double decay() const { return b_; }

  double rate(std::int64_t step, std::int64_t round) const {
    if (kind_ == Kind::InverseTheory) return 1.0 / (a_ * (static_cast<double>(step) + b_));
    return a_ * std::pow(b_, static_cast<double>(round));
  }

 private:
  LrSchedule() = default;
  Kind kind_ = Kind::Geometric;
  double a_ = 0.0;
  double b_ = 1.0;
};

// The theory track counts E in SGD steps, the classification track in passes
// over the local data.
enum class LocalUnit { Steps, Epochs };

struct LocalPlan {
  LocalUnit unit = LocalUnit::Epochs;
  int count = 1;       // E
  int batch_size = 64; // b
};

struct ClientStreams {
  Stream batching;
  Stream noise;

  ClientStreams(std::uint64_t seed, std::uint32_t client, std::uint32_t round)
      : batching(seed, Purpose::Batching, client, round), noise(seed, Purpose::GradientNoise, client, round) {}
};

struct LocalRunRecord {
  ParamVector w_end;
  double max_grad_norm = 0.0;
  int steps_taken = 0;
  double end_loss = 0.0;
  bool divergent = false;
  int divergent_step = -1;
  std::string divergence_reason;
  // Filled only when requested: iterate before every step plus the final one.
  std::vector<ParamVector> trajectory;
};

inline constexpr double kDivergenceLimit = 1e12;

inline int planned_steps(const LocalPlan& plan, std::size_t n_samples) {
  if (plan.unit == LocalUnit::Steps) return plan.count;
  const auto b = static_cast<std::size_t>(plan.batch_size);
  return plan.count * static_cast<int>((n_samples + b - 1) / b);
}

// Runs E local epochs (or steps) of w <- w - eta_t g(w). The step counter
// starts at t0 and advances by one per SGD step; the round index selects the
// rate for per-round schedules. Every epoch is a fresh shuffle cut into
// contiguous b-sized slices with the short tail slice kept.
inline LocalRunRecord client_update(const ClientObjective& obj, const ParamVector& w_start, const LrSchedule& sched,
                                    const LocalPlan& plan, std::int64_t t0, std::int64_t round,
                                    ClientStreams& streams, bool keep_trajectory = false) {
  if (plan.count < 1) throw std::invalid_argument("client_update: E must be at least 1");
  if (plan.batch_size < 1) throw std::invalid_argument("client_update: batch size must be at least 1");
  require_dim("client_update: start model", dim(obj), w_start.size());

  const std::size_t n = sample_count(obj);
  const auto b = static_cast<std::size_t>(plan.batch_size);
  const int total = planned_steps(plan, n);

  LocalRunRecord rec;
  ParamVector w = w_start;
  if (keep_trajectory) rec.trajectory.reserve(static_cast<std::size_t>(total) + 1);

  std::vector<std::size_t> order(n);
  std::size_t cursor = n;  // forces a shuffle before the first slice
  for (int k = 0; k < total; ++k) {
    if (cursor >= n) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      streams.batching.shuffle(std::span(order));
      cursor = 0;
    }
    const std::size_t len = std::min(b, n - cursor);
    std::span<const std::size_t> batch(order.data() + cursor, len);
    cursor += len;

    if (keep_trajectory) rec.trajectory.push_back(w);
    const ParamVector g = grad_minibatch(obj, w, batch, streams.noise);
    ++rec.steps_taken;
    if (!g.allFinite()) {
      rec.divergent = true;
      rec.divergent_step = static_cast<int>(t0) + k;
      rec.divergence_reason = "non-finite gradient";
      rec.w_end = w;
      return rec;
    }
    rec.max_grad_norm = std::max(rec.max_grad_norm, g.norm());
    w -= sched.rate(t0 + k, round) * g;
    if (!w.allFinite() || w.cwiseAbs().maxCoeff() > kDivergenceLimit) {
      rec.divergent = true;
      rec.divergent_step = static_cast<int>(t0) + k;
      rec.divergence_reason = "parameter magnitude exceeded 1e12";
      rec.w_end = w;
      return rec;
    }
  }
  if (keep_trajectory) rec.trajectory.push_back(w);
  rec.end_loss = loss(obj, w);
  if (!std::isfinite(rec.end_loss) || rec.end_loss > kDivergenceLimit) {
    rec.divergent = true;
    rec.divergent_step = static_cast<int>(t0) + total;
    rec.divergence_reason = "loss exceeded 1e12";
  }
  rec.w_end = std::move(w);
  return rec;
}

}  // namespace fedagg
