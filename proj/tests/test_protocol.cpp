#include "fedagg/datasets.hpp"
#include "fedagg/problems.hpp"
#include "fedagg/protocol.hpp"

#include <gtest/gtest.h>

#include <memory>

using namespace fedagg;

namespace {

ClientObjective scalar(double a, double b, double sd = 0.0) {
  return QuadraticObjective(Matrix::Constant(1, 1, a), ParamVector::Constant(1, b), 0.0, sd);
}

FedConfig theory_config(int n, int rounds, int e, LrSchedule sched, Strategy s = Strategy::fedavg()) {
  FedConfig c;
  c.n_clients = n;
  c.rounds = rounds;
  c.local = LocalPlan{LocalUnit::Steps, e, 1};
  c.schedule = sched;
  c.strategy = std::move(s);
  c.track = Track::TheoryQuadratic;
  return c;
}

struct SmallClassification {
  Federation fed;
  FedConfig config;
};

SmallClassification small_classification(int workers, double participation, std::uint64_t seed) {
  auto all = generate_blobs(4, 60, 6, 1.0, 21);
  auto [train, test] = holdout_per_class(all, 10);
  auto data = std::make_shared<const LabeledDataset>(std::move(train));
  const auto part = partition_shards(*data, 8, 16, 1, 3, 5);
  ClassifierModel m{Architecture::SoftmaxLinear, 6, 4};
  SmallClassification out;
  for (const auto& a : part.assignments) out.fed.clients.emplace_back(ClassifierObjective(m, data, a));
  out.fed.p = client_weights(part);
  out.fed.w0 = ParamVector::Zero(m.param_dim());
  out.fed.test_set = std::make_shared<const LabeledDataset>(std::move(test));
  out.fed.model = m;
  out.config.n_clients = 8;
  out.config.participation = participation;
  out.config.rounds = 8;
  out.config.local = LocalPlan{LocalUnit::Epochs, 1, 8};
  out.config.schedule = LrSchedule::geometric(0.1, 0.99);
  out.config.strategy = Strategy::parse("fedsoftbetter(T=0.2)");
  out.config.seed = seed;
  out.config.workers = workers;
  return out;
}

}  // namespace

TEST(SampleClients, FullParticipation) {
  Stream rng(0, Purpose::ClientSampling);
  const auto ids = sample_clients(rng, 5, 1.0);
  EXPECT_EQ(ids, (std::vector<int>{0, 1, 2, 3, 4}));
}

TEST(SampleClients, TenPercentOfHundred) {
  Stream rng(0, Purpose::ClientSampling);
  const auto ids = sample_clients(rng, 100, 0.1);
  EXPECT_EQ(ids.size(), 10u);
  EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
  EXPECT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
}

TEST(SampleClients, FloorOfOne) {
  Stream rng(0, Purpose::ClientSampling);
  EXPECT_EQ(sample_clients(rng, 3, 0.01).size(), 1u);
}

TEST(RunFederated, SingleClientIsCentralisedSgd) {
  const std::vector<ClientObjective> clients{scalar(2, 1, 0.2)};
  Federation fed{clients, {1.0}, ParamVector::Constant(1, 4.0), nullptr, std::nullopt};
  auto cfg = theory_config(1, 6, 3, LrSchedule::constant(0.1), Strategy::fedworse());
  cfg.seed = 9;
  const auto res = run_federated(cfg, fed);

  ParamVector w = fed.w0;
  for (int r = 0; r < 6; ++r) {
    ClientStreams s(9, 0, static_cast<std::uint32_t>(r));
    w = client_update(clients[0], w, cfg.schedule, cfg.local, r * 3, r, s).w_end;
    EXPECT_EQ(res.records[static_cast<std::size_t>(r)].alpha, std::vector<double>{1.0});
  }
  EXPECT_EQ(res.final_model[0], w[0]);
}

TEST(RunFederated, IdenticalClientsMakeStrategiesAgree) {
  const std::vector<ClientObjective> clients(3, scalar(2, 1));
  Federation fed{clients, {0.2, 0.3, 0.5}, ParamVector::Constant(1, 3.0), nullptr, std::nullopt};
  const auto a = run_federated(theory_config(3, 10, 2, LrSchedule::constant(0.1)), fed);
  const auto b = run_federated(theory_config(3, 10, 2, LrSchedule::constant(0.1), Strategy::fedworse()), fed);
  for (std::size_t r = 0; r < a.records.size(); ++r)
    EXPECT_NEAR(a.records[r].global_loss, b.records[r].global_loss, 1e-14);
}

TEST(RunFederated, OneStepFedAvgMatchesGradientDescentOnTheGlobalObjective) {
  QuadraticSuite suite;
  suite.noise_sd = 0.0;
  suite.n_clients = 3;
  const auto prob = make_quadratic_problem(suite, 2);
  const std::vector<ClientObjective> clients(prob.clients.begin(), prob.clients.end());
  const std::vector<double> p{0.2, 0.3, 0.5};
  Federation fed{clients, p, prob.w0, nullptr, std::nullopt};
  const auto global = std::get<QuadraticObjective>(global_objective(clients, p));
  double mu = global.mu(), ell = global.ell();
  for (const auto& q : prob.clients) mu = std::min(mu, q.mu()), ell = std::max(ell, q.ell());
  const auto sched = LrSchedule::inverse_theory(mu, 4 * ell / mu);
  const auto res = run_federated(theory_config(3, 200, 1, sched), fed);

  ParamVector w = prob.w0;
  for (int t = 0; t < 200; ++t) w -= sched.rate(t, t) * global.gradient(w);
  EXPECT_LT((res.final_model - w).norm(), 1e-10);
  const auto opt = optimum(global);
  EXPECT_LE(res.records.back().global_loss - opt.f_star, (res.initial_global_loss - opt.f_star) / 100.0);
}

TEST(RunFederated, FedAvgSkewIsOneEveryRound) {
  QuadraticSuite suite;
  const auto prob = make_quadratic_problem(suite, 4);
  const std::vector<ClientObjective> clients(prob.clients.begin(), prob.clients.end());
  Federation fed{clients, {0.5, 0.5}, prob.w0, nullptr, std::nullopt};
  const auto res = run_federated(theory_config(2, 30, 5, LrSchedule::inverse_theory(1.0, 16.0)), fed);
  for (const auto& rec : res.records) {
    ASSERT_TRUE(rec.rho_wt.has_value());
    EXPECT_NEAR(*rec.rho_wt, 1.0, 1e-10);
    ASSERT_TRUE(rec.rho_wstar.has_value());
    EXPECT_NEAR(*rec.rho_wstar, 1.0, 1e-10);
  }
}

TEST(RunFederated, BitIdenticalAcrossWorkerCounts) {
  auto one = small_classification(1, 0.5, 3);
  auto many = small_classification(4, 0.5, 3);
  const auto a = run_federated(one.config, one.fed);
  const auto b = run_federated(many.config, many.fed);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t r = 0; r < a.records.size(); ++r) {
    EXPECT_EQ(a.records[r].selected, b.records[r].selected);
    EXPECT_EQ(a.records[r].alpha, b.records[r].alpha);
    EXPECT_EQ(a.records[r].global_loss, b.records[r].global_loss);
    EXPECT_EQ(a.records[r].accuracy, b.records[r].accuracy);
  }
  EXPECT_TRUE((a.final_model.array() == b.final_model.array()).all());
}

TEST(RunFederated, PartialParticipationRenormalisesAndFlags) {
  auto s = small_classification(1, 0.5, 7);
  const auto res = run_federated(s.config, s.fed);
  EXPECT_TRUE(res.partial_participation);
  for (const auto& rec : res.records) {
    EXPECT_EQ(rec.selected.size(), 4u);
    double sum = 0.0;
    for (double a : rec.alpha) sum += a;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_FALSE(std::isnan(rec.accuracy));
  }
  EXPECT_EQ(res.accuracy_curve().size(), 8u);
}

TEST(RunFederated, AggregateStaysInsideTheLocalModelBox) {
  auto s = small_classification(1, 1.0, 2);
  s.config.rounds = 1;
  s.config.strategy = Strategy::parse("fedsoftworse(T=0.5)");
  const auto res = run_federated(s.config, s.fed);
  ParamVector lo = ParamVector::Constant(s.fed.w0.size(), std::numeric_limits<double>::infinity());
  ParamVector hi = -lo;
  for (std::size_t i = 0; i < s.fed.clients.size(); ++i) {
    ClientStreams st(s.config.seed, static_cast<std::uint32_t>(i), 0);
    const auto w = client_update(s.fed.clients[i], s.fed.w0, s.config.schedule, s.config.local, 0, 0, st).w_end;
    lo = lo.cwiseMin(w);
    hi = hi.cwiseMax(w);
  }
  EXPECT_TRUE((res.final_model.array() >= lo.array() - 1e-15).all());
  EXPECT_TRUE((res.final_model.array() <= hi.array() + 1e-15).all());
}

TEST(RunFederated, DivergenceStopsTheRunAndKeepsPartialRecords) {
  const std::vector<ClientObjective> clients{scalar(2, 0), scalar(2, 0)};
  Federation fed{clients, {0.5, 0.5}, ParamVector::Ones(1), nullptr, std::nullopt};
  const auto res = run_federated(theory_config(2, 100, 5, LrSchedule::constant(5.0)), fed);
  EXPECT_EQ(res.status, ExperimentResult::Status::Divergent);
  EXPECT_FALSE(res.divergence.empty());
  EXPECT_LT(res.records.size(), 100u);
}

TEST(RunFederated, RejectsInconsistentFederations) {
  const std::vector<ClientObjective> clients{scalar(2, 0)};
  Federation fed{clients, {1.0}, ParamVector::Ones(2), nullptr, std::nullopt};
  EXPECT_THROW(run_federated(theory_config(1, 1, 1, LrSchedule::constant(0.1)), fed), DimensionMismatch);
  Federation short_fed{clients, {1.0}, ParamVector::Ones(1), nullptr, std::nullopt};
  EXPECT_THROW(run_federated(theory_config(2, 1, 1, LrSchedule::constant(0.1)), short_fed), std::invalid_argument);
  auto bad = theory_config(1, 1, 1, LrSchedule::constant(0.1));
  bad.participation = 0.0;
  EXPECT_THROW(run_federated(bad, short_fed), std::invalid_argument);
}

TEST(VirtualIterate, HandComputedTwoClientsTwoSteps) {
  // F1 = w^2 / 2, F2 = w^2 - 2w, w0 = 2, eta = 0.25, two steps per round:
  //   round 1: client 1 goes 2 -> 1.5 -> 1.125, client 2 goes 2 -> 1.5 -> 1.25, served 1.1875
  //   round 2: client 1 goes 1.1875 -> 0.890625, client 2 goes 1.1875 -> 1.09375
  const std::vector<ClientObjective> clients{scalar(1, 0), scalar(2, 2)};
  Federation fed{clients, {0.5, 0.5}, ParamVector::Constant(1, 2.0), nullptr, std::nullopt};
  auto cfg = theory_config(2, 2, 2, LrSchedule::constant(0.25));
  cfg.retain_trajectories = true;
  const auto res = run_federated(cfg, fed);
  const auto v = virtual_iterate(res);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_NEAR(v[0][0], 2.0, 1e-15);
  EXPECT_NEAR(v[1][0], 1.5, 1e-15);
  EXPECT_NEAR(v[2][0], 1.1875, 1e-15);
  EXPECT_NEAR(v[3][0], 0.9921875, 1e-15);
  EXPECT_NEAR(res.records[0].dist2_to_opt.value(), (1.1875 - 2.0 / 3.0) * (1.1875 - 2.0 / 3.0), 1e-14);
}

TEST(VirtualIterate, EqualsServedModelAtBarriersForFedAvg) {
  QuadraticSuite suite;
  const auto prob = make_quadratic_problem(suite, 6);
  const std::vector<ClientObjective> clients(prob.clients.begin(), prob.clients.end());
  Federation fed{clients, {0.5, 0.5}, prob.w0, nullptr, std::nullopt};
  auto cfg = theory_config(2, 10, 4, LrSchedule::inverse_theory(1.0, 16.0));
  cfg.retain_trajectories = true;
  const auto res = run_federated(cfg, fed);
  const auto v = virtual_iterate(res);
  ASSERT_EQ(v.size(), 40u);
  EXPECT_TRUE(v[0].isApprox(prob.w0, 1e-15));
  for (std::size_t r = 1; r < 10; ++r) {
    ParamVector served = ParamVector::Zero(prob.w0.size());
    const auto& traj = res.trajectories[r - 1].clients;
    for (std::size_t k = 0; k < 2; ++k) served += 0.5 * traj[k].back();
    EXPECT_LT((v[r * 4] - served).norm(), 1e-12);
  }
}

TEST(VirtualIterate, OneEntryPerRoundWhenEIsOne) {
  const std::vector<ClientObjective> clients{scalar(1, 0), scalar(2, 2)};
  Federation fed{clients, {0.5, 0.5}, ParamVector::Constant(1, 2.0), nullptr, std::nullopt};
  auto cfg = theory_config(2, 7, 1, LrSchedule::constant(0.1));
  cfg.retain_trajectories = true;
  EXPECT_EQ(virtual_iterate(run_federated(cfg, fed)).size(), 7u);
  cfg.retain_trajectories = false;
  EXPECT_THROW(virtual_iterate(run_federated(cfg, fed)), std::invalid_argument);
}
