#pragma once

// Experiment files: schema, construction of a Federation from a spec, and the
// machine-readable outputs (per-round CSV, summary, theory report).

#include "fedagg/diagnostics.hpp"
#include "fedagg/metrics.hpp"
#include "fedagg/problems.hpp"
#include "fedagg/protocol.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedagg {

using Json = nlohmann::json;

#ifndef FEDAGG_VERSION
#define FEDAGG_VERSION "0.0.0"
#endif

inline constexpr const char* kVersion = FEDAGG_VERSION;

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSpec {
  std::string source = "blobs";  // blobs | idx
  int n_classes = 10;
  int train_per_class = 600;
  int test_per_class = 100;
  int dim = 20;
  double spread = 2.0;
  std::optional<std::uint64_t> seed;  // fixed dataset across repeats when set
  std::string train_images, train_labels, test_images, test_labels;
};

struct PartitionSpec {
  std::string kind = "shards";  // shards | iid
  int n_shards = 0;             // 0 means 2 N
  int min_shards = 1;
  int max_shards = 3;
};

struct ScheduleSpec {
  std::string kind = "geometric";  // geometric | inverse-theory
  double eta0 = 1e-3;
  double decay = 0.99;
  std::optional<double> mu;     // inverse-theory: derived from the problem when absent
  std::optional<double> gamma;  // inverse-theory: 4 L / mu when absent
};

struct ExperimentSpec {
  std::string name = "experiment";
  Track track = Track::Classification;
  std::string strategy = "fedavg";
  std::uint64_t seed = 0;
  int repeats = 1;
  int workers = 1;

  int n_clients = 100;
  double participation = 0.1;
  int rounds = 100;
  LocalUnit local_unit = LocalUnit::Epochs;
  int local_epochs = 1;
  int batch_size = 64;
  LossEval loss_eval = LossEval::GlobalAtRoundStart;

  ScheduleSpec schedule;
  DataSpec data;
  PartitionSpec partition;
  Architecture architecture = Architecture::SoftmaxLinear;
  int hidden = 32;

  QuadraticSuite quadratic;
  std::uint64_t problem_seed = 0;

  double threshold = 0.6;
  double ci_level = 0.95;

  bool theory_report = true;
  bool fail_on_check = true;

  std::string output_dir = "fedsim-out";
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw SpecError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!ok.count(it.key())) throw SpecError(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read(const Json& obj, const char* key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError(where + "." + key + ": wrong type");
  }
}

inline LocalUnit parse_local_unit(const std::string& s) {
  if (s == "epochs") return LocalUnit::Epochs;
  if (s == "steps") return LocalUnit::Steps;
  throw SpecError("federation.local_unit: expected 'epochs' or 'steps', got '" + s + "'");
}

inline LossEval parse_loss_eval(const std::string& s) {
  if (s == "global_at_round_start") return LossEval::GlobalAtRoundStart;
  if (s == "local_at_round_end") return LossEval::LocalAtRoundEnd;
  throw SpecError("federation.loss_eval: expected 'global_at_round_start' or 'local_at_round_end', got '" + s + "'");
}

inline Track parse_track(const std::string& s) {
  if (s == "classification") return Track::Classification;
  if (s == "theory-quadratic") return Track::TheoryQuadratic;
  throw SpecError("track: expected 'classification' or 'theory-quadratic', got '" + s + "'");
}

}  // namespace detail

// Parses and validates a spec document. Unknown keys are rejected at every
// level; the optional top-level "echo" object is informational and ignored.
inline ExperimentSpec parse_spec(const Json& j) {
  using detail::read;
  detail::reject_unknown(j, "spec",
                         {"name", "track", "strategy", "seed", "repeats", "workers", "federation", "schedule", "data",
                          "partition", "model", "quadratic", "metrics", "diagnostics", "output", "echo"});
  ExperimentSpec s;
  read(j, "name", "spec", s.name);
  std::string track = to_string(s.track);
  read(j, "track", "spec", track);
  s.track = detail::parse_track(track);
  read(j, "strategy", "spec", s.strategy);
  read(j, "seed", "spec", s.seed);
  read(j, "repeats", "spec", s.repeats);
  read(j, "workers", "spec", s.workers);

  if (j.contains("federation")) {
    const auto& f = j["federation"];
    detail::reject_unknown(f, "federation",
                           {"n_clients", "participation", "rounds", "local_unit", "local_epochs", "batch_size",
                            "loss_eval"});
    read(f, "n_clients", "federation", s.n_clients);
    read(f, "participation", "federation", s.participation);
    read(f, "rounds", "federation", s.rounds);
    std::string unit = s.local_unit == LocalUnit::Epochs ? "epochs" : "steps";
    read(f, "local_unit", "federation", unit);
    s.local_unit = detail::parse_local_unit(unit);
    read(f, "local_epochs", "federation", s.local_epochs);
    read(f, "batch_size", "federation", s.batch_size);
    std::string le = to_string(s.loss_eval);
    read(f, "loss_eval", "federation", le);
    s.loss_eval = detail::parse_loss_eval(le);
  }
  if (j.contains("schedule")) {
    const auto& f = j["schedule"];
    detail::reject_unknown(f, "schedule", {"kind", "eta0", "decay", "mu", "gamma"});
    read(f, "kind", "schedule", s.schedule.kind);
    read(f, "eta0", "schedule", s.schedule.eta0);
    read(f, "decay", "schedule", s.schedule.decay);
    if (f.contains("mu") && !f["mu"].is_null()) s.schedule.mu = f["mu"].get<double>();
    if (f.contains("gamma") && !f["gamma"].is_null()) s.schedule.gamma = f["gamma"].get<double>();
    if (s.schedule.kind != "geometric" && s.schedule.kind != "inverse-theory")
      throw SpecError("schedule.kind: expected 'geometric' or 'inverse-theory', got '" + s.schedule.kind + "'");
  }
  if (j.contains("data")) {
    const auto& f = j["data"];
    detail::reject_unknown(f, "data",
                           {"source", "n_classes", "train_per_class", "test_per_class", "dim", "spread", "seed",
                            "train_images", "train_labels", "test_images", "test_labels"});
    read(f, "source", "data", s.data.source);
    read(f, "n_classes", "data", s.data.n_classes);
    read(f, "train_per_class", "data", s.data.train_per_class);
    read(f, "test_per_class", "data", s.data.test_per_class);
    read(f, "dim", "data", s.data.dim);
    read(f, "spread", "data", s.data.spread);
    if (f.contains("seed") && !f["seed"].is_null()) s.data.seed = f["seed"].get<std::uint64_t>();
    read(f, "train_images", "data", s.data.train_images);
    read(f, "train_labels", "data", s.data.train_labels);
    read(f, "test_images", "data", s.data.test_images);
    read(f, "test_labels", "data", s.data.test_labels);
    if (s.data.source != "blobs" && s.data.source != "idx")
      throw SpecError("data.source: expected 'blobs' or 'idx', got '" + s.data.source + "'");
  }
  if (j.contains("partition")) {
    const auto& f = j["partition"];
    detail::reject_unknown(f, "partition", {"kind", "n_shards", "min_shards", "max_shards"});
    read(f, "kind", "partition", s.partition.kind);
    read(f, "n_shards", "partition", s.partition.n_shards);
    read(f, "min_shards", "partition", s.partition.min_shards);
    read(f, "max_shards", "partition", s.partition.max_shards);
    if (s.partition.kind != "shards" && s.partition.kind != "iid")
      throw SpecError("partition.kind: expected 'shards' or 'iid', got '" + s.partition.kind + "'");
  }
  if (j.contains("model")) {
    const auto& f = j["model"];
    detail::reject_unknown(f, "model", {"architecture", "hidden"});
    std::string arch = to_string(s.architecture);
    read(f, "architecture", "model", arch);
    try {
      s.architecture = parse_architecture(arch);
    } catch (const std::invalid_argument& e) {
      throw SpecError(std::string("model.architecture: ") + e.what());
    }
    read(f, "hidden", "model", s.hidden);
  }
  if (j.contains("quadratic")) {
    const auto& f = j["quadratic"];
    detail::reject_unknown(f, "quadratic",
                           {"dim", "eig_min", "eig_max", "heterogeneity", "optimum_spread", "noise_sd", "init_scale",
                            "seed"});
    read(f, "dim", "quadratic", s.quadratic.dim);
    read(f, "eig_min", "quadratic", s.quadratic.eig_min);
    read(f, "eig_max", "quadratic", s.quadratic.eig_max);
    std::string het = to_string(s.quadratic.heterogeneity);
    read(f, "heterogeneity", "quadratic", het);
    try {
      s.quadratic.heterogeneity = parse_heterogeneity(het);
    } catch (const std::invalid_argument& e) {
      throw SpecError(std::string("quadratic.heterogeneity: ") + e.what());
    }
    read(f, "optimum_spread", "quadratic", s.quadratic.optimum_spread);
    read(f, "noise_sd", "quadratic", s.quadratic.noise_sd);
    read(f, "init_scale", "quadratic", s.quadratic.init_scale);
    read(f, "seed", "quadratic", s.problem_seed);
  }
  if (j.contains("metrics")) {
    const auto& f = j["metrics"];
    detail::reject_unknown(f, "metrics", {"threshold", "ci_level"});
    read(f, "threshold", "metrics", s.threshold);
    read(f, "ci_level", "metrics", s.ci_level);
  }
  if (j.contains("diagnostics")) {
    const auto& f = j["diagnostics"];
    detail::reject_unknown(f, "diagnostics", {"theory_report", "fail_on_check"});
    read(f, "theory_report", "diagnostics", s.theory_report);
    read(f, "fail_on_check", "diagnostics", s.fail_on_check);
  }
  if (j.contains("output")) {
    const auto& f = j["output"];
    detail::reject_unknown(f, "output", {"dir"});
    read(f, "dir", "output", s.output_dir);
  }

  if (s.repeats < 1) throw SpecError("repeats: must be at least 1");
  if (s.workers < 1) throw SpecError("workers: must be at least 1");
  if (s.n_clients < 1) throw SpecError("federation.n_clients: must be at least 1");
  if (!(s.participation > 0.0 && s.participation <= 1.0)) throw SpecError("federation.participation: must lie in (0, 1]");
  if (s.rounds < 1) throw SpecError("federation.rounds: must be at least 1");
  if (s.local_epochs < 1) throw SpecError("federation.local_epochs: must be at least 1");
  if (s.batch_size < 1) throw SpecError("federation.batch_size: must be at least 1");
  if (!(s.threshold > 0.0 && s.threshold < 1.0)) throw SpecError("metrics.threshold: must lie in (0, 1)");
  if (!(s.ci_level > 0.0 && s.ci_level < 1.0)) throw SpecError("metrics.ci_level: must lie in (0, 1)");
  if (s.track == Track::Classification && s.schedule.kind == "inverse-theory" && !(s.schedule.mu && s.schedule.gamma))
    throw SpecError("schedule: inverse-theory on the classification track needs explicit mu and gamma");
  try {
    (void)Strategy::parse(s.strategy);
  } catch (const StrategyParseError& e) {
    throw SpecError(std::string("strategy: ") + e.what());
  }
  return s;
}

inline ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open spec file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError(path.string() + ": " + e.what());
  }
  return parse_spec(j);
}

// Fully resolved form: every default filled in. parse_spec(to_json(s)) == s.
inline Json to_json(const ExperimentSpec& s) {
  Json j;
  j["name"] = s.name;
  j["track"] = to_string(s.track);
  j["strategy"] = s.strategy;
  j["seed"] = s.seed;
  j["repeats"] = s.repeats;
  j["workers"] = s.workers;
  j["federation"] = {{"n_clients", s.n_clients},
                     {"participation", s.participation},
                     {"rounds", s.rounds},
                     {"local_unit", s.local_unit == LocalUnit::Epochs ? "epochs" : "steps"},
                     {"local_epochs", s.local_epochs},
                     {"batch_size", s.batch_size},
                     {"loss_eval", to_string(s.loss_eval)}};
  Json sched = {{"kind", s.schedule.kind}, {"eta0", s.schedule.eta0}, {"decay", s.schedule.decay}};
  sched["mu"] = s.schedule.mu ? Json(*s.schedule.mu) : Json(nullptr);
  sched["gamma"] = s.schedule.gamma ? Json(*s.schedule.gamma) : Json(nullptr);
  j["schedule"] = sched;
  if (s.track == Track::Classification) {
    Json d = {{"source", s.data.source},
              {"n_classes", s.data.n_classes},
              {"train_per_class", s.data.train_per_class},
              {"test_per_class", s.data.test_per_class},
              {"dim", s.data.dim},
              {"spread", s.data.spread},
              {"train_images", s.data.train_images},
              {"train_labels", s.data.train_labels},
              {"test_images", s.data.test_images},
              {"test_labels", s.data.test_labels}};
    d["seed"] = s.data.seed ? Json(*s.data.seed) : Json(nullptr);
    j["data"] = d;
    j["partition"] = {{"kind", s.partition.kind},
                      {"n_shards", s.partition.n_shards},
                      {"min_shards", s.partition.min_shards},
                      {"max_shards", s.partition.max_shards}};
    j["model"] = {{"architecture", to_string(s.architecture)}, {"hidden", s.hidden}};
  } else {
    j["quadratic"] = {{"dim", s.quadratic.dim},
                      {"eig_min", s.quadratic.eig_min},
                      {"eig_max", s.quadratic.eig_max},
                      {"heterogeneity", to_string(s.quadratic.heterogeneity)},
                      {"optimum_spread", s.quadratic.optimum_spread},
                      {"noise_sd", s.quadratic.noise_sd},
                      {"init_scale", s.quadratic.init_scale},
                      {"seed", s.problem_seed}};
  }
  j["metrics"] = {{"threshold", s.threshold}, {"ci_level", s.ci_level}};
  j["diagnostics"] = {{"theory_report", s.theory_report}, {"fail_on_check", s.fail_on_check}};
  j["output"] = {{"dir", s.output_dir}};
  return j;
}

// 64-bit FNV-1a of the resolved spec, excluding the output location and
// worker count, which do not affect results.
inline std::string config_hash(const ExperimentSpec& s) {
  Json j = to_json(s);
  j.erase("output");
  j.erase("workers");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Construction

struct PreparedRun {
  FedConfig config;
  Federation federation;
  std::vector<QuadraticObjective> quadratics;  // theory track only
};

inline QuadraticProblem theory_problem(const ExperimentSpec& s) {
  QuadraticSuite suite = s.quadratic;
  suite.n_clients = s.n_clients;
  return make_quadratic_problem(suite, s.problem_seed);
}

// mu = min and L = max over the clients and the global objective.
inline SmoothnessConstants theory_smoothness(std::span<const QuadraticObjective> clients, std::span<const double> p) {
  std::vector<ClientObjective> objs(clients.begin(), clients.end());
  const auto global = std::get<QuadraticObjective>(global_objective(objs, p));
  SmoothnessConstants k{global.mu(), global.ell()};
  for (const auto& q : clients) {
    k.mu = std::min(k.mu, q.mu());
    k.ell = std::max(k.ell, q.ell());
  }
  return k;
}

inline LrSchedule resolve_schedule(const ExperimentSpec& s, std::span<const QuadraticObjective> clients,
                                   std::span<const double> p) {
  if (s.schedule.kind == "geometric") return LrSchedule::geometric(s.schedule.eta0, s.schedule.decay);
  double mu = 0.0, gamma = 0.0;
  if (s.schedule.mu && s.schedule.gamma) {
    mu = *s.schedule.mu;
    gamma = *s.schedule.gamma;
  } else {
    const auto k = theory_smoothness(clients, p);
    mu = s.schedule.mu.value_or(k.mu);
    gamma = s.schedule.gamma.value_or(4.0 * k.ell / k.mu);
  }
  return LrSchedule::inverse_theory(mu, gamma);
}

inline std::pair<LabeledDataset, LabeledDataset> classification_data(const ExperimentSpec& s, std::uint64_t seed) {
  const auto& d = s.data;
  if (d.source == "idx") {
    if (d.train_images.empty() || d.train_labels.empty())
      throw SpecError("data: idx source needs train_images and train_labels");
    auto train = load_idx(d.train_images, d.train_labels);
    if (!d.test_images.empty()) {
      auto test = load_idx(d.test_images, d.test_labels);
      test.n_classes = train.n_classes = std::max(train.n_classes, test.n_classes);
      return {std::move(train), std::move(test)};
    }
    return holdout_per_class(train, d.test_per_class);
  }
  auto all = generate_blobs(d.n_classes, d.train_per_class + d.test_per_class, d.dim, d.spread, seed);
  return holdout_per_class(all, d.test_per_class);
}

inline Partition make_partition(const ExperimentSpec& s, const LabeledDataset& train, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(s.n_clients);
  if (s.partition.kind == "iid") {
    std::vector<std::size_t> sizes(n, train.size() / n);
    for (std::size_t i = 0; i < train.size() % n; ++i) ++sizes[i];
    return partition_iid(train, sizes, seed);
  }
  const auto shards = s.partition.n_shards > 0 ? static_cast<std::size_t>(s.partition.n_shards) : 2 * n;
  return partition_shards(train, n, shards, static_cast<std::size_t>(s.partition.min_shards),
                          static_cast<std::size_t>(s.partition.max_shards), seed);
}

// Everything needed for repeat k, which runs with seed base_seed + k.
inline PreparedRun prepare_run(const ExperimentSpec& s, int repeat) {
  PreparedRun out;
  const std::uint64_t seed = s.seed + static_cast<std::uint64_t>(repeat);
  auto& c = out.config;
  c.n_clients = s.n_clients;
  c.participation = s.participation;
  c.rounds = s.rounds;
  c.local = LocalPlan{s.local_unit, s.local_epochs, s.batch_size};
  c.strategy = Strategy::parse(s.strategy);
  c.seed = seed;
  c.loss_eval = s.loss_eval;
  c.track = s.track;
  c.workers = s.workers;

  auto& fed = out.federation;
  if (s.track == Track::TheoryQuadratic) {
    auto prob = theory_problem(s);
    fed.p.assign(static_cast<std::size_t>(s.n_clients), 1.0 / s.n_clients);
    fed.clients.assign(prob.clients.begin(), prob.clients.end());
    fed.w0 = prob.w0;
    out.quadratics = std::move(prob.clients);
    c.schedule = resolve_schedule(s, out.quadratics, fed.p);
    c.retain_trajectories = s.theory_report && s.participation >= 1.0;
    return out;
  }

  const std::uint64_t data_seed = s.data.seed.value_or(seed);
  auto [train, test] = classification_data(s, data_seed);
  auto data = std::make_shared<const LabeledDataset>(std::move(train));
  const auto part = make_partition(s, *data, data_seed);
  ClassifierModel model{s.architecture, static_cast<int>(data->n_features()), data->n_classes, s.hidden};
  for (const auto& a : part.assignments) fed.clients.emplace_back(ClassifierObjective(model, data, a));
  fed.p = client_weights(part);
  Stream init(seed, Purpose::Initialization);
  fed.w0 = model.initial_params(init);
  fed.test_set = std::make_shared<const LabeledDataset>(std::move(test));
  fed.model = model;
  c.schedule = resolve_schedule(s, {}, {});
  return out;
}

struct RepeatSet {
  std::vector<ExperimentResult> runs;
  std::vector<QuadraticObjective> quadratics;
  std::optional<LrSchedule> schedule;
};

inline RepeatSet run_repeats(const ExperimentSpec& s) {
  RepeatSet out;
  for (int k = 0; k < s.repeats; ++k) {
    auto prep = prepare_run(s, k);
    if (k == 0) {
      out.quadratics = prep.quadratics;
      out.schedule = prep.config.schedule;
    }
    out.runs.push_back(run_federated(prep.config, prep.federation));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outputs

inline constexpr const char* kCsvHeader =
    "round,t_step,strategy,global_loss,accuracy,rho_wt,rho_wstar,alpha_min,alpha_max,alpha_entropy,selected_count";

inline std::string format_real(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline double alpha_entropy(std::span<const double> alpha) {
  double h = 0.0;
  for (double a : alpha)
    if (a > 0.0) h -= a * std::log(a);
  return h;
}

// One row per completed round; round is 1-based, matching R-threshold indexing.
inline std::string curve_csv(const ExperimentResult& res) {
  std::ostringstream out;
  out << kCsvHeader << '\n';
  const std::string strat = csv_field(res.strategy);
  for (const auto& rec : res.records) {
    const auto [lo, hi] = std::minmax_element(rec.alpha.begin(), rec.alpha.end());
    out << rec.round + 1 << ',' << rec.t_step << ',' << strat << ',' << format_real(rec.global_loss) << ','
        << format_real(rec.accuracy) << ',' << (rec.rho_wt ? format_real(*rec.rho_wt) : "") << ','
        << (rec.rho_wstar ? format_real(*rec.rho_wstar) : "") << ',' << format_real(*lo) << ','
        << format_real(*hi) << ',' << format_real(alpha_entropy(rec.alpha)) << ',' << rec.selected.size() << '\n';
  }
  return out.str();
}

inline Json stats_json(std::span<const double> xs, double level) {
  Json j;
  if (xs.empty()) return Json{{"mean", nullptr}, {"ci_half_width", nullptr}, {"n", 0}};
  if (xs.size() < 2) return Json{{"mean", xs.front()}, {"ci_half_width", nullptr}, {"n", 1}};
  const auto st = confidence_interval(xs, level);
  return Json{{"mean", st.mean}, {"ci_half_width", st.ci_half_width}, {"n", st.n_runs}};
}

struct ThresholdSummary {
  std::vector<double> rounds;  // censored runs count as T + 1
  int censored = 0;
};

inline ThresholdSummary threshold_rounds(std::span<const ExperimentResult> runs, double threshold, int total_rounds) {
  ThresholdSummary out;
  for (const auto& r : runs) {
    const auto curve = r.accuracy_curve();
    const auto hit = rounds_to_threshold(curve, threshold);
    if (!hit) ++out.censored;
    out.rounds.push_back(hit ? *hit : total_rounds + 1);
  }
  return out;
}

inline Json summarize(const ExperimentSpec& s, std::span<const ExperimentResult> runs) {
  Json j;
  j["name"] = s.name;
  j["strategy"] = runs.empty() ? Strategy::parse(s.strategy).describe() : runs.front().strategy;
  j["version"] = kVersion;
  j["config_hash"] = config_hash(s);
  j["track"] = to_string(s.track);
  j["local_epochs"] = s.local_epochs;
  j["local_unit"] = s.local_unit == LocalUnit::Epochs ? "epochs" : "steps";
  j["loss_eval"] = to_string(s.loss_eval);
  j["partial_participation"] = !runs.empty() && runs.front().partial_participation;
  j["ci_method"] = "student-t";
  j["ci_level"] = s.ci_level;
  j["threshold"] = s.threshold;

  std::vector<double> final_acc, final_loss;
  Json per_run = Json::array();
  const bool has_accuracy = s.track == Track::Classification;
  const auto thr = threshold_rounds(runs, s.threshold, s.rounds);
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k];
    Json row;
    row["seed"] = r.seed;
    row["status"] = r.status == ExperimentResult::Status::Success ? "success" : "divergent";
    if (!r.divergence.empty()) row["divergence"] = r.divergence;
    row["rounds_completed"] = r.records.size();
    if (has_accuracy) {
      const bool censored = thr.rounds[k] > s.rounds;
      row["rounds_to_threshold"] = censored ? Json(nullptr) : Json(static_cast<int>(thr.rounds[k]));
      row["censored"] = censored;
    }
    const double fl = r.records.empty() ? r.initial_global_loss : r.records.back().global_loss;
    row["final_loss"] = fl;
    final_loss.push_back(fl);
    if (!r.records.empty() && !std::isnan(r.records.back().accuracy)) {
      row["final_accuracy"] = r.records.back().accuracy;
      final_acc.push_back(r.records.back().accuracy);
    }
    per_run.push_back(row);
  }
  j["runs"] = per_run;
  if (has_accuracy) {
    Json rt = stats_json(thr.rounds, s.ci_level);
    rt["censored"] = thr.censored;
    rt["censored_value"] = s.rounds + 1;
    j["rounds_to_threshold"] = rt;
  } else {
    j["rounds_to_threshold"] = nullptr;
  }
  j["final_accuracy"] = stats_json(final_acc, s.ci_level);
  j["final_loss"] = stats_json(final_loss, s.ci_level);
  return j;
}

inline Json report_json(const CheckReport& r) {
  Json j{{"name", r.name}, {"tested", r.tested}, {"violations", r.violations}, {"pass", r.pass}, {"detail", r.detail}};
  j["worst_margin"] = std::isfinite(r.worst_margin) ? Json(r.worst_margin) : Json(nullptr);
  j["statistic"] = r.statistic && std::isfinite(*r.statistic) ? Json(*r.statistic) : Json(nullptr);
  return j;
}

struct TheoryReport {
  Json json;
  bool all_pass = true;
};

// Constants, skew statistics, bounds and the runtime checks for a theory-track
// repeat set. Checks needing trajectories are skipped under partial participation.
inline TheoryReport theory_report(const ExperimentSpec& s, const RepeatSet& set) {
  TheoryReport out;
  auto& j = out.json;
  const auto& runs = set.runs;
  const std::vector<double> p(static_cast<std::size_t>(s.n_clients), 1.0 / s.n_clients);
  const int e_steps = s.local_epochs;
  const auto c = theory_constants(set.quadratics, p, runs, e_steps);
  j["constants"] = {{"mu", c.mu},         {"L", c.L},         {"sigma2", c.sigma2},
                    {"G_hat", c.G_hat},   {"Gamma", c.Gamma}, {"gamma", c.gamma},
                    {"w0_dist2", c.w0_dist2}, {"E_steps", c.E_steps}, {"n_clients", c.n_clients}};
  const auto skew = skew_trajectory(runs);
  j["rho_bar"] = skew.rho_bar ? Json(*skew.rho_bar) : Json(nullptr);
  j["rho_tilde"] = skew.rho_tilde ? Json(*skew.rho_tilde) : Json(nullptr);
  j["pi"] = skew.pi;
  j["Pi"] = skew.Pi;
  if (skew.rho_bar && *skew.rho_bar > 0.0) {
    const auto b = bound_V_E(c, *skew.rho_bar, skew.rho_tilde.value_or(*skew.rho_bar), e_steps);
    j["bound"] = {{"V", b.V}, {"E_err", b.E_err}, {"V_min", b.V_min}, {"lambda1", b.lambda1}, {"lambda2", b.lambda2}};
    const double p_min = *std::min_element(p.begin(), p.end());
    if (skew.pi > 0.0)
      j["final_bound"] = final_bound(skew.pi, p_min, c, static_cast<double>(runs.front().records.empty()
                                                                               ? 0
                                                                               : runs.front().records.back().t_step));
  }

  Json checks = Json::array();
  auto add = [&](const CheckReport& r) {
    checks.push_back(report_json(r));
    out.all_pass = out.all_pass && r.pass;
  };
  Stream rng(s.problem_seed, Purpose::Diagnostics);
  for (std::size_t i = 0; i < set.quadratics.size(); ++i) {
    auto r = check_lemma_smooth(set.quadratics[i], 1000, rng);
    r.name += "[client " + std::to_string(i) + "]";
    add(r);
  }
  const bool full = !runs.empty() && !runs.front().partial_participation;
  const bool complete = std::all_of(runs.begin(), runs.end(), [](const ExperimentResult& r) {
    return r.status == ExperimentResult::Status::Success;
  });
  if (full && complete && set.schedule && set.schedule->kind() == LrSchedule::Kind::InverseTheory) {
    add(check_discrepancy(runs, c, *set.schedule));
    if (skew.rho_bar) add(check_theorem_recursion(runs, c, skew, *set.schedule));
    if (skew.rho_bar && *skew.rho_bar > 0.0) {
      const auto b = bound_V_E(c, *skew.rho_bar, skew.rho_tilde.value_or(*skew.rho_bar), e_steps);
      add(check_corollary_rate(runs, c, b));
    }
  } else {
    j["skipped"] = "trajectory checks need full participation, completed runs and the inverse-theory schedule";
  }
  j["checks"] = checks;
  j["all_pass"] = out.all_pass;
  return out;
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace fedagg
