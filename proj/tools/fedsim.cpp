// fedsim: run federated experiments from JSON spec files.
//
//   fedsim run presets/noniid-fmnist-like.json --repeats 20 --strategy "fedsoftbetter(T=0.2)"
//   fedsim compare presets/noniid-fmnist-like.json --strategy fedavg --strategy fedsoftbetter
//
// Exit codes: 0 success, 10 configuration error, 20 divergence, 30 failed check.

#include "fedagg/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>

namespace {

using fedagg::Json;

constexpr int kExitConfig = 10;
constexpr int kExitDivergence = 20;
constexpr int kExitCheck = 30;

struct Overrides {
  std::optional<std::string> strategy;
  std::optional<int> repeats;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::optional<int> workers;
  std::optional<double> participation;
  std::optional<double> threshold;
  std::optional<std::string> loss_eval;
  std::optional<std::string> out;
};

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fedagg::SpecError("cannot open spec file " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw fedagg::SpecError(path + ": " + e.what());
  }
}

// Applies command-line overrides to the raw document and lists them.
std::vector<std::string> apply_overrides(Json& j, const Overrides& o) {
  std::vector<std::string> applied;
  auto set = [&](const std::string& section, const std::string& key, Json value) {
    applied.push_back((section.empty() ? "" : section + ".") + key + "=" + value.dump());
    if (section.empty())
      j[key] = std::move(value);
    else
      j[section][key] = std::move(value);
  };
  if (o.strategy) set("", "strategy", *o.strategy);
  if (o.repeats) set("", "repeats", *o.repeats);
  if (o.seed) set("", "seed", *o.seed);
  if (o.workers) set("", "workers", *o.workers);
  if (o.rounds) set("federation", "rounds", *o.rounds);
  if (o.participation) set("federation", "participation", *o.participation);
  if (o.loss_eval) set("federation", "loss_eval", *o.loss_eval);
  if (o.threshold) set("metrics", "threshold", *o.threshold);
  return applied;
}

std::string output_root(const fedagg::ExperimentSpec& spec, const Overrides& o) {
  if (o.out) return *o.out;
  if (const char* env = std::getenv("FEDSIM_OUTPUT_DIR"); env && *env) return env;
  return spec.output_dir;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-')
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '_')
      out += '_';
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "strategy" : out;
}

struct Outcome {
  Json summary;
  bool diverged = false;
  bool check_failed = false;
};

Outcome execute(const fedagg::ExperimentSpec& spec, const std::vector<std::string>& overrides,
                const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Json echo = fedagg::to_json(spec);
  echo["echo"] = {{"version", fedagg::kVersion}, {"config_hash", fedagg::config_hash(spec)}, {"overrides", overrides}};
  fedagg::write_atomic(dir / "config.json", echo.dump(2) + "\n");

  const auto set = fedagg::run_repeats(spec);
  Outcome out;
  for (const auto& r : set.runs) {
    fedagg::write_atomic(dir / "curves" / ("seed_" + std::to_string(r.seed) + ".csv"), fedagg::curve_csv(r));
    if (r.status == fedagg::ExperimentResult::Status::Divergent) {
      out.diverged = true;
      std::cerr << "seed " << r.seed << ": " << r.divergence << "\n";
    }
  }
  out.summary = fedagg::summarize(spec, set.runs);
  if (spec.track == fedagg::Track::TheoryQuadratic && spec.theory_report) {
    auto report = fedagg::theory_report(spec, set);
    report.json["config_hash"] = fedagg::config_hash(spec);
    report.json["version"] = fedagg::kVersion;
    fedagg::write_atomic(dir / "theory_report.json", report.json.dump(2) + "\n");
    out.summary["theory_checks_pass"] = report.all_pass;
    for (const auto& c : report.json["checks"])
      std::cout << (c["pass"].get<bool>() ? "[PASS] " : "[FAIL] ") << c["name"].get<std::string>() << ": "
                << c["detail"].get<std::string>() << "\n";
    out.check_failed = spec.fail_on_check && !report.all_pass;
  }
  fedagg::write_atomic(dir / "summary.json", out.summary.dump(2) + "\n");
  return out;
}

std::string fmt(const Json& v, int precision = 3) {
  if (v.is_null()) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v.get<double>();
  return s.str();
}

std::string stats_text(const Json& st, int precision = 3) {
  return fmt(st["mean"], precision) + " +- " + fmt(st["ci_half_width"], precision);
}

int exit_code(bool diverged, bool check_failed) {
  if (diverged) return kExitDivergence;
  if (check_failed) return kExitCheck;
  return 0;
}

int cmd_run(const std::string& path, const Overrides& o) {
  Json raw = read_json(path);
  const auto applied = apply_overrides(raw, o);
  const auto spec = fedagg::parse_spec(raw);
  const std::filesystem::path dir = output_root(spec, o);
  const auto res = execute(spec, applied, dir);
  const auto& s = res.summary;
  const int pct = static_cast<int>(std::lround(spec.threshold * 100));
  std::cout << s["strategy"].get<std::string>() << ": ";
  if (!s["rounds_to_threshold"].is_null())
    std::cout << "mean R" << pct << " " << stats_text(s["rounds_to_threshold"], 2) << " ("
              << s["rounds_to_threshold"]["censored"].get<int>() << " of " << spec.repeats << " censored at "
              << spec.rounds + 1 << "), final accuracy " << stats_text(s["final_accuracy"]) << ", ";
  std::cout << "final loss " << stats_text(s["final_loss"], 4) << "\n";
  std::cout << "outputs in " << dir.string() << " (config " << fedagg::config_hash(spec) << ")\n";
  return exit_code(res.diverged, res.check_failed);
}

int cmd_compare(const std::vector<std::string>& paths, const std::vector<std::string>& strategies, Overrides o) {
  std::vector<std::pair<Json, std::string>> docs;  // raw document and its origin
  if (paths.size() > 1) {
    if (!strategies.empty()) throw fedagg::SpecError("compare: give either several spec files or --strategy, not both");
    Json base;
    for (const auto& p : paths) {
      Json raw = read_json(p);
      Json stripped = raw;
      stripped.erase("strategy");
      stripped.erase("echo");
      if (docs.empty())
        base = stripped;
      else if (stripped != base)
        throw fedagg::SpecError("compare: " + p + " differs from " + paths.front() + " beyond the strategy");
      docs.emplace_back(std::move(raw), p);
    }
  } else {
    const Json raw = read_json(paths.front());
    if (strategies.empty()) {
      docs.emplace_back(raw, paths.front());
    } else {
      for (const auto& st : strategies) {
        Json copy = raw;
        copy["strategy"] = st;
        docs.emplace_back(std::move(copy), paths.front());
      }
    }
  }

  std::vector<std::pair<fedagg::ExperimentSpec, std::vector<std::string>>> specs;
  for (auto& [raw, origin] : docs) {
    auto applied = apply_overrides(raw, o);
    specs.emplace_back(fedagg::parse_spec(raw), std::move(applied));
  }
  const std::filesystem::path root = output_root(specs.front().first, o);

  bool diverged = false, check_failed = false;
  std::ostringstream csv, text;
  const int pct = static_cast<int>(std::lround(specs.front().first.threshold * 100));
  csv << "strategy,r_mean,r_ci_half_width,r_censored,final_accuracy_mean,final_accuracy_ci_half_width,"
         "final_loss_mean,final_loss_ci_half_width,repeats\n";
  text << std::left << std::setw(44) << "Strategy" << std::setw(22) << ("R" + std::to_string(pct)) << std::setw(22)
       << "final accuracy" << "final loss\n";
  std::map<std::string, int> seen;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& [spec, applied] = specs[k];
    std::string name = slug(fedagg::Strategy::parse(spec.strategy).describe());
    if (int n = seen[name]++; n > 0) name += "_" + std::to_string(n);
    const auto res = execute(spec, applied, root / name);
    diverged = diverged || res.diverged;
    check_failed = check_failed || res.check_failed;
    const auto& s = res.summary;
    auto num = [](const Json& v) { return v.is_null() ? std::string() : fedagg::format_real(v.get<double>()); };
    const Json none{{"mean", nullptr}, {"ci_half_width", nullptr}, {"censored", 0}};
    const Json& rt = s["rounds_to_threshold"].is_null() ? none : s["rounds_to_threshold"];
    csv << fedagg::csv_field(s["strategy"].get<std::string>()) << ',' << num(rt["mean"]) << ','
        << num(rt["ci_half_width"]) << ',' << rt["censored"].get<int>() << ',' << num(s["final_accuracy"]["mean"]) << ',' << num(s["final_accuracy"]["ci_half_width"]) << ','
        << num(s["final_loss"]["mean"]) << ',' << num(s["final_loss"]["ci_half_width"]) << ',' << spec.repeats
        << '\n';
    std::string rcol = stats_text(rt, 2);
    if (int c = rt["censored"].get<int>(); c > 0) rcol += " (" + std::to_string(c) + "c)";
    text << std::left << std::setw(44) << s["strategy"].get<std::string>() << std::setw(22) << rcol << std::setw(22)
         << stats_text(s["final_accuracy"]) << stats_text(s["final_loss"], 4) << "\n";
  }
  fedagg::write_atomic(root / "comparison.csv", csv.str());
  fedagg::write_atomic(root / "comparison.txt", text.str());
  std::cout << text.str();
  std::cout << "outputs in " << root.string() << "\n";
  return exit_code(diverged, check_failed);
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--repeats", o.repeats, "number of seeded repeats (seeds base, base+1, ...)");
  cmd->add_option("--seed", o.seed, "base seed");
  cmd->add_option("--rounds", o.rounds, "communication rounds T");
  cmd->add_option("--workers", o.workers, "client-update worker threads");
  cmd->add_option("--participation", o.participation, "fraction C of clients per round");
  cmd->add_option("--threshold", o.threshold, "accuracy threshold for the R metric");
  cmd->add_option("--loss-eval", o.loss_eval, "global_at_round_start or local_at_round_end");
  cmd->add_option("--out", o.out, "output directory (else FEDSIM_OUTPUT_DIR, else output.dir from the spec file)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic federated-learning simulator"};
  app.set_version_flag("--version", std::string(fedagg::kVersion));
  app.require_subcommand(1);

  Overrides run_o;
  std::string run_path;
  auto* run = app.add_subcommand("run", "run one experiment spec");
  run->add_option("spec", run_path, "experiment spec (JSON)")->required();
  run->add_option("--strategy", run_o.strategy, "aggregation strategy, e.g. fedsoftbetter(T=0.2)");
  add_overrides(run, run_o);

  Overrides cmp_o;
  std::vector<std::string> cmp_paths, cmp_strategies;
  auto* cmp = app.add_subcommand("compare", "compare strategies on a shared spec");
  cmp->add_option("specs", cmp_paths, "one spec with --strategy flags, or several specs differing only in strategy")
      ->required();
  cmp->add_option("--strategy", cmp_strategies, "strategy to include (repeatable)");
  add_overrides(cmp, cmp_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_path, run_o);
    return cmd_compare(cmp_paths, cmp_strategies, cmp_o);
  } catch (const fedagg::SpecError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedagg::StrategyParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedagg::IdxError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
