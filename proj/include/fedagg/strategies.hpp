#pragma once

// Aggregation strategies.
//
// Every strategy maps a RoundContext to coefficients on the probability
// simplex over the clients selected this round. The pure strategies rank
// clients by their loss gap F_i - F_i*; hybrids either switch between
// strategies in phases or blend two of them with a mixing weight lambda_r.

#include "fedagg/types.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace fedagg {

struct RoundContext {
  int round_index = 0;
  std::vector<int> client_ids;            // I_t, ascending
  std::vector<double> p;                  // p restricted to I_t and renormalised
  std::vector<ParamVector> local_models;  // w_{t+E}^i per selected client
  std::vector<double> eval_losses;        // F_i at the configured evaluation point
  std::vector<double> f_star;             // F_i*
  std::vector<double> accuracy_history;   // global accuracy after each past round
  ParamVector global_model_prev;          // w_t

  std::size_t size() const { return client_ids.size(); }

  std::vector<double> gaps() const {
    std::vector<double> g(eval_losses.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = eval_losses[i] - f_star[i];
    return g;
  }

  void validate() const {
    const auto n = client_ids.size();
    if (n == 0) throw std::invalid_argument("round context: no selected clients");
    if (p.size() != n || eval_losses.size() != n || f_star.size() != n)
      throw std::invalid_argument("round context: per-client fields disagree in length");
    double sum = 0.0;
    for (double v : p) {
      if (!(v > 0.0)) throw std::invalid_argument("round context: client weights must be positive");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("round context: client weights do not sum to 1");
    for (double v : eval_losses)
      if (!std::isfinite(v)) throw std::invalid_argument("round context: non-finite evaluation loss");
  }
};

struct CoefficientVector {
  std::vector<double> alpha;

  std::size_t size() const { return alpha.size(); }
  double operator[](std::size_t i) const { return alpha[i]; }

  bool on_simplex(double tol = 1e-12) const {
    double sum = 0.0;
    for (double a : alpha) {
      if (!(a >= 0.0)) return false;
      sum += a;
    }
    return std::abs(sum - 1.0) <= tol;
  }
};

namespace detail {

inline CoefficientVector normalized(std::vector<double> w) {
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= sum;
  return {std::move(w)};
}

// Positions sorted by gap, ties broken by lower client id.
inline std::vector<std::size_t> rank_by_gap(const RoundContext& ctx, bool worst_first) {
  const auto gaps = ctx.gaps();
  std::vector<std::size_t> order(gaps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (gaps[a] != gaps[b]) return worst_first ? gaps[a] > gaps[b] : gaps[a] < gaps[b];
    return ctx.client_ids[a] < ctx.client_ids[b];
  });
  return order;
}

inline CoefficientVector top_m(const RoundContext& ctx, double k, bool worst) {
  if (!(k > 0.0) || k > 1.0) throw std::invalid_argument("k must lie in (0, 1]");
  const auto n = ctx.size();
  const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(k * static_cast<double>(n))));
  const auto order = rank_by_gap(ctx, worst);
  std::vector<double> w(n, 0.0);
  for (std::size_t j = 0; j < std::min(m, n); ++j) w[order[j]] = ctx.p[order[j]];
  return normalized(std::move(w));
}

inline CoefficientVector one_hot(const RoundContext& ctx, bool worst) {
  std::vector<double> w(ctx.size(), 0.0);
  w[rank_by_gap(ctx, worst).front()] = 1.0;
  return {std::move(w)};
}

// p_i exp(sign * gap_i / T), with the extreme exponent subtracted first.
inline CoefficientVector tilted(const RoundContext& ctx, double temperature, double sign) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  const auto gaps = ctx.gaps();
  double top = -std::numeric_limits<double>::infinity();
  for (double g : gaps) top = std::max(top, sign * g);
  std::vector<double> w(gaps.size());
  for (std::size_t i = 0; i < gaps.size(); ++i) w[i] = ctx.p[i] * std::exp((sign * gaps[i] - top) / temperature);
  return normalized(std::move(w));
}

}  // namespace detail

inline CoefficientVector fedavg(const RoundContext& ctx) { return detail::normalized(ctx.p); }

inline CoefficientVector fedworse(const RoundContext& ctx) { return detail::one_hot(ctx, true); }
inline CoefficientVector fedbetter(const RoundContext& ctx) { return detail::one_hot(ctx, false); }

inline CoefficientVector fedworse_k(const RoundContext& ctx, double k) { return detail::top_m(ctx, k, true); }
inline CoefficientVector fedbetter_k(const RoundContext& ctx, double k) { return detail::top_m(ctx, k, false); }

inline CoefficientVector fedsoftworse(const RoundContext& ctx, double temperature) {
  return detail::tilted(ctx, temperature, 1.0);
}
inline CoefficientVector fedsoftbetter(const RoundContext& ctx, double temperature) {
  return detail::tilted(ctx, temperature, -1.0);
}

// Coordinate-wise sum_i alpha_i w_i over the selected clients' models.
inline ParamVector aggregate(const RoundContext& ctx, const CoefficientVector& alpha) {
  if (alpha.size() != ctx.local_models.size() || alpha.size() == 0)
    throw std::invalid_argument("aggregate: " + std::to_string(alpha.size()) + " coefficients for " +
                                std::to_string(ctx.local_models.size()) + " models");
  const auto d = ctx.local_models.front().size();
  ParamVector out = ParamVector::Zero(d);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    require_dim("aggregate", d, ctx.local_models[i].size());
    out += alpha[i] * ctx.local_models[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composable strategy values

struct Trigger {
  enum class Kind { Always, RoundBelow, AccuracyBelow };
  Kind kind = Kind::Always;
  double value = 0.0;

  static Trigger always() { return {}; }
  static Trigger round_below(int r) { return {Kind::RoundBelow, static_cast<double>(r)}; }
  static Trigger accuracy_below(double a) { return {Kind::AccuracyBelow, a}; }

  // A phase's trigger fires once its condition first stops holding.
  bool fired(const RoundContext& ctx) const {
    switch (kind) {
      case Kind::Always:
        return false;
      case Kind::RoundBelow:
        return ctx.round_index >= value;
      case Kind::AccuracyBelow:
        return std::any_of(ctx.accuracy_history.begin(), ctx.accuracy_history.end(),
                           [&](double a) { return a >= value; });
    }
    return false;
  }
};

// lambda_r = from + (to - from) * min(r / span, 1)
struct LambdaSchedule {
  double from = 0.0;
  double to = 1.0;
  int span = 1;

  static LambdaSchedule linear(double from, double to, int span) {
    if (!(from >= 0.0) || !(to <= 1.0) || !(from <= to) || span < 1)
      throw std::invalid_argument("lambda schedule must be non-decreasing within [0, 1] over a positive span");
    return {from, to, span};
  }
  static LambdaSchedule constant(double v) { return linear(v, v, 1); }

  double at(int round) const {
    const double frac = std::min(1.0, static_cast<double>(round) / static_cast<double>(span));
    return from + (to - from) * frac;
  }
};

class Strategy;

struct Phase;

inline CoefficientVector hybrid_discrete(const RoundContext& ctx, std::span<const Phase> phases);
inline CoefficientVector hybrid_annealed(const RoundContext& ctx, const Strategy& base, const Strategy& target,
                                         const LambdaSchedule& lambda);

class Strategy {
 public:
  enum class Pure { FedAvg, FedWorse, FedBetter, FedWorseK, FedBetterK, FedSoftWorse, FedSoftBetter };

  static Strategy fedavg() { return pure(Pure::FedAvg, 0.0); }
  static Strategy fedworse() { return pure(Pure::FedWorse, 0.0); }
  static Strategy fedbetter() { return pure(Pure::FedBetter, 0.0); }
  static Strategy fedworse_k(double k) { return pure(Pure::FedWorseK, check_k(k)); }
  static Strategy fedbetter_k(double k) { return pure(Pure::FedBetterK, check_k(k)); }
  static Strategy fedsoftworse(double t) { return pure(Pure::FedSoftWorse, check_t(t)); }
  static Strategy fedsoftbetter(double t) { return pure(Pure::FedSoftBetter, check_t(t)); }
  static Strategy discrete(std::vector<Phase> phases);
  static Strategy annealed(Strategy base, Strategy target, LambdaSchedule lambda);

  // Parses the strategy mini-language; see StrategyParseError for failures.
  static Strategy parse(std::string_view text);

  CoefficientVector coefficients(const RoundContext& ctx) const;

  // Canonical spelling that parses back to an equivalent strategy.
  std::string describe() const;

  bool is_hybrid() const;

 private:
  struct PureNode {
    Pure kind;
    double param;
  };
  struct DiscreteNode;
  struct AnnealNode;
  using Node = std::variant<PureNode, std::shared_ptr<const DiscreteNode>, std::shared_ptr<const AnnealNode>>;

  explicit Strategy(Node node) : node_(std::move(node)) {}

  static Strategy pure(Pure kind, double param) { return Strategy(PureNode{kind, param}); }
  static double check_k(double k) {
    if (!(k > 0.0) || k > 1.0) throw std::invalid_argument("k must lie in (0, 1]");
    return k;
  }
  static double check_t(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw std::invalid_argument("temperature must be positive and finite");
    return t;
  }

  Node node_;
};

struct Phase {
  Strategy strategy;
  Trigger trigger;
};

struct Strategy::DiscreteNode {
  std::vector<Phase> phases;
};

struct Strategy::AnnealNode {
  Strategy base;
  Strategy target;
  LambdaSchedule lambda;
};

// Uses the first phase whose trigger has not fired. Triggers fire
// monotonically, so an abandoned phase never comes back.
inline CoefficientVector hybrid_discrete(const RoundContext& ctx, std::span<const Phase> phases) {
  if (phases.empty()) throw std::invalid_argument("hybrid_discrete: empty phase list");
  for (const auto& phase : phases)
    if (!phase.trigger.fired(ctx)) return phase.strategy.coefficients(ctx);
  return phases.back().strategy.coefficients(ctx);
}

inline CoefficientVector hybrid_annealed(const RoundContext& ctx, const Strategy& base, const Strategy& target,
                                         const LambdaSchedule& lambda) {
  const double l = lambda.at(ctx.round_index);
  if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("hybrid_annealed: lambda outside [0, 1]");
  const auto a = base.coefficients(ctx);
  const auto b = target.coefficients(ctx);
  CoefficientVector out;
  out.alpha.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.alpha[i] = (1.0 - l) * a[i] + l * b[i];
  return out;
}

inline Strategy Strategy::discrete(std::vector<Phase> phases) {
  if (phases.empty()) throw std::invalid_argument("discrete hybrid needs at least one phase");
  return Strategy(std::make_shared<const DiscreteNode>(DiscreteNode{std::move(phases)}));
}

inline Strategy Strategy::annealed(Strategy base, Strategy target, LambdaSchedule lambda) {
  return Strategy(std::make_shared<const AnnealNode>(AnnealNode{std::move(base), std::move(target), lambda}));
}

inline bool Strategy::is_hybrid() const { return !std::holds_alternative<PureNode>(node_); }

inline CoefficientVector Strategy::coefficients(const RoundContext& ctx) const {
  if (const auto* p = std::get_if<PureNode>(&node_)) {
    switch (p->kind) {
      case Pure::FedAvg:
        return fedagg::fedavg(ctx);
      case Pure::FedWorse:
        return fedagg::fedworse(ctx);
      case Pure::FedBetter:
        return fedagg::fedbetter(ctx);
      case Pure::FedWorseK:
        return fedagg::fedworse_k(ctx, p->param);
      case Pure::FedBetterK:
        return fedagg::fedbetter_k(ctx, p->param);
      case Pure::FedSoftWorse:
        return fedagg::fedsoftworse(ctx, p->param);
      case Pure::FedSoftBetter:
        return fedagg::fedsoftbetter(ctx, p->param);
    }
  }
  if (const auto* d = std::get_if<std::shared_ptr<const DiscreteNode>>(&node_)) return hybrid_discrete(ctx, (*d)->phases);
  const auto& a = std::get<std::shared_ptr<const AnnealNode>>(node_);
  return hybrid_annealed(ctx, a->base, a->target, a->lambda);
}

namespace detail {

inline std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline std::string Strategy::describe() const {
  using detail::format_number;
  if (const auto* p = std::get_if<PureNode>(&node_)) {
    switch (p->kind) {
      case Pure::FedAvg:
        return "fedavg";
      case Pure::FedWorse:
        return "fedworse";
      case Pure::FedBetter:
        return "fedbetter";
      case Pure::FedWorseK:
        return "fedworse_k(k=" + format_number(p->param) + ")";
      case Pure::FedBetterK:
        return "fedbetter_k(k=" + format_number(p->param) + ")";
      case Pure::FedSoftWorse:
        return "fedsoftworse(T=" + format_number(p->param) + ")";
      case Pure::FedSoftBetter:
        return "fedsoftbetter(T=" + format_number(p->param) + ")";
    }
  }
  if (const auto* d = std::get_if<std::shared_ptr<const DiscreteNode>>(&node_)) {
    std::string out = "discrete[";
    for (std::size_t i = 0; i < (*d)->phases.size(); ++i) {
      const auto& ph = (*d)->phases[i];
      if (i > 0) out += " -> ";
      out += ph.strategy.describe();
      if (ph.trigger.kind == Trigger::Kind::RoundBelow)
        out += "@round<" + format_number(ph.trigger.value);
      else if (ph.trigger.kind == Trigger::Kind::AccuracyBelow)
        out += "@acc<" + format_number(ph.trigger.value);
    }
    return out + "]";
  }
  const auto& a = std::get<std::shared_ptr<const AnnealNode>>(node_);
  return "anneal[" + a->base.describe() + " -> " + a->target.describe() + "; lambda=linear(" +
         format_number(a->lambda.from) + "," + format_number(a->lambda.to) + "," + std::to_string(a->lambda.span) +
         ")]";
}

// ---------------------------------------------------------------------------
// Strategy mini-language
//
//   strategy := name [ "(" key "=" number { "," key "=" number } ")" ]
//             | "discrete" "[" phase { "->" phase } "]"
//             | "anneal" "[" strategy "->" strategy ";" "lambda" "=" lambda "]"
//   phase    := strategy [ "@" ( "round" "<" int | "acc" "<" number | "always" ) ]
//   lambda   := "linear" "(" from "," to "," rounds ")" | "const" "(" value ")"
//
// Pure names: fedavg, fedworse, fedbetter, fedworse_k(k=), fedbetter_k(k=),
// fedsoftworse(T=), fedsoftbetter(T=). Named hybrids switch at round
// `switch` (default 20) with temperature T (default 0.2):
//   fedsoftbetteravg   = discrete[fedsoftbetter@round<switch -> fedavg]
//   fedsoftworseavg    = discrete[fedsoftworse@round<switch -> fedavg]
//   fedavgsoftbetter   = discrete[fedavg@round<switch -> fedsoftbetter]
//   fedavgsoftworse    = discrete[fedavg@round<switch -> fedsoftworse]
//   fedsoftbetteravgsoftworse
//     = discrete[fedsoftbetter@round<switch -> fedavg@round<switch2 -> fedsoftworse]
//       with switch2 defaulting to twice switch.
// Names are case-insensitive.

class StrategyParseError : public std::invalid_argument {
 public:
  StrategyParseError(std::size_t position, const std::string& message)
      : std::invalid_argument("strategy parse error at position " + std::to_string(position) + ": " + message),
        position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

inline constexpr double kDefaultTemperature = 0.2;
inline constexpr int kDefaultSwitchRound = 20;

namespace detail {

class StrategyParser {
 public:
  explicit StrategyParser(std::string_view text) : text_(text) {}

  Strategy parse_all() {
    Strategy s = parse_strategy();
    skip_ws();
    if (pos_ != text_.size()) fail("unexpected trailing input '" + std::string(text_.substr(pos_)) + "'");
    return s;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw StrategyParseError(pos_, msg); }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool accept(std::string_view tok) {
    skip_ws();
    if (text_.substr(pos_, tok.size()) == tok) {
      pos_ += tok.size();
      return true;
    }
    return false;
  }

  void expect(std::string_view tok) {
    if (!accept(tok)) fail("expected '" + std::string(tok) + "'");
  }

  std::string ident() {
    skip_ws();
    const auto start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
      ++pos_;
    if (start == pos_) fail("expected a name");
    std::string out(text_.substr(start, pos_ - start));
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }

  double number() {
    skip_ws();
    const auto start = pos_;
    double v = 0.0;
    const auto res = std::from_chars(text_.data() + pos_, text_.data() + text_.size(), v);
    if (res.ec != std::errc()) fail("expected a number");
    pos_ = static_cast<std::size_t>(res.ptr - text_.data());
    if (!std::isfinite(v)) {
      pos_ = start;
      fail("number must be finite");
    }
    return v;
  }

  int integer() {
    const auto start = pos_;
    const double v = number();
    if (v != std::floor(v) || v < 0 || v > 1e9) {
      pos_ = start;
      fail("expected a non-negative integer");
    }
    return static_cast<int>(v);
  }

  struct Args {
    std::vector<std::pair<std::string, double>> values;
    std::size_t position = 0;

    std::optional<double> take(std::initializer_list<std::string_view> names) {
      for (auto it = values.begin(); it != values.end(); ++it)
        for (auto n : names)
          if (it->first == n) {
            const double v = it->second;
            values.erase(it);
            return v;
          }
      return std::nullopt;
    }
  };

  Args args() {
    Args a;
    skip_ws();
    a.position = pos_;
    if (!accept("(")) return a;
    if (accept(")")) return a;
    do {
      auto key = ident();
      expect("=");
      a.values.emplace_back(std::move(key), number());
    } while (accept(","));
    expect(")");
    return a;
  }

  template <typename F>
  Strategy guarded(std::size_t at, F&& make) {
    try {
      return make();
    } catch (const StrategyParseError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw StrategyParseError(at, e.what());
    }
  }

  Strategy parse_strategy() {
    skip_ws();
    const auto at = pos_;
    const auto name = ident();
    if (name == "discrete") return parse_discrete();
    if (name == "anneal") return parse_anneal();

    auto a = args();
    const auto leftover = [&] {
      if (!a.values.empty()) throw StrategyParseError(a.position, "unknown parameter '" + a.values.front().first +
                                                                      "' for " + name);
    };
    Strategy s = guarded(at, [&]() -> Strategy {
      if (name == "fedavg") { leftover(); return Strategy::fedavg(); }
      if (name == "fedworse") { leftover(); return Strategy::fedworse(); }
      if (name == "fedbetter") { leftover(); return Strategy::fedbetter(); }
      if (name == "fedworse_k" || name == "fedworsek") {
        const auto k = a.take({"k"});
        if (!k) throw StrategyParseError(a.position, name + " requires k=");
        { leftover(); return Strategy::fedworse_k(*k); }
      }
      if (name == "fedbetter_k" || name == "fedbetterk") {
        const auto k = a.take({"k"});
        if (!k) throw StrategyParseError(a.position, name + " requires k=");
        { leftover(); return Strategy::fedbetter_k(*k); }
      }
      const double t = a.take({"t", "temperature"}).value_or(kDefaultTemperature);
      if (name == "fedsoftworse") { leftover(); return Strategy::fedsoftworse(t); }
      if (name == "fedsoftbetter") { leftover(); return Strategy::fedsoftbetter(t); }

      const auto sw = a.take({"switch"}).value_or(kDefaultSwitchRound);
      if (sw < 0 || sw != std::floor(sw)) throw std::invalid_argument("switch must be a non-negative integer");
      const auto r = static_cast<int>(sw);
      const auto two = [&](Strategy first, Strategy second) {
        return Strategy::discrete({{std::move(first), Trigger::round_below(r)}, {std::move(second), Trigger::always()}});
      };
      if (name == "fedsoftbetteravg") { leftover(); return two(Strategy::fedsoftbetter(t), Strategy::fedavg()); }
      if (name == "fedsoftworseavg") { leftover(); return two(Strategy::fedsoftworse(t), Strategy::fedavg()); }
      if (name == "fedavgsoftbetter") { leftover(); return two(Strategy::fedavg(), Strategy::fedsoftbetter(t)); }
      if (name == "fedavgsoftworse") { leftover(); return two(Strategy::fedavg(), Strategy::fedsoftworse(t)); }
      if (name == "fedsoftbetteravgsoftworse") {
        const auto r2 = static_cast<int>(a.take({"switch2"}).value_or(2.0 * r));
        leftover();
        return Strategy::discrete({{Strategy::fedsoftbetter(t), Trigger::round_below(r)},
                                   {Strategy::fedavg(), Trigger::round_below(r2)},
                                   {Strategy::fedsoftworse(t), Trigger::always()}});
      }
      throw StrategyParseError(at, "unknown strategy '" + name + "'");
    });
    return s;
  }

  Strategy parse_discrete() {
    expect("[");
    std::vector<Phase> phases;
    do {
      Strategy s = parse_strategy();
      Trigger trig = Trigger::always();
      if (accept("@")) {
        const auto kind = ident();
        if (kind == "round") {
          expect("<");
          trig = Trigger::round_below(integer());
        } else if (kind == "acc" || kind == "accuracy") {
          expect("<");
          const auto at = pos_;
          const double v = number();
          if (!(v > 0.0 && v <= 1.0)) throw StrategyParseError(at, "accuracy threshold must lie in (0, 1]");
          trig = Trigger::accuracy_below(v);
        } else if (kind != "always") {
          fail("unknown trigger '" + kind + "' (expected round<N, acc<X or always)");
        }
      }
      phases.push_back({std::move(s), trig});
    } while (accept("->"));
    expect("]");
    return Strategy::discrete(std::move(phases));
  }

  Strategy parse_anneal() {
    expect("[");
    Strategy base = parse_strategy();
    expect("->");
    Strategy target = parse_strategy();
    expect(";");
    if (ident() != "lambda") fail("expected 'lambda='");
    expect("=");
    const auto at = pos_;
    const auto kind = ident();
    LambdaSchedule lambda;
    try {
      if (kind == "linear") {
        expect("(");
        const double from = number();
        expect(",");
        const double to = number();
        expect(",");
        const int span = integer();
        expect(")");
        lambda = LambdaSchedule::linear(from, to, span);
      } else if (kind == "const") {
        expect("(");
        const double v = number();
        expect(")");
        lambda = LambdaSchedule::constant(v);
      } else {
        fail("unknown lambda schedule '" + kind + "' (expected linear or const)");
      }
    } catch (const StrategyParseError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw StrategyParseError(at, e.what());
    }
    expect("]");
    return Strategy::annealed(std::move(base), std::move(target), lambda);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Strategy Strategy::parse(std::string_view text) { return detail::StrategyParser(text).parse_all(); }

}  // namespace fedagg
