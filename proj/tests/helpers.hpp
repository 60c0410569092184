#pragma once

#include "fedagg/strategies.hpp"

#include <vector>

namespace fedagg::testing {

// Context with the given p and gaps (F_i* = 0, eval losses = gaps) and
// scalar local models 0, 1, 2, ...
inline RoundContext context(std::vector<double> p, std::vector<double> gaps, int round = 0) {
  RoundContext ctx;
  ctx.round_index = round;
  for (std::size_t i = 0; i < p.size(); ++i) {
    ctx.client_ids.push_back(static_cast<int>(i));
    ctx.f_star.push_back(0.0);
    ctx.local_models.push_back(ParamVector::Constant(1, static_cast<double>(i)));
  }
  ctx.p = std::move(p);
  ctx.eval_losses = std::move(gaps);
  ctx.global_model_prev = ParamVector::Zero(1);
  return ctx;
}

inline RoundContext uniform_context(std::size_t n, std::vector<double> gaps, int round = 0) {
  return context(std::vector<double>(n, 1.0 / static_cast<double>(n)), std::move(gaps), round);
}

}  // namespace fedagg::testing
