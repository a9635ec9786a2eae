#include "cotmae/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cotmae::nn {

namespace {

double evaluate(const LossFn& f) {
  Tape<double> tape(false);
  const double v = f(tape).value().item();
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossFn& f, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto loss = f(tape);
    if (!std::isfinite(loss.value().item())) {
      throw std::runtime_error("grad_check: non-finite loss");
    }
    tape.backward(loss);
  }

  GradCheckResult result;
  Rng rng(opts.seed);
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    const std::size_t take = std::min(n, opts.coords_per_param);
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(coords[i], coords[i + rng.below(n - i)]);
    }
    coords.resize(take);
    std::sort(coords.begin(), coords.end());

    for (auto c : coords) {
      const double saved = p->value[c];
      p->value[c] = saved + opts.eps;
      const double up = evaluate(f);
      p->value[c] = saved - opts.eps;
      const double down = evaluate(f);
      p->value[c] = saved;

      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = p->grad[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        if (rel >= result.max_rel_error) {
          result.max_rel_error = rel;
          result.worst_param = p->name;
          result.worst_index = c;
          result.analytic = analytic;
          result.numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace cotmae::nn
