#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cotmae/common.hpp"
#include "cotmae/nn/tape.hpp"

namespace cotmae::nn {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates sampled per parameter; all of them when the parameter is
  /// smaller.
  std::size_t coords_per_param = 200;
  /// Denominator floor of the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Builds the scalar loss on the given tape. Must be deterministic.
using LossFn = std::function<Var<double>(Tape<double>&)>;

/// Compares analytic gradients of `f` with central differences
/// (f(θ+eps) - f(θ-eps)) / 2eps on a random subsample of coordinates.
/// Relative error is |a - n| / max(|a|, |n|, floor). Parameter grads are
/// overwritten with the analytic gradient. Throws on a non-finite loss.
GradCheckResult grad_check(const LossFn& f, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& opts = {});

}  // namespace cotmae::nn
