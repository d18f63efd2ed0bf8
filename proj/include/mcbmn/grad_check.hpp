// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mcbmn/autodiff.hpp"

namespace mcbmn {

struct GradCheckResult {
  double max_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_name;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Denominator guard: per-coordinate error is |a - n| / max(|a|, |n|, guard),
/// so gradients far below `guard` are compared absolutely.
inline constexpr double kGradCheckGuard = 1e-3;

/// Compares the tape gradient of f at theta against central differences
/// (f(theta + h e_i) - f(theta - h e_i)) / 2h, coordinate by coordinate.
GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& theta, double h = 1e-5,
                           double guard = kGradCheckGuard);

/// Same check over every element of a parameter set. `loss` rebuilds the
/// whole computation on the given tape; all randomness it consumes must be
/// replayed identically on each call.
GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                                      double h = 1e-5, double guard = kGradCheckGuard);

}  // namespace mcbmn
