// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mcbmn/error.hpp"

namespace mcbmn {

namespace {

void check_step(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) fail(ErrorCode::kInvalidArgument, "grad_check: step must be positive");
}

double finite_value(Var v) {
  const double x = v.value().item();
  if (!std::isfinite(x)) fail(ErrorCode::kNonFinite, "grad_check: non-finite function value");
  return x;
}

void update(GradCheckResult& result, std::size_t index, const std::string& name, double analytic, double numeric,
            double guard) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), guard});
  const double err = std::abs(analytic - numeric) / denom;
  if (result.coordinates == 0 || err > result.max_error) {
    result.max_error = err;
    result.worst_index = index;
    result.worst_name = name;
    result.worst_analytic = analytic;
    result.worst_numeric = numeric;
  }
  ++result.coordinates;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& theta, double h, double guard) {
  check_step(h);
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(theta);
    Var y = f(tape, x);
    finite_value(y);
    tape.backward(y);
    analytic = tape.grad(x);
  }
  GradCheckResult result;
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    Tape plus;
    const double fp = finite_value(f(plus, plus.leaf(probe)));
    probe[i] = theta[i] - h;
    Tape minus;
    const double fm = finite_value(f(minus, minus.leaf(probe)));
    probe[i] = theta[i];
    update(result, i, "theta", analytic[i], (fp - fm) / (2.0 * h), guard);
  }
  return result;
}

GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                                      double h, double guard) {
  check_step(h);
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var y = loss(tape);
    finite_value(y);
    tape.backward(y);
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  std::size_t flat = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i, ++flat) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      Tape plus;
      const double fp = finite_value(loss(plus));
      p.value[i] = saved - h;
      Tape minus;
      const double fm = finite_value(loss(minus));
      p.value[i] = saved;
      update(result, flat, p.name + "[" + std::to_string(i) + "]", analytic[k][i], (fp - fm) / (2.0 * h), guard);
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return result;
}

}  // namespace mcbmn
