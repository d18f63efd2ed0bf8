// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcbmn/rng.hpp"
#include "mcbmn/tensor.hpp"

namespace mcbmn {

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; only valid while the
/// owning tape is alive and has not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Named trainable leaf. `grad` always has the same shape as `value`.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

/// Sparse per-node gradient buffers used during one backward sweep.
class GradBuffers {
 public:
  GradBuffers(const Tape& tape, std::size_t n) : tape_(&tape), grads_(n) {}

  bool wants(std::uint32_t id) const;
  /// Zero-initialised on first access.
  Tensor& slot(std::uint32_t id);
  const Tensor* find(std::uint32_t id) const;

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

/// Records differentiable operations in execution order (which is a
/// topological order by construction) and runs the reverse sweep.
///
/// Reset rule: backward() may run once per recording; afterwards leaf
/// gradients stay readable through grad() until clear(). gradient() is a
/// side-effect-free sweep that can run any number of times mid-recording.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out_grad, GradBuffers& grads)>;

  Tape() = default;
  /// A tape built with grad_enabled == false registers parameters as
  /// constants; explicit leaves still track gradients.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf whose gradient is read back with grad().
  Var leaf(Tensor value);
  /// Parameter leaf; backward() accumulates into `p.grad`. Registering the
  /// same parameter twice returns the same node.
  Var param(Parameter& p);

  /// For op implementations: records a node whose value depends on `inputs`.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn, const char* op);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Shape& shape_of(std::uint32_t id) const { return nodes_[id].value.shape(); }

  void backward(Var loss);
  /// d(output)/d(wrt) without touching parameter gradients. `output` must be
  /// scalar.
  Tensor gradient(Var output, Var wrt) const;
  /// Gradient of the last backward() loss with respect to `v` (zeros if `v`
  /// did not influence it).
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  void sweep(Var loss, GradBuffers& grads, std::uint32_t stop) const;

  std::deque<Node> nodes_;  // stable references on append
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
  std::vector<Tensor> leaf_grads_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Binary elementwise ops require identical shapes;
// the only broadcasts are the explicitly named ones (add_bias, scale_rows).

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var softplus(Var x);
/// alpha * (exp(x) - 1) for x < 0, x otherwise.
Var elu(Var x, double alpha);

/// x[r, c] + b[c].
Var add_bias(Var x, Var b);
/// x[r, c] * w[r] with w of shape [R x 1].
Var scale_rows(Var x, Var w);
/// Row-wise inner product, [R x C] . [R x C] -> [R x 1].
Var dot_rows(Var a, Var b);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
/// Columns of table [E x V] selected by ids, laid out as rows: [ids x E].
Var gather_cols(Var table, std::span<const int> ids);
/// x[r, idx[r]] -> [R x 1].
Var pick(Var x, std::span<const int> idx);
/// Row r of `fresh` where keep[r] is set, else row r of `held`.
Var blend_rows(Var fresh, Var held, std::span<const char> keep);

Var softmax_rows(Var x);
/// Max-shifted log-sum-exp per row, [R x C] -> [R x 1].
Var logsumexp_rows(Var x);
/// log((1/C) sum_c exp(x[r, c])) per row; exactly x[r, 0] when a row is
/// constant.
Var log_mean_exp_rows(Var x);

Var sum(Var x);
Var mean(Var x);
/// sum_i w[i] * x[i] for a constant weight tensor of the same shape.
Var weighted_sum(Var x, const Tensor& w);
/// Elementwise product with a constant (a fixed dropout mask, a noise draw).
Var mul_const(Var x, const Tensor& c);

/// Identity forward; backward multiplies the upstream gradient by -gamma.
Var gradient_reversal(Var x, double gamma);
/// Identity forward; no gradient flows back.
Var stop_gradient(Var x);

// ---------------------------------------------------------------------------
// Plain (non-recorded) numerics.

struct SoftmaxResult {
  Tensor probs;
  double lse = 0.0;
};

/// Softmax and log-sum-exp of a vector, computed with max subtraction.
SoftmaxResult softmax_logsumexp(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Dropout.

enum class DropoutKind { kNone, kBernoulli, kGaussian };

std::string_view to_string(DropoutKind kind);
DropoutKind parse_dropout_kind(std::string_view name);

/// Multiplicative dropout mask. Bernoulli masks are inverted (0 or 1/(1-p));
/// Gaussian masks are N(1, p/(1-p)). kNone and p == 0 give all-ones.
Tensor dropout_mask(const Shape& shape, double p, DropoutKind kind, RngStream& rng);
/// Row r is drawn from rngs[r]; rows are independent of batch composition.
Tensor dropout_mask_rows(std::size_t rows, std::size_t cols, double p, DropoutKind kind,
                         std::span<RngStream> rngs);

Var dropout(Var x, double p, DropoutKind kind, RngStream& rng);
Var dropout(Var x, const Tensor& fixed_mask);

void check_dropout_rate(double p);

}  // namespace mcbmn
