// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "mcbmn/error.hpp"

namespace mcbmn {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

Tape& tape_of(Var a) {
  if (a.tape == nullptr) fail(ErrorCode::kGraphError, "operation on a detached Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) fail(ErrorCode::kGraphError, "operands recorded on different tapes");
  return tape_of(a);
}

std::uint32_t next_id(const Tape& t) { return static_cast<std::uint32_t>(t.size()); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() > 2) fail(ErrorCode::kDimensionMismatch, std::string(op) + ": needs rank <= 2, got " + shape_string(t.shape()));
}

// Elementwise unary op: `deriv(x, y)` is dy/dx evaluated pointwise.
template <typename Fwd, typename Deriv>
Var unary(Var x, const char* op, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::uint32_t self = next_id(t);
  const Tape* tp = &t;
  const std::uint32_t xi = x.id;
  return t.record(std::move(out), {x},
                  [tp, xi, self, deriv](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    const Tensor& xv = tp->value(Var{const_cast<Tape*>(tp), xi});
                    const Tensor& yv = tp->value(Var{const_cast<Tape*>(tp), self});
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
                  },
                  op);
}

const Tensor& val(const Tape* tp, std::uint32_t id) { return tp->value(Var{const_cast<Tape*>(tp), id}); }

}  // namespace

const Tensor& Var::value() const {
  if (tape == nullptr) fail(ErrorCode::kGraphError, "value() of a detached Var");
  return tape->value(*this);
}

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
    return;
  }
  std::fill(grad.data().begin(), grad.data().end(), 0.0);
}

bool GradBuffers::wants(std::uint32_t id) const { return tape_->requires_grad(id); }

Tensor& GradBuffers::slot(std::uint32_t id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(tape_->shape_of(id));
  return g;
}

const Tensor* GradBuffers::find(std::uint32_t id) const {
  const Tensor& g = grads_[id];
  return g.empty() ? nullptr : &g;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back(Node{std::move(value), nullptr, nullptr, false});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  nodes_.push_back(Node{std::move(value), nullptr, nullptr, true});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  require_finite(p.value, p.name.c_str());
  nodes_.push_back(Node{p.value, nullptr, grad_enabled_ ? &p : nullptr, grad_enabled_});
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn), op);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn, const char* op) {
  if (!value.all_finite()) fail(ErrorCode::kNonFinite, std::string("non-finite value produced by ") + op);
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) fail(ErrorCode::kGraphError, std::string(op) + ": input recorded on another tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs ? std::move(fn) : nullptr, nullptr, needs});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::sweep(Var loss, GradBuffers& grads, std::uint32_t stop) const {
  grads.slot(loss.id)[0] = 1.0;
  for (std::int64_t i = loss.id; i >= static_cast<std::int64_t>(stop); --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.backward) continue;
    const Tensor* g = grads.find(static_cast<std::uint32_t>(i));
    if (g == nullptr) continue;
    node.backward(*g, grads);
  }
}

void Tape::backward(Var loss) {
  if (loss.tape != this) fail(ErrorCode::kGraphError, "backward: loss belongs to another tape");
  if (backward_done_) fail(ErrorCode::kGraphError, "backward already ran on this tape; clear() it first");
  if (value(loss).size() != 1) {
    fail(ErrorCode::kDimensionMismatch, "backward needs a scalar loss, got " + shape_string(value(loss).shape()));
  }
  if (!nodes_[loss.id].requires_grad) fail(ErrorCode::kGraphError, "backward on a detached graph (no trainable inputs)");
  GradBuffers grads(*this, nodes_.size());
  sweep(loss, grads, 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& node = nodes_[i];
    if (node.param == nullptr) continue;
    if (const Tensor* g = grads.find(static_cast<std::uint32_t>(i))) {
      Tensor& pg = node.param->grad;
      if (pg.shape() != node.value.shape()) pg = Tensor(node.value.shape());
      for (std::size_t k = 0; k < g->size(); ++k) pg[k] += (*g)[k];
    }
  }
  leaf_grads_.assign(nodes_.size(), Tensor());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (const Tensor* g = grads.find(static_cast<std::uint32_t>(i))) leaf_grads_[i] = *g;
  }
  backward_done_ = true;
}

Tensor Tape::gradient(Var output, Var wrt) const {
  if (output.tape != this || wrt.tape != this) fail(ErrorCode::kGraphError, "gradient: foreign Var");
  if (value(output).size() != 1) fail(ErrorCode::kDimensionMismatch, "gradient needs a scalar output");
  if (!nodes_[wrt.id].requires_grad || wrt.id > output.id) return Tensor(value(wrt).shape());
  GradBuffers grads(*this, nodes_.size());
  sweep(output, grads, wrt.id);
  if (const Tensor* g = grads.find(wrt.id)) return *g;
  return Tensor(value(wrt).shape());
}

Tensor Tape::grad(Var v) const {
  if (!backward_done_) fail(ErrorCode::kGraphError, "grad() before backward()");
  if (v.id < leaf_grads_.size() && !leaf_grads_[v.id].empty()) return leaf_grads_[v.id];
  return Tensor(value(v).shape());
}

void Tape::clear() {
  nodes_.clear();
  param_nodes_.clear();
  leaf_grads_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    fail(ErrorCode::kDimensionMismatch,
         "matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  // Row by row, so a row's result does not depend on its position in the
  // batch (blocked products take different code paths for edge rows).
  const auto am = as_matrix(a), bm = as_matrix(b);
  auto om = as_matrix(out);
  for (Eigen::Index r = 0; r < am.rows(); ++r) om.row(r).noalias() = am.row(r) * bm;
  return out;
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = matmul(a.value(), b.value());
  const Tape* tp = &t;
  const std::uint32_t ai = a.id, bi = b.id;
  return t.record(std::move(out), {a, b},
                  [tp, ai, bi](const Tensor& g, GradBuffers& grads) {
                    if (grads.wants(ai)) {
                      auto ga = as_matrix(grads.slot(ai));
                      const auto gm = as_matrix(g);
                      const auto bt = as_matrix(val(tp, bi)).transpose();
                      for (Eigen::Index r = 0; r < gm.rows(); ++r) ga.row(r).noalias() += gm.row(r) * bt;
                    }
                    if (grads.wants(bi)) {
                      as_matrix(grads.slot(bi)).noalias() += as_matrix(val(tp, ai)).transpose() * as_matrix(g);
                    }
                  },
                  "matmul");
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename Fwd, typename Back>
Var binary(Var a, Var b, const char* op, Fwd fwd, Back back) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const Tape* tp = &t;
  const std::uint32_t ai = a.id, bi = b.id;
  return t.record(std::move(out), {a, b},
                  [tp, ai, bi, back](const Tensor& g, GradBuffers& grads) {
                    const Tensor& av = val(tp, ai);
                    const Tensor& bv = val(tp, bi);
                    Tensor* ga = grads.wants(ai) ? &grads.slot(ai) : nullptr;
                    Tensor* gb = grads.wants(bi) ? &grads.slot(bi) : nullptr;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      double da = 0.0, db = 0.0;
                      back(av[i], bv[i], da, db);
                      if (ga) (*ga)[i] += g[i] * da;
                      if (gb) (*gb)[i] += g[i] * db;
                    }
                  },
                  op);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double, double& da, double& db) { da = 1.0; db = 1.0; });
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double, double& da, double& db) { da = 1.0; db = -1.0; });
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double x, double y, double& da, double& db) { da = y; db = x; });
}

Var scale(Var a, double s) {
  if (!std::isfinite(s)) fail(ErrorCode::kNonFinite, "scale: factor is not finite");
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  if (!std::isfinite(s)) fail(ErrorCode::kNonFinite, "add_scalar: offset is not finite");
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) fail(ErrorCode::kDomainError, "log: input must be strictly positive, got " + std::to_string(v));
  }
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(Var x) {
  for (double v : x.value().data()) {
    if (v < 0.0) fail(ErrorCode::kDomainError, "sqrt: negative input " + std::to_string(v));
  }
  // The derivative is unbounded at 0; such coordinates pass no gradient.
  return unary(x, "sqrt", [](double v) { return std::sqrt(v); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var softplus(Var x) {
  return unary(
      x, "softplus", [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Var elu(Var x, double alpha) {
  return unary(x, "elu", [alpha](double v) { return v < 0.0 ? alpha * std::expm1(v) : v; },
               [alpha](double v, double) { return v < 0.0 ? alpha * std::exp(v) : 1.0; });
}

Var mul_const(Var x, const Tensor& c) {
  Tape& t = tape_of(x);
  require_same_shape(x.value(), c, "mul_const");
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c[i];
  const std::uint32_t xi = x.id;
  return t.record(std::move(out), {x},
                  [xi, c](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c[i];
                  },
                  "mul_const");
}

// ---------------------------------------------------------------------------
// Named broadcasts and reshaping

Var add_bias(Var x, Var b) {
  Tape& t = tape_of(x, b);
  const Tensor& xv = x.value();
  require_rank2(xv, "add_bias");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (b.value().size() != cols) {
    fail(ErrorCode::kDimensionMismatch,
         "add_bias: bias " + shape_string(b.value().shape()) + " does not match " + shape_string(xv.shape()));
  }
  const Tensor& bv = b.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  const std::uint32_t xi = x.id, bi = b.id;
  return t.record(std::move(out), {x, b},
                  [xi, bi, rows, cols](const Tensor& g, GradBuffers& grads) {
                    if (grads.wants(xi)) {
                      Tensor& gx = grads.slot(xi);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (grads.wants(bi)) {
                      Tensor& gb = grads.slot(bi);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                    }
                  },
                  "add_bias");
}

Var scale_rows(Var x, Var w) {
  Tape& t = tape_of(x, w);
  const Tensor& xv = x.value();
  require_rank2(xv, "scale_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (w.value().size() != rows) {
    fail(ErrorCode::kDimensionMismatch,
         "scale_rows: weights " + shape_string(w.value().shape()) + " vs " + shape_string(xv.shape()));
  }
  const Tensor& wv = w.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * wv[r];
  const Tape* tp = &t;
  const std::uint32_t xi = x.id, wi = w.id;
  return t.record(std::move(out), {x, w},
                  [tp, xi, wi, rows, cols](const Tensor& g, GradBuffers& grads) {
                    const Tensor& xv = val(tp, xi);
                    const Tensor& wv = val(tp, wi);
                    if (grads.wants(xi)) {
                      Tensor& gx = grads.slot(xi);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * wv[r];
                    }
                    if (grads.wants(wi)) {
                      Tensor& gw = grads.slot(wi);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gw[r] += g[r * cols + c] * xv[r * cols + c];
                    }
                  },
                  "scale_rows");
}

Var dot_rows(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "dot_rows");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "dot_rows");
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c] * bv[r * cols + c];
    out[r] = s;
  }
  const Tape* tp = &t;
  const std::uint32_t ai = a.id, bi = b.id;
  return t.record(std::move(out), {a, b},
                  [tp, ai, bi, rows, cols](const Tensor& g, GradBuffers& grads) {
                    const Tensor& av = val(tp, ai);
                    const Tensor& bv = val(tp, bi);
                    if (grads.wants(ai)) {
                      Tensor& ga = grads.slot(ai);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r] * bv[r * cols + c];
                    }
                    if (grads.wants(bi)) {
                      Tensor& gb = grads.slot(bi);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[r * cols + c] += g[r] * av[r * cols + c];
                    }
                  },
                  "dot_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::kInvalidArgument, "concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != rows) fail(ErrorCode::kDimensionMismatch, "concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.value().cols();
  }
  Tensor out({rows, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t pc = pv.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * total + offsets[k]));
  }
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    ids.push_back(p.id);
    widths.push_back(p.value().cols());
  }
  return t.record(std::move(out), parts,
                  [ids, widths, offsets, rows, total](const Tensor& g, GradBuffers& grads) {
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!grads.wants(ids[k])) continue;
                      Tensor& gp = grads.slot(ids[k]);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g[r * total + offsets[k] + c];
                    }
                  },
                  "concat_cols");
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (begin >= end || end > cols) {
    fail(ErrorCode::kDimensionMismatch, "slice_cols: bad range [" + std::to_string(begin) + ", " +
                                            std::to_string(end) + ") of " + shape_string(xv.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * cols + begin + c];
  const std::uint32_t xi = x.id;
  return t.record(std::move(out), {x},
                  [xi, rows, cols, begin, w](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < w; ++c) gx[r * cols + begin + c] += g[r * w + c];
                  },
                  "slice_cols");
}

Var gather_cols(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  if (tv.rank() != 2) fail(ErrorCode::kDimensionMismatch, "gather_cols: table must be a matrix");
  if (ids.empty()) fail(ErrorCode::kInvalidArgument, "gather_cols: no ids");
  const std::size_t e = tv.rows(), v = tv.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      fail(ErrorCode::kInvalidArgument,
           "token id " + std::to_string(id) + " out of range for vocabulary of size " + std::to_string(v));
    }
  }
  Tensor out({ids.size(), e});
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t k = 0; k < e; ++k) out[r * e + k] = tv[k * v + static_cast<std::size_t>(ids[r])];
  std::vector<int> idv(ids.begin(), ids.end());
  const std::uint32_t ti = table.id;
  return t.record(std::move(out), {table},
                  [ti, idv, e, v](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(ti)) return;
                    Tensor& gt = grads.slot(ti);
                    for (std::size_t r = 0; r < idv.size(); ++r)
                      for (std::size_t k = 0; k < e; ++k) gt[k * v + static_cast<std::size_t>(idv[r])] += g[r * e + k];
                  },
                  "gather_cols");
}

Var pick(Var x, std::span<const int> idx) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "pick");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (idx.size() != rows) fail(ErrorCode::kDimensionMismatch, "pick: one index per row required");
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) fail(ErrorCode::kInvalidArgument, "pick: index out of range");
    out[r] = xv[r * cols + static_cast<std::size_t>(idx[r])];
  }
  std::vector<int> iv(idx.begin(), idx.end());
  const std::uint32_t xi = x.id;
  return t.record(std::move(out), {x},
                  [xi, iv, cols](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t r = 0; r < iv.size(); ++r) gx[r * cols + static_cast<std::size_t>(iv[r])] += g[r];
                  },
                  "pick");
}

Var blend_rows(Var fresh, Var held, std::span<const char> keep) {
  Tape& t = tape_of(fresh, held);
  require_same_shape(fresh.value(), held.value(), "blend_rows");
  const Tensor& fv = fresh.value();
  const Tensor& hv = held.value();
  const std::size_t rows = fv.rows(), cols = fv.cols();
  if (keep.size() != rows) fail(ErrorCode::kDimensionMismatch, "blend_rows: one flag per row required");
  Tensor out(fv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = keep[r] ? fv[r * cols + c] : hv[r * cols + c];
  std::vector<char> kv(keep.begin(), keep.end());
  const std::uint32_t fi = fresh.id, hi = held.id;
  return t.record(std::move(out), {fresh, held},
                  [fi, hi, kv, cols](const Tensor& g, GradBuffers& grads) {
                    Tensor* gf = grads.wants(fi) ? &grads.slot(fi) : nullptr;
                    Tensor* gh = grads.wants(hi) ? &grads.slot(hi) : nullptr;
                    for (std::size_t r = 0; r < kv.size(); ++r) {
                      Tensor* dst = kv[r] ? gf : gh;
                      if (!dst) continue;
                      for (std::size_t c = 0; c < cols; ++c) (*dst)[r * cols + c] += g[r * cols + c];
                    }
                  },
                  "blend_rows");
}

// ---------------------------------------------------------------------------
// Softmax family

SoftmaxResult softmax_logsumexp(const Tensor& x) {
  if (x.empty()) fail(ErrorCode::kInvalidArgument, "softmax of an empty tensor");
  require_finite(x, "softmax");
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double total = 0.0;
  Tensor probs(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probs[i] = std::exp(x[i] - mx);
    total += probs[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) probs[i] /= total;
  return {std::move(probs), mx + std::log(total)};
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  const Tape* tp = &t;
  const std::uint32_t xi = x.id, self = next_id(t);
  return t.record(std::move(out), {x},
                  [tp, xi, self, rows, cols](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    const Tensor& p = val(tp, self);
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot);
                    }
                  },
                  "softmax_rows");
}

Var logsumexp_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "logsumexp_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
    out[r] = mx + std::log(total);
  }
  const Tape* tp = &t;
  const std::uint32_t xi = x.id, self = next_id(t);
  return t.record(std::move(out), {x},
                  [tp, xi, self, rows, cols](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    const Tensor& xv = val(tp, xi);
                    const Tensor& lse = val(tp, self);
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c)
                        gx[r * cols + c] += g[r] * std::exp(xv[r * cols + c] - lse[r]);
                  },
                  "logsumexp_rows");
}

Var log_mean_exp_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "log_mean_exp_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out({rows, 1});
  Tensor weights(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (weights[r * cols + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) weights[r * cols + c] /= total;
    out[r] = mx + std::log(total / static_cast<double>(cols));
  }
  const std::uint32_t xi = x.id;
  return t.record(std::move(out), {x},
                  [xi, weights, rows, cols](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r] * weights[r * cols + c];
                  },
                  "log_mean_exp_rows");
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::uint32_t xi = x.id;
  return t.record(Tensor::scalar(s), {x},
                  [xi](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
                  },
                  "sum");
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var weighted_sum(Var x, const Tensor& w) {
  Tape& t = tape_of(x);
  require_same_shape(x.value(), w, "weighted_sum");
  double s = 0.0;
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) s += w[i] * xv[i];
  const std::uint32_t xi = x.id;
  return t.record(Tensor::scalar(s), {x},
                  [xi, w](const Tensor& g, GradBuffers& grads) {
                    if (!grads.wants(xi)) return;
                    Tensor& gx = grads.slot(xi);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * w[i];
                  },
                  "weighted_sum");
}

// ---------------------------------------------------------------------------
// Gradient routing

Var gradient_reversal(Var x, double gamma) {
  if (!std::isfinite(gamma)) fail(ErrorCode::kNonFinite, "gradient_reversal: gamma is not finite");
  if (gamma < 0.0) fail(ErrorCode::kInvalidArgument, "gradient_reversal: gamma must be >= 0 (the layer owns the sign)");
  return unary(x, "gradient_reversal", [](double v) { return v; }, [gamma](double, double) { return -gamma; });
}

Var stop_gradient(Var x) { return tape_of(x).constant(x.value()); }

// ---------------------------------------------------------------------------
// Dropout

std::string_view to_string(DropoutKind kind) {
  switch (kind) {
    case DropoutKind::kNone: return "none";
    case DropoutKind::kBernoulli: return "bernoulli";
    case DropoutKind::kGaussian: return "gaussian";
  }
  return "none";
}

DropoutKind parse_dropout_kind(std::string_view name) {
  if (name == "none") return DropoutKind::kNone;
  if (name == "bernoulli") return DropoutKind::kBernoulli;
  if (name == "gaussian") return DropoutKind::kGaussian;
  fail(ErrorCode::kConfigError, "unknown dropout kind '" + std::string(name) + "' (none|bernoulli|gaussian)");
}

void check_dropout_rate(double p) {
  if (!(p >= 0.0) || !(p < 1.0)) fail(ErrorCode::kInvalidArgument, "dropout rate must lie in [0, 1), got " + std::to_string(p));
}

namespace {

double mask_draw(double p, DropoutKind kind, RngStream& rng) {
  if (kind == DropoutKind::kBernoulli) return rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return 1.0 + std::sqrt(p / (1.0 - p)) * rng.normal();
}

}  // namespace

Tensor dropout_mask(const Shape& shape, double p, DropoutKind kind, RngStream& rng) {
  check_dropout_rate(p);
  Tensor mask(shape, 1.0);
  if (kind == DropoutKind::kNone || p == 0.0) return mask;
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask_draw(p, kind, rng);
  return mask;
}

Tensor dropout_mask_rows(std::size_t rows, std::size_t cols, double p, DropoutKind kind, std::span<RngStream> rngs) {
  check_dropout_rate(p);
  if (rngs.size() != rows) fail(ErrorCode::kDimensionMismatch, "dropout_mask_rows: one stream per row required");
  Tensor mask({rows, cols}, 1.0);
  if (kind == DropoutKind::kNone || p == 0.0) return mask;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mask[r * cols + c] = mask_draw(p, kind, rngs[r]);
  return mask;
}

Var dropout(Var x, double p, DropoutKind kind, RngStream& rng) {
  check_dropout_rate(p);
  if (kind == DropoutKind::kNone || p == 0.0) return x;
  return mul_const(x, dropout_mask(x.value().shape(), p, kind, rng));
}

Var dropout(Var x, const Tensor& fixed_mask) { return mul_const(x, fixed_mask); }

}  // namespace mcbmn
