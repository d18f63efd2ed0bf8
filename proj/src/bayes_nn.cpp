// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/bayes_nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mcbmn/error.hpp"

namespace mcbmn {

std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) fail(ErrorCode::kInvalidArgument, "duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter>(name, std::move(value));
  Parameter& ref = *p;
  params_.emplace(name, std::move(p));
  return ref;
}

Parameter& ParameterStore::add_uniform(const std::string& name, const Shape& shape, std::size_t fan_in,
                                       const RngStream& init, double gain) {
  RngStream rng = init.split(name_hash(name));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  Tensor value(shape);
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = (2.0 * rng.uniform() - 1.0) * bound;
  return add(name, std::move(value));
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorCode::kInvalidArgument, "no parameter named '" + name + "'");
  return *it->second;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorCode::kInvalidArgument, "no parameter named '" + name + "'");
  return *it->second;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& [name, p] : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// MaskSource

MaskSource MaskSource::split_rows(const RngStream& base, std::size_t n) {
  std::vector<RngStream> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.push_back(base.split(i));
  return MaskSource(std::move(rows));
}

MaskSource MaskSource::child(std::uint64_t purpose) const {
  std::vector<RngStream> rows;
  rows.reserve(rows_.size());
  for (const RngStream& r : rows_) rows.push_back(r.split(purpose));
  return MaskSource(std::move(rows));
}

Tensor MaskSource::mask(std::size_t cols, double p, DropoutKind kind) {
  return dropout_mask_rows(rows_.size(), cols, p, kind, rows_);
}

Tensor MaskSource::normal(std::size_t cols) {
  Tensor out({rows_.size(), cols});
  for (std::size_t r = 0; r < rows_.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = rows_[r].normal();
  return out;
}

// ---------------------------------------------------------------------------
// BayesianMLP

BayesianMLP BayesianMLP::create(ParameterStore& store, const std::string& prefix, std::vector<std::size_t> widths,
                                double rate, DropoutKind kind, const RngStream& init) {
  if (widths.size() < 2) fail(ErrorCode::kInvalidArgument, prefix + ": an MLP needs at least two widths");
  check_dropout_rate(rate);
  BayesianMLP net;
  net.widths = std::move(widths);
  net.rate = rate;
  net.kind = kind;
  for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
    const std::size_t in = net.widths[l], out = net.widths[l + 1];
    net.weights.push_back(&store.add_uniform(prefix + ".w" + std::to_string(l), {in, out}, in, init));
    net.biases.push_back(&store.add(prefix + ".b" + std::to_string(l), Tensor({out})));
  }
  return net;
}

Var mlp_forward(Tape& tape, const BayesianMLP& net, Var x, Mode mode, MaskSource& masks) {
  if (x.value().rank() != 2 || x.cols() != net.in_width()) {
    fail(ErrorCode::kDimensionMismatch, "mlp_forward: input " + shape_string(x.shape()) + " but the network expects width " +
                                            std::to_string(net.in_width()));
  }
  Var h = x;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    if (mode == Mode::kStochastic && net.kind != DropoutKind::kNone && net.rate > 0.0) {
      h = mul_const(h, masks.mask(h.cols(), net.rate, net.kind));
    }
    h = tanh(add_bias(matmul(h, tape.param(*net.weights[l])), tape.param(*net.biases[l])));
  }
  return h;
}

// ---------------------------------------------------------------------------
// BayesianLSTMCell

BayesianLSTMCell BayesianLSTMCell::create(ParameterStore& store, const std::string& prefix, std::size_t input,
                                          std::size_t hidden, double rate, DropoutKind kind, const RngStream& init) {
  check_dropout_rate(rate);
  BayesianLSTMCell cell;
  cell.input = input;
  cell.hidden = hidden;
  cell.rate = rate;
  cell.kind = kind;
  cell.weight = &store.add_uniform(prefix + ".w", {input + hidden, 4 * hidden}, input + hidden, init);
  Tensor bias({4 * hidden});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;  // forget gate starts open
  cell.bias = &store.add(prefix + ".b", std::move(bias));
  return cell;
}

LstmMasks sample_lstm_masks(const BayesianLSTMCell& cell, std::size_t rows, Mode mode, MaskSource& masks) {
  if (mode == Mode::kDeterministic || cell.kind == DropoutKind::kNone || cell.rate == 0.0) {
    return {Tensor({rows, 4 * cell.hidden}, 1.0), Tensor({rows, cell.hidden}, 1.0)};
  }
  if (masks.rows() != rows) fail(ErrorCode::kDimensionMismatch, "sample_lstm_masks: mask source has wrong row count");
  LstmMasks out;
  out.gates = masks.mask(4 * cell.hidden, cell.rate, cell.kind);
  out.output = masks.mask(cell.hidden, cell.rate, cell.kind);
  return out;
}

LstmState lstm_zero_state(Tape& tape, const BayesianLSTMCell& cell, std::size_t rows) {
  return {tape.constant(Tensor({rows, cell.hidden})), tape.constant(Tensor({rows, cell.hidden}))};
}

namespace {

inline double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Pointwise LSTM update fused into one node: z [R x 4H], c [R x H] -> [h | c'].
Var lstm_pointwise(Tape& tape, Var z, Var c_prev) {
  const std::size_t rows = z.rows(), hidden = c_prev.cols();
  const Tensor& zv = z.value();
  const Tensor& cv = c_prev.value();
  Tensor out({rows, 2 * hidden});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = zv.data().data() + r * 4 * hidden;
    for (std::size_t k = 0; k < hidden; ++k) {
      const double i = logistic(zr[k]);
      const double f = logistic(zr[hidden + k]);
      const double o = logistic(zr[2 * hidden + k]);
      const double g = std::tanh(zr[3 * hidden + k]);
      const double c = f * cv[r * hidden + k] + i * g;
      out[r * 2 * hidden + k] = o * std::tanh(c);
      out[r * 2 * hidden + hidden + k] = c;
    }
  }
  const Tape* tp = &tape;
  const std::uint32_t zi = z.id, ci = c_prev.id, self = static_cast<std::uint32_t>(tape.size());
  return tape.record(
      std::move(out), {z, c_prev},
      [tp, zi, ci, self, rows, hidden](const Tensor& g, GradBuffers& grads) {
        auto* t = const_cast<Tape*>(tp);
        const Tensor& zv = t->value(Var{t, zi});
        const Tensor& cv = t->value(Var{t, ci});
        const Tensor& ov = t->value(Var{t, self});
        Tensor* gz = grads.wants(zi) ? &grads.slot(zi) : nullptr;
        Tensor* gc = grads.wants(ci) ? &grads.slot(ci) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* zr = zv.data().data() + r * 4 * hidden;
          for (std::size_t k = 0; k < hidden; ++k) {
            const double i = logistic(zr[k]);
            const double f = logistic(zr[hidden + k]);
            const double o = logistic(zr[2 * hidden + k]);
            const double gg = std::tanh(zr[3 * hidden + k]);
            const double c = ov[r * 2 * hidden + hidden + k];
            const double tc = std::tanh(c);
            const double dh = g[r * 2 * hidden + k];
            const double dc = g[r * 2 * hidden + hidden + k] + dh * o * (1.0 - tc * tc);
            if (gz) {
              double* dz = gz->data().data() + r * 4 * hidden;
              dz[k] += dc * gg * i * (1.0 - i);
              dz[hidden + k] += dc * cv[r * hidden + k] * f * (1.0 - f);
              dz[2 * hidden + k] += dh * tc * o * (1.0 - o);
              dz[3 * hidden + k] += dc * i * (1.0 - gg * gg);
            }
            if (gc) (*gc)[r * hidden + k] += dc * f;
          }
        }
      },
      "lstm_pointwise");
}

}  // namespace

LstmState lstm_step(Tape& tape, const BayesianLSTMCell& cell, Var x, const LstmState& state, const LstmMasks& masks) {
  if (x.value().rank() != 2 || x.cols() != cell.input) {
    fail(ErrorCode::kDimensionMismatch, "lstm_step: input " + shape_string(x.shape()) + " but the cell expects width " +
                                            std::to_string(cell.input));
  }
  if (state.h.cols() != cell.hidden || state.h.rows() != x.rows()) {
    fail(ErrorCode::kDimensionMismatch, "lstm_step: state " + shape_string(state.h.shape()) + " does not fit the cell");
  }
  const Var parts[] = {x, state.h};
  Var z = add_bias(matmul(concat_cols(parts), tape.param(*cell.weight)), tape.param(*cell.bias));
  z = mul_const(z, masks.gates);
  Var hc = lstm_pointwise(tape, z, state.c);
  return {slice_cols(hc, 0, cell.hidden), slice_cols(hc, cell.hidden, 2 * cell.hidden)};
}

Var lstm_output(const LstmState& state, const LstmMasks& masks) { return mul_const(state.h, masks.output); }

LstmRun lstm_sequence(Tape& tape, const BayesianLSTMCell& cell, std::span<const Var> inputs, LstmState init,
                      const LstmMasks& masks, const std::vector<std::vector<char>>* keep) {
  if (inputs.empty()) fail(ErrorCode::kInvalidArgument, "lstm_sequence: empty input sequence");
  if (keep && keep->size() != inputs.size()) fail(ErrorCode::kDimensionMismatch, "lstm_sequence: keep flags per step required");
  LstmRun run;
  LstmState state = init;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    LstmState next = lstm_step(tape, cell, inputs[t], state, masks);
    if (keep) {
      const auto& flags = (*keep)[t];
      next = {blend_rows(next.h, state.h, flags), blend_rows(next.c, state.c, flags)};
    }
    state = next;
    run.outputs.push_back(lstm_output(state, masks));
  }
  run.final_state = state;
  run.final_output = run.outputs.back();
  return run;
}

// ---------------------------------------------------------------------------
// EmbeddingTable

EmbeddingTable EmbeddingTable::create(ParameterStore& store, const std::string& name, std::size_t dim,
                                      std::size_t vocab, const RngStream& init) {
  return EmbeddingTable{&store.add_uniform(name, {dim, vocab}, dim, init)};
}

Var embed(Tape& tape, const EmbeddingTable& table, std::span<const int> ids) {
  return gather_cols(tape.param(*table.weight), ids);
}

// ---------------------------------------------------------------------------
// Monte-Carlo statistics

McStatistics summarize_samples(std::vector<std::vector<double>> samples, bool keep_raw) {
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "Monte-Carlo statistics need at least one sample");
  const std::size_t n = samples.size(), dim = samples.front().size();
  for (const auto& s : samples) {
    if (s.size() != dim) fail(ErrorCode::kDimensionMismatch, "Monte-Carlo samples differ in length");
  }
  McStatistics stats;
  stats.samples = n;
  stats.degenerate = n == 1;
  stats.mean.assign(dim, 0.0);
  stats.variance.assign(dim, 0.0);
  // Deviations from the first sample are exactly zero when samples agree.
  for (std::size_t j = 0; j < dim; ++j) {
    const double anchor = samples[0][j];
    double shift = 0.0;
    for (std::size_t t = 0; t < n; ++t) shift += samples[t][j] - anchor;
    shift /= static_cast<double>(n);
    stats.mean[j] = anchor + shift;
    if (n > 1) {
      double ss = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double d = samples[t][j] - anchor - shift;
        ss += d * d;
      }
      stats.variance[j] = ss / static_cast<double>(n - 1);
    }
  }
  if (keep_raw) stats.raw = std::move(samples);
  return stats;
}

McStatistics mc_predict(const std::function<std::vector<double>(RngStream&)>& f, std::size_t samples,
                        const RngStream& rng, bool keep_raw) {
  if (samples == 0) fail(ErrorCode::kInvalidArgument, "mc_predict: sample count must be >= 1");
  std::vector<std::vector<double>> draws;
  draws.reserve(samples);
  for (std::size_t t = 0; t < samples; ++t) {
    RngStream stream = rng.split(t);
    draws.push_back(f(stream));
  }
  return summarize_samples(std::move(draws), keep_raw);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  nlohmann::json doc;
  doc["format"] = "mcbmn-checkpoint";
  doc["version"] = 1;
  nlohmann::json params = nlohmann::json::array();
  for (const Parameter* p : store.all()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"values", p->value.values()}});
  }
  doc["parameters"] = std::move(params);
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write checkpoint '" + path + "'");
  out << doc.dump() << '\n';
  if (!out) fail(ErrorCode::kIoError, "failed writing checkpoint '" + path + "'");
}

std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open checkpoint '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIoError, "checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  if (doc.value("format", "") != "mcbmn-checkpoint") fail(ErrorCode::kIoError, "'" + path + "' is not an mcbmn checkpoint");
  std::map<std::string, Tensor> out;
  try {
    for (const auto& p : doc.at("parameters")) {
      out.emplace(p.at("name").get<std::string>(),
                  Tensor(p.at("shape").get<Shape>(), p.at("values").get<std::vector<double>>()));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIoError, "malformed checkpoint '" + path + "': " + e.what());
  }
  return out;
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  auto loaded = read_checkpoint(path);
  std::ostringstream diff;
  for (const Parameter* p : store.all()) {
    auto it = loaded.find(p->name);
    if (it == loaded.end()) {
      diff << "; missing " << p->name << " expected " << shape_string(p->value.shape());
    } else if (it->second.shape() != p->value.shape()) {
      diff << "; " << p->name << " expected " << shape_string(p->value.shape()) << " found "
           << shape_string(it->second.shape());
    }
  }
  for (const auto& [name, t] : loaded) {
    if (!store.contains(name)) diff << "; unexpected " << name << " found " << shape_string(t.shape());
  }
  if (!diff.str().empty()) fail(ErrorCode::kCheckpointMismatch, "checkpoint '" + path + "' does not fit the model" + diff.str());
  for (Parameter* p : store.all()) {
    p->value = loaded.at(p->name);
    p->zero_grad();
  }
}

}  // namespace mcbmn
