// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcbmn/autodiff.hpp"
#include "mcbmn/rng.hpp"

namespace mcbmn {

/// Owns every trainable tensor of a model. Addresses are stable for the
/// lifetime of the store, and iteration order is lexicographic by name.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value);
  /// Uniform in +-gain sqrt(3 / fan_in). The draw for each parameter comes from a
  /// stream keyed by its name, so it does not depend on creation order.
  Parameter& add_uniform(const std::string& name, const Shape& shape, std::size_t fan_in, const RngStream& init,
                         double gain = 1.0);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  void zero_grad();

 private:
  std::map<std::string, std::unique_ptr<Parameter>> params_;
};

std::uint64_t name_hash(std::string_view name);

// ---------------------------------------------------------------------------
// Stochasticity plumbing

enum class Mode { kStochastic, kDeterministic };

/// Draws dropout masks and noise for a batch in which row r owns stream r.
/// Per-row streams make each example's randomness independent of how the
/// batch was assembled.
class MaskSource {
 public:
  MaskSource() = default;
  explicit MaskSource(std::vector<RngStream> rows) : rows_(std::move(rows)) {}
  /// `n` rows derived from `base` by split(i).
  static MaskSource split_rows(const RngStream& base, std::size_t n);

  std::size_t rows() const { return rows_.size(); }
  RngStream& row(std::size_t r) { return rows_[r]; }
  /// Same rows, each re-keyed for a distinct purpose.
  MaskSource child(std::uint64_t purpose) const;

  Tensor mask(std::size_t cols, double p, DropoutKind kind);
  Tensor normal(std::size_t cols);

 private:
  std::vector<RngStream> rows_;
};

// ---------------------------------------------------------------------------
// Modules

/// Feed-forward stack with a dropout application in front of every linear
/// layer and tanh after each one.
struct BayesianMLP {
  std::vector<std::size_t> widths;
  std::vector<Parameter*> weights;  // [in x out]
  std::vector<Parameter*> biases;   // [out]
  double rate = 0.0;
  DropoutKind kind = DropoutKind::kNone;

  static BayesianMLP create(ParameterStore& store, const std::string& prefix, std::vector<std::size_t> widths,
                            double rate, DropoutKind kind, const RngStream& init);
  std::size_t in_width() const { return widths.front(); }
  std::size_t out_width() const { return widths.back(); }
};

/// x is [rows x in]. Stochastic mode draws fresh masks per row; deterministic
/// mode applies no dropout at all.
Var mlp_forward(Tape& tape, const BayesianMLP& net, Var x, Mode mode, MaskSource& masks);

/// LSTM cell with gate order (input, forget, output, candidate) packed into
/// one [in + hidden x 4 hidden] weight.
struct BayesianLSTMCell {
  std::size_t input = 0;
  std::size_t hidden = 0;
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  double rate = 0.0;
  DropoutKind kind = DropoutKind::kNone;

  static BayesianLSTMCell create(ParameterStore& store, const std::string& prefix, std::size_t input,
                                 std::size_t hidden, double rate, DropoutKind kind, const RngStream& init);
};

/// Variational masks, drawn once per sequence and reused at every step.
struct LstmMasks {
  Tensor gates;   // [rows x 4 hidden], applied to gate pre-activations
  Tensor output;  // [rows x hidden], applied to each emitted output
};

LstmMasks sample_lstm_masks(const BayesianLSTMCell& cell, std::size_t rows, Mode mode, MaskSource& masks);

struct LstmState {
  Var h;
  Var c;
};

LstmState lstm_zero_state(Tape& tape, const BayesianLSTMCell& cell, std::size_t rows);
/// One recurrence step; returns the new (unmasked) state.
LstmState lstm_step(Tape& tape, const BayesianLSTMCell& cell, Var x, const LstmState& state, const LstmMasks& masks);
/// The masked emission for a state.
Var lstm_output(const LstmState& state, const LstmMasks& masks);

struct LstmRun {
  std::vector<Var> outputs;  // masked emissions, one per step
  Var final_output;
  LstmState final_state;
};

/// Runs the recurrence over `inputs`. When `keep` is given, keep[t][r] == 0
/// freezes row r's state at step t (right padding for ragged batches).
LstmRun lstm_sequence(Tape& tape, const BayesianLSTMCell& cell, std::span<const Var> inputs, LstmState init,
                      const LstmMasks& masks, const std::vector<std::vector<char>>* keep = nullptr);

/// Word embedding matrix of extent [E x V]; token v embeds as column v.
struct EmbeddingTable {
  Parameter* weight = nullptr;

  static EmbeddingTable create(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t vocab,
                               const RngStream& init);
  std::size_t dim() const { return weight->value.rows(); }
  std::size_t vocab() const { return weight->value.cols(); }
};

/// [ids x E]; throws when an id is outside the vocabulary.
Var embed(Tape& tape, const EmbeddingTable& table, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Monte-Carlo predictive statistics

struct McStatistics {
  std::size_t samples = 0;
  std::vector<double> mean;
  std::vector<double> variance;  // unbiased; exactly zero for identical samples
  bool degenerate = false;       // T == 1, variance reported as zero
  std::vector<std::vector<double>> raw;
};

McStatistics summarize_samples(std::vector<std::vector<double>> samples, bool keep_raw = false);

/// Runs f once per sample with stream rng.split(t); the result does not
/// depend on the order in which samples are evaluated.
McStatistics mc_predict(const std::function<std::vector<double>(RngStream&)>& f, std::size_t samples,
                        const RngStream& rng, bool keep_raw = false);

// ---------------------------------------------------------------------------
// Checkpoints

/// JSON map name -> {shape, values}; doubles are written in shortest
/// round-trip form so save/load is exact.
void save_checkpoint(const ParameterStore& store, const std::string& path);
std::map<std::string, Tensor> read_checkpoint(const std::string& path);
/// Fails with a list of every missing, extra or reshaped parameter.
void load_checkpoint(ParameterStore& store, const std::string& path);

}  // namespace mcbmn
