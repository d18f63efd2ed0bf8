// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mcbmn/config.hpp"

namespace mcbmn {

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded shuffle; round(fraction * n) examples go to validation, but at
/// least one example always stays in training.
DataSplit split_indices(std::size_t n, double val_fraction, std::uint64_t seed);
std::vector<std::size_t> split_members(const DataSplit& split, Split which);

/// Plain SGD (optionally with momentum) or Adam over every parameter of a
/// store, with optional global-norm clipping.
class Optimizer {
 public:
  Optimizer(const RunConfig::Optimizer& config, ParameterStore& store);
  void step();

 private:
  RunConfig::Optimizer config_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double gen = 0.0;
  double uncertainty = 0.0;
  std::optional<EvalReport> probe;  // held-out scores, every eval_every epochs
};

struct TrainResult {
  Model model;  // parameters restored to the best checkpoint
  std::vector<EpochStats> curve;
  std::size_t best_epoch = 0;
  double best_loss = 0.0;  // selection score of best_epoch; negated BLEU-1 for probe_bleu
  /// Best held-out score per metric over all probed epochs.
  std::optional<EvalReport> max_over_epochs;
};

struct TrainOptions {
  std::string out_dir;  // empty: write nothing
  std::function<void(const EpochStats&)> progress;
};

/// Writes config.json, checkpoint.json (the epoch picked by
/// training.selection; val_loss falls back to training loss without a
/// validation split), loss_curve.csv and, with probes, probe_scores.csv.
TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options = {});

/// Rebuilds the model from a config and dataset and loads a checkpoint.
Model load_model(const RunConfig& config, const Dataset& data, const std::string& checkpoint);

struct GenerationRecord {
  std::string id;
  std::vector<Tokens> samples;
  double epistemic = 0.0;
  double aleatoric = 0.0;
  double predictive = 0.0;
};

struct Evaluation {
  EvalReport report;
  std::vector<GenerationRecord> generations;  // one sample: the decision
};

Evaluation evaluate(const RunConfig& config, const Model& model, const Dataset& data, Split which);
Evaluation evaluate_indices(const RunConfig& config, const Model& model, const Dataset& data,
                            const std::vector<std::size_t>& indices);

/// T free-running Monte-Carlo samples per example; the summary fields come
/// from the mean-probability decision.
std::vector<GenerationRecord> sample_questions(const RunConfig& config, const Model& model, const Dataset& data,
                                               Split which, std::size_t samples);

void write_generations(const std::vector<GenerationRecord>& records, const Vocabulary& vocab,
                       const std::string& path);
/// Reads the first sample of each record as the question to score.
std::vector<GeneratedQuestion> read_generations(const std::string& path, const Vocabulary& vocab);

struct VarianceRecord {
  std::string id;
  std::vector<double> mc_mean;
  std::vector<double> reference;
  double norm_variance = 0.0;
};

/// T stochastic passes to g_enc against a dropout-free reference pass. A
/// model trained without dropout is probed with Bernoulli dropout at its
/// configured rate.
std::vector<VarianceRecord> variance_probe(const RunConfig& config, const Model& model, const Dataset& data,
                                           const std::vector<std::size_t>& indices, std::size_t samples);
std::vector<VarianceRecord> variance_probe(const RunConfig& config, const Model& model, const Dataset& data);
void write_variance_csv(const std::vector<VarianceRecord>& records, const std::string& path, bool per_dim = false);
double mean_norm_variance(const std::vector<VarianceRecord>& records);

/// Trains and evaluates every run of a manifest under out_dir/<run name>/,
/// then writes out_dir/sweep_summary.csv.
struct SweepResult {
  std::string name;
  nlohmann::ordered_json overrides;
  EvalReport report;
};
std::vector<SweepResult> run_sweep(const std::vector<SweepRun>& runs, const std::string& out_dir,
                                   const std::function<void(const std::string&)>& log = {});

}  // namespace mcbmn
