// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcbmn/metrics.hpp"
#include "mcbmn/model.hpp"

namespace mcbmn {

enum class OptimizerKind { kSgd, kAdam };
enum class TargetMode { kFirst, kSample, kAll };
enum class Split { kTrain, kVal, kAll };
// Which epoch's parameters the checkpoint keeps.
enum class Selection { kValLoss, kLast, kProbeBleu };

struct RunConfig {
  std::uint64_t seed = 1;

  struct Paths {
    std::string dataset = "data/synth.jsonl";
    std::string out_dir = "runs/default";
  } paths;

  // Dims of 0 for image_dim, place_dim and vocab_size are filled in from the
  // dataset header.
  ModelConfig model = [] {
    ModelConfig m;
    m.image_dim = 0;
    m.place_dim = 0;
    m.vocab_size = 0;
    return m;
  }();

  struct Mumc {
    bool enabled = true;
    std::size_t train_samples = 20;
    std::size_t eval_samples = 50;
    double alpha = 1.0;
    double gamma = 1.0;
    double lambda_u = 1.0;
    bool stop_gradient = true;
    bool at_inference = true;
  } mumc;

  struct Optimizer {
    OptimizerKind kind = OptimizerKind::kSgd;
    double learning_rate = 0.05;
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t batch_size = 16;
    std::size_t epochs = 200;
    double clip_norm = 0.0;  // 0 disables clipping
  } optimizer;

  struct Training {
    TargetMode target = TargetMode::kSample;
    double validation_fraction = 0.1;
    std::size_t eval_every = 0;  // epochs between held-out BLEU probes; 0 disables
    Selection selection = Selection::kValLoss;
  } training;

  struct Eval {
    Decision decision = Decision::kDeterministic;
    std::size_t samples = 50;
    std::size_t max_len = 16;
    Split split = Split::kVal;
    BleuAggregation bleu = BleuAggregation::kMaxRef;
    bool smoothing = false;
  } eval;

  struct Variance {
    std::size_t examples = 20;
    std::size_t samples = 5;
  } variance;

  void validate() const;
  /// Copies image_dim, place_dim and vocab_size from a dataset where they are
  /// 0, and checks them otherwise.
  ModelConfig resolve_model(const Dataset& data) const;
  MumcConfig train_mumc() const;
  GenerateOptions generate_options() const;
};

std::string_view to_string(OptimizerKind k);
std::string_view to_string(TargetMode t);
std::string_view to_string(Selection s);
std::string_view to_string(Split s);

/// Unknown keys and mistyped values are CONFIG_ERROR. A top-level "preset"
/// names an ablation applied before the remaining keys.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& c, const std::string& path);

/// Named ablations: combiner, dropout and decision settings, and cue subsets.
const std::map<std::string, nlohmann::json>& ablation_presets();
void apply_preset(RunConfig& c, const std::string& name);

struct SweepRun {
  std::string name;
  RunConfig config;
  nlohmann::ordered_json overrides;
};

/// Manifest: {"base": {...config...} | "path", "grid": {"dotted.key": [values]},
/// "seeds": [..]}. Expands the cartesian product; duplicates are an error.
std::vector<SweepRun> expand_sweep(const nlohmann::json& manifest, const std::string& manifest_dir = ".");

}  // namespace mcbmn
