// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mcbmn/bayes_nn.hpp"
#include "mcbmn/cue_pipeline.hpp"
#include "mcbmn/decoder_mumc.hpp"
#include "mcbmn/fusion_moderator.hpp"

namespace mcbmn {

enum class Combiner { kModerator, kMixture };
enum class GateInput { kFused, kRaw };

std::string_view to_string(Combiner c);
Combiner parse_combiner(std::string_view name);
std::string_view to_string(GateInput g);
GateInput parse_gate_input(std::string_view name);

/// Names accepted in a cue list.
const std::vector<std::string>& cue_names();

struct ModelConfig {
  std::size_t hidden_dim = 64;  // d, shared by every encoder and the decoder
  std::size_t embed_dim = 32;
  std::size_t encoder_hidden = 64;
  std::size_t image_dim = 32;
  std::size_t place_dim = 32;
  std::size_t vocab_size = 0;
  std::vector<std::string> cues = {"image", "place", "caption", "tag"};
  Combiner combiner = Combiner::kModerator;
  double dropout_rate = 0.3;
  DropoutKind dropout_kind = DropoutKind::kBernoulli;
  bool per_category_tags = false;
  bool share_tag_projection = false;
  GateInput gate_on = GateInput::kFused;
  double temperature = 1.0;
  bool share_embeddings = true;
  double fusion_init_gain = 1.0;  // scales the init bound of W_i and W_B

  bool has(const std::string& cue) const;
  /// Auxiliary cues in canonical order (place, caption, tag).
  std::vector<std::string> aux_cues() const;
  void validate() const;
};

struct Modules {
  std::optional<BayesianMLP> image;
  std::optional<BayesianMLP> place;
  std::optional<BayesianLSTMCell> caption;
  std::vector<BayesianLSTMCell> tags;  // one, or noun/verb/question
  std::optional<EmbeddingTable> words;
  std::optional<FusionParams> fusion;
  std::optional<ModeratorParams> moderator;
  std::optional<MixtureParams> mixture;
  DecoderParams decoder;
};

/// Parameters live in a shared store, so copies of a Model (for instance one
/// with different dropout settings) train and read the same tensors.
struct Model {
  ModelConfig config;
  std::shared_ptr<ParameterStore> store;
  Modules net;

  static Model create(const ModelConfig& config, const RngStream& init);
  /// Same parameters, every dropout site switched to (rate, kind).
  Model with_dropout(double rate, DropoutKind kind) const;
};

struct Encoding {
  std::vector<std::string> cues;  // the embeddings below, in order
  std::vector<Var> embeddings;    // g_B for every active cue
  std::vector<Var> mus;           // fused (or raw, when nothing is fused)
  std::optional<Var> pi;
  Var g_enc;
};

/// Rows of `batch` own rows of `masks`.
Encoding encode(Tape& tape, const Model& model, const std::vector<const CueBundle*>& batch, Mode mode,
                MaskSource& masks);

struct TrainRow {
  const CueBundle* bundle = nullptr;
  Tokens target;
  RngStream stream;
};

struct LossOptions {
  bool mumc = true;
  MumcConfig mumc_config;
  bool stop_gradient = true;
  Mode mode = Mode::kStochastic;
};

struct LossValues {
  double total = 0.0;
  double gen = 0.0;          // cross-entropy of the refined pass (the plain pass without MUMC)
  double uncertainty = 0.0;  // L_u, batch mean
};

/// Builds the full objective for `rows`. With `accumulate` the gradient of
/// the total loss is added to the parameter gradients.
LossValues compute_loss(const Model& model, const std::vector<TrainRow>& rows, const LossOptions& options,
                        bool accumulate);

enum class Decision { kDeterministic, kMcMean };

std::string_view to_string(Decision d);
Decision parse_decision(std::string_view name);

struct GenerateOptions {
  Decision decision = Decision::kDeterministic;
  std::size_t samples = 50;
  std::size_t max_len = 16;
  bool mumc = false;
  MumcConfig mumc_config;
};

/// One decision per bundle. The stream for bundle i is base.split(keys[i]).
std::vector<QuestionSample> generate(const Model& model, const std::vector<const CueBundle*>& batch,
                                     const std::vector<std::uint64_t>& keys, const GenerateOptions& options,
                                     const RngStream& base);

struct McGeneration {
  std::vector<QuestionSample> samples;  // T free-running draws
  QuestionSample consensus;             // mean-probability decision with uncertainty summary
  McStatistics first_step;              // over the first-step logits
};

McGeneration generate_mc(const Model& model, const CueBundle& bundle, std::uint64_t key, const GenerateOptions& options,
                         const RngStream& base);

}  // namespace mcbmn
