// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "mcbmn/bayes_nn.hpp"
#include "mcbmn/cue_pipeline.hpp"

namespace mcbmn {

struct DecoderParams {
  BayesianLSTMCell cell;
  EmbeddingTable emb;
  Parameter* in_proj = nullptr;  // [d x E]; null when d == E
  Parameter* out_w = nullptr;    // [H x V]
  Parameter* out_b = nullptr;    // [V]
  Parameter* var_w = nullptr;    // [H x V]
  Parameter* var_b = nullptr;    // [V]

  /// Pass `shared_emb` to reuse the cue encoders' word embeddings.
  static DecoderParams create(ParameterStore& store, std::size_t dim, std::size_t embed_dim, std::size_t hidden,
                              std::size_t vocab, double rate, DropoutKind kind, const RngStream& init,
                              const EmbeddingTable* shared_emb = nullptr);
  std::size_t vocab() const { return out_b->value.size(); }
};

struct MumcConfig {
  std::size_t samples = 20;  // T
  double alpha = 1.0;
  double gamma = 1.0;
  double lambda_u = 1.0;

  void validate() const;
};

/// Teacher-forced pass over right-padded targets; step t predicts target t.
struct DecodeRun {
  std::vector<Var> logits;                    // per step, [rows x V]
  std::vector<Var> variances;                 // per step, [rows x V], softplus head
  std::vector<std::vector<int>> targets;      // [step][row]; PAD past the end
  std::vector<std::vector<char>> valid;       // [step][row]
  std::vector<std::size_t> lengths;           // tokens per row
};

/// Targets are EOS-terminated and carry no BOS: the decoder consumes
/// proj(g_enc), then BOS, then targets[0..M-2].
DecodeRun decode_teacher_forced(Tape& tape, const DecoderParams& dec, Var g_enc, const std::vector<Tokens>& targets,
                                const LstmMasks& masks);

/// -log softmax(y)[gold] per row, [rows x 1].
Var token_nll(Var y, std::span<const int> gold);
/// y + eps (*) sigma. Fails on negative sigma.
Var lrt_sample(Var y, Var sigma, const Tensor& eps);
/// -log((1/T) sum_t softmax(y + eps_t (*) sigma)[gold]) per row, [rows x 1].
/// With sigma == 0 this equals token_nll bitwise.
Var aleatoric_token_loss(Var y, Var sigma, std::span<const int> gold, std::span<const Tensor> eps);

/// Mean over every valid token of the run.
Var gen_loss(const DecodeRun& run);
/// Per-row token mean of the cross-entropy, [rows x 1].
Var gen_loss_rows(const DecodeRun& run);
/// Per-row token mean of the aleatoric Monte-Carlo loss, [rows x 1]. `noise`
/// supplies one unit-normal draw per coordinate, sample and step.
Var aleatoric_mc_loss_rows(const DecodeRun& run, std::size_t samples, MaskSource& noise);

/// alpha (exp(d) - 1) for d < 0, d otherwise, with d = l_p - l_y.
Var distorted_loss(Var l_p, Var l_y, double alpha);

/// g' = g + (-gamma G (*) sum_B mu_B) (*) g, with G = dL_u/dg held constant.
Var mumc_refine(Var g_enc, std::span<const Var> mus, const Tensor& grad_u, double gamma);

Var total_loss(Var l_gen_refined, Var l_u, double lambda_u);

struct QuestionSample {
  Tokens tokens;                       // EOS-terminated unless max_len was hit
  std::vector<double> chosen_logit;    // per step, logit of the emitted token
  std::vector<double> chosen_variance; // per step, predicted variance of that logit
  std::vector<std::vector<double>> logits;     // per step; only with record_full
  std::vector<std::vector<double>> variances;  // per step; only with record_full
  double epistemic = 0.0;
  double aleatoric = 0.0;
  double predictive = 0.0;
};

/// Greedy lockstep decoding. Rows are grouped in consecutive blocks of
/// `group`; every row of a block receives the token with the highest mean
/// softmax probability across the block. Ties go to the lowest id.
std::vector<QuestionSample> decode_greedy(Tape& tape, const DecoderParams& dec, Var g_enc, const LstmMasks& masks,
                                          std::size_t max_len, std::size_t group = 1, bool record_full = false);

}  // namespace mcbmn
