// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "mcbmn/bayes_nn.hpp"

namespace mcbmn {

/// Projections for one auxiliary cue B: W_B [d_B x d], b_B [d], W_BB [d x d].
struct FusionCue {
  std::string name;
  Parameter* proj = nullptr;
  Parameter* bias = nullptr;
  Parameter* out = nullptr;
};

struct FusionParams {
  Parameter* image_proj = nullptr;  // W_i [d_i x d], shared by every cue
  std::vector<FusionCue> cues;
  double rate = 0.0;
  DropoutKind kind = DropoutKind::kNone;

  /// `cue_dims[k]` is the width of cue k's embedding. With `share_out` the
  /// cues named `share_out_with` and `share_out_from` use one W_BB.
  static FusionParams create(ParameterStore& store, std::size_t image_dim, std::size_t dim,
                             const std::vector<std::string>& names, const std::vector<std::size_t>& cue_dims,
                             double rate, DropoutKind kind, const RngStream& init,
                             const std::string& share_out_from = "", const std::string& share_out_with = "",
                             double init_gain = 1.0);
  const FusionCue& cue(const std::string& name) const;
};

/// mu_B = W_BB . dropout(tanh(W_i g_i (*) W_B g_B + b_B)), batched over rows.
Var fuse_cue(Tape& tape, const FusionParams& params, const FusionCue& cue, Var g_i, Var g_b, Mode mode,
             MaskSource& masks);

struct ModeratorParams {
  BayesianMLP gate;  // x_i -> g_gat
  double temperature = 1.0;

  static ModeratorParams create(ParameterStore& store, std::size_t image_feat_dim, std::size_t hidden,
                                std::size_t dim, double rate, DropoutKind kind, double temperature,
                                const RngStream& init);
};

/// s_B = <e_B, g_gat> / temperature per row, stacked into [rows x K].
Var gate_scores(std::span<const Var> embeddings, Var g_gat, double temperature);
/// Softmax of gate_scores over the active cues, [rows x K].
Var moderator_gate(std::span<const Var> embeddings, Var g_gat, double temperature);
/// g_enc = sum_B pi_B mu_B; fails when a row of pi leaves the simplex by more
/// than 1e-9.
Var mix_encoding(Var pi, std::span<const Var> mus);

/// Concatenation followed by a learned linear map to width d.
struct MixtureParams {
  Parameter* weight = nullptr;  // [K d x d]
  Parameter* bias = nullptr;    // [d]

  static MixtureParams create(ParameterStore& store, std::size_t inputs, std::size_t dim, const RngStream& init);
};

Var simple_mixture(Tape& tape, const MixtureParams& params, std::span<const Var> embeddings);

}  // namespace mcbmn
