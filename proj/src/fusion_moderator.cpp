// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/fusion_moderator.hpp"

#include <cmath>

#include "mcbmn/error.hpp"

namespace mcbmn {

FusionParams FusionParams::create(ParameterStore& store, std::size_t image_dim, std::size_t dim,
                                  const std::vector<std::string>& names, const std::vector<std::size_t>& cue_dims,
                                  double rate, DropoutKind kind, const RngStream& init,
                                  const std::string& share_out_from, const std::string& share_out_with,
                                  double init_gain) {
  if (names.size() != cue_dims.size()) fail(ErrorCode::kInvalidArgument, "fusion: one width per cue required");
  check_dropout_rate(rate);
  if (!(init_gain > 0.0) || !std::isfinite(init_gain)) fail(ErrorCode::kInvalidArgument, "fusion: init gain must be positive");
  FusionParams p;
  p.rate = rate;
  p.kind = kind;
  p.image_proj = &store.add_uniform("fusion.image_proj", {image_dim, dim}, image_dim, init, init_gain);
  for (std::size_t k = 0; k < names.size(); ++k) {
    const std::string prefix = "fusion." + names[k];
    FusionCue c;
    c.name = names[k];
    c.proj = &store.add_uniform(prefix + ".proj", {cue_dims[k], dim}, cue_dims[k], init, init_gain);
    c.bias = &store.add(prefix + ".bias", Tensor({dim}));
    p.cues.push_back(c);
  }
  for (auto& c : p.cues) {
    const bool shared = !share_out_from.empty() && c.name == share_out_from;
    const std::string owner = shared ? share_out_with : c.name;
    const std::string key = "fusion." + owner + ".out";
    c.out = store.contains(key) ? &store.get(key) : &store.add_uniform(key, {dim, dim}, dim, init);
  }
  return p;
}

const FusionCue& FusionParams::cue(const std::string& name) const {
  for (const auto& c : cues) {
    if (c.name == name) return c;
  }
  fail(ErrorCode::kInvalidArgument, "fusion has no cue named '" + name + "'");
}

Var fuse_cue(Tape& tape, const FusionParams& params, const FusionCue& cue, Var g_i, Var g_b, Mode mode,
             MaskSource& masks) {
  if (g_i.rows() != g_b.rows()) {
    fail(ErrorCode::kDimensionMismatch, "fuse_cue: image rows " + shape_string(g_i.shape()) + " vs cue rows " +
                                            shape_string(g_b.shape()));
  }
  Var joint = mul(matmul(g_i, tape.param(*params.image_proj)), matmul(g_b, tape.param(*cue.proj)));
  Var h = tanh(add_bias(joint, tape.param(*cue.bias)));
  if (mode == Mode::kStochastic && params.kind != DropoutKind::kNone && params.rate > 0.0) {
    h = mul_const(h, masks.mask(h.cols(), params.rate, params.kind));
  }
  return matmul(h, tape.param(*cue.out));
}

ModeratorParams ModeratorParams::create(ParameterStore& store, std::size_t image_feat_dim, std::size_t hidden,
                                        std::size_t dim, double rate, DropoutKind kind, double temperature,
                                        const RngStream& init) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail(ErrorCode::kInvalidArgument, "moderator temperature must be positive");
  }
  return {BayesianMLP::create(store, "moderator.gate", {image_feat_dim, hidden, dim}, rate, kind, init), temperature};
}

Var gate_scores(std::span<const Var> embeddings, Var g_gat, double temperature) {
  if (embeddings.empty()) fail(ErrorCode::kInvalidArgument, "moderator_gate: empty cue set");
  std::vector<Var> scores;
  for (Var e : embeddings) {
    if (e.shape() != g_gat.shape()) {
      fail(ErrorCode::kDimensionMismatch, "moderator_gate: cue embedding " + shape_string(e.shape()) +
                                              " vs gating embedding " + shape_string(g_gat.shape()));
    }
    Var s = dot_rows(e, g_gat);
    scores.push_back(temperature == 1.0 ? s : scale(s, 1.0 / temperature));
  }
  return scores.size() == 1 ? scores.front() : concat_cols(scores);
}

Var moderator_gate(std::span<const Var> embeddings, Var g_gat, double temperature) {
  return softmax_rows(gate_scores(embeddings, g_gat, temperature));
}

Var mix_encoding(Var pi, std::span<const Var> mus) {
  if (mus.empty()) fail(ErrorCode::kInvalidArgument, "mix_encoding: empty cue set");
  if (pi.cols() != mus.size()) {
    fail(ErrorCode::kDimensionMismatch, "mix_encoding: " + std::to_string(pi.cols()) + " weights for " +
                                            std::to_string(mus.size()) + " cues");
  }
  const Tensor& w = pi.value();
  for (std::size_t r = 0; r < pi.rows(); ++r) {
    double total = 0.0;
    for (std::size_t k = 0; k < mus.size(); ++k) {
      const double v = w[r * mus.size() + k];
      if (v < -1e-9) fail(ErrorCode::kDomainError, "mix_encoding: negative gate weight");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) fail(ErrorCode::kDomainError, "mix_encoding: gate weights do not sum to 1");
  }
  Var out = scale_rows(mus[0], slice_cols(pi, 0, 1));
  for (std::size_t k = 1; k < mus.size(); ++k) out = add(out, scale_rows(mus[k], slice_cols(pi, k, k + 1)));
  return out;
}

MixtureParams MixtureParams::create(ParameterStore& store, std::size_t inputs, std::size_t dim, const RngStream& init) {
  return {&store.add_uniform("mixture.weight", {inputs * dim, dim}, inputs * dim, init),
          &store.add("mixture.bias", Tensor({dim}))};
}

Var simple_mixture(Tape& tape, const MixtureParams& params, std::span<const Var> embeddings) {
  if (embeddings.empty()) fail(ErrorCode::kInvalidArgument, "simple_mixture: no embeddings");
  Var joined = embeddings.size() == 1 ? embeddings.front() : concat_cols(embeddings);
  return add_bias(matmul(joined, tape.param(*params.weight)), tape.param(*params.bias));
}

}  // namespace mcbmn
