// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/decoder_mumc.hpp"

#include <algorithm>
#include <cmath>

#include "mcbmn/error.hpp"

namespace mcbmn {

DecoderParams DecoderParams::create(ParameterStore& store, std::size_t dim, std::size_t embed_dim, std::size_t hidden,
                                    std::size_t vocab, double rate, DropoutKind kind, const RngStream& init,
                                    const EmbeddingTable* shared_emb) {
  DecoderParams d;
  d.cell = BayesianLSTMCell::create(store, "decoder.lstm", embed_dim, hidden, rate, kind, init);
  if (shared_emb) {
    if (shared_emb->dim() != embed_dim || shared_emb->vocab() != vocab) {
      fail(ErrorCode::kDimensionMismatch, "decoder: shared embedding table has the wrong extent");
    }
    d.emb = *shared_emb;
  } else {
    d.emb = EmbeddingTable::create(store, "decoder.embedding", embed_dim, vocab, init);
  }
  if (dim != embed_dim) d.in_proj = &store.add_uniform("decoder.in_proj", {dim, embed_dim}, dim, init);
  d.out_w = &store.add_uniform("decoder.out_w", {hidden, vocab}, hidden, init);
  d.out_b = &store.add("decoder.out_b", Tensor({vocab}));
  d.var_w = &store.add_uniform("decoder.var_w", {hidden, vocab}, hidden, init);
  d.var_b = &store.add("decoder.var_b", Tensor({vocab}));
  return d;
}

void MumcConfig::validate() const {
  if (samples == 0) fail(ErrorCode::kConfigError, "mumc samples must be >= 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(ErrorCode::kConfigError, "mumc alpha must be > 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail(ErrorCode::kConfigError, "mumc gamma must be >= 0");
  if (!(lambda_u >= 0.0) || !std::isfinite(lambda_u)) fail(ErrorCode::kConfigError, "mumc lambda_u must be >= 0");
}

namespace {

Var decoder_input(Tape& tape, const DecoderParams& dec, Var g_enc) {
  if (dec.in_proj) return matmul(g_enc, tape.param(*dec.in_proj));
  if (g_enc.cols() != dec.cell.input) {
    fail(ErrorCode::kDimensionMismatch, "decoder: encoding width " + std::to_string(g_enc.cols()) +
                                            " does not match the embedding width " + std::to_string(dec.cell.input));
  }
  return g_enc;
}

struct Heads {
  Var logits;
  Var variance;
};

Heads heads(Tape& tape, const DecoderParams& dec, Var out) {
  return {add_bias(matmul(out, tape.param(*dec.out_w)), tape.param(*dec.out_b)),
          softplus(add_bias(matmul(out, tape.param(*dec.var_w)), tape.param(*dec.var_b)))};
}

double row_lse(const double* x, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) total += std::exp(x[c] - mx);
  return mx + std::log(total);
}

void check_gold(std::span<const int> gold, std::size_t rows, std::size_t cols, const char* op) {
  if (gold.size() != rows) fail(ErrorCode::kDimensionMismatch, std::string(op) + ": one target per row required");
  for (int g : gold) {
    if (g < 0 || static_cast<std::size_t>(g) >= cols) {
      fail(ErrorCode::kInvalidArgument, std::string(op) + ": target id " + std::to_string(g) + " out of range");
    }
  }
}

}  // namespace

DecodeRun decode_teacher_forced(Tape& tape, const DecoderParams& dec, Var g_enc, const std::vector<Tokens>& targets,
                                const LstmMasks& masks) {
  if (targets.size() != g_enc.rows()) {
    fail(ErrorCode::kDimensionMismatch, "decode_teacher_forced: " + std::to_string(targets.size()) + " targets for " +
                                            std::to_string(g_enc.rows()) + " encodings");
  }
  const std::size_t rows = targets.size(), vocab = dec.vocab();
  DecodeRun run;
  std::size_t longest = 0;
  for (const auto& t : targets) {
    if (t.empty()) fail(ErrorCode::kInvalidArgument, "decode_teacher_forced: empty target sequence");
    for (int id : t) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        fail(ErrorCode::kInvalidArgument, "decode_teacher_forced: token id " + std::to_string(id) + " out of range");
      }
    }
    longest = std::max(longest, t.size());
    run.lengths.push_back(t.size());
  }

  LstmState state = lstm_step(tape, dec.cell, decoder_input(tape, dec, g_enc),
                              lstm_zero_state(tape, dec.cell, rows), masks);
  for (std::size_t step = 0; step < longest; ++step) {
    std::vector<int> inputs(rows, kPad), gold(rows, kPad);
    std::vector<char> valid(rows, 0);
    bool all_valid = true;
    for (std::size_t r = 0; r < rows; ++r) {
      if (step < targets[r].size()) {
        inputs[r] = step == 0 ? kBos : targets[r][step - 1];
        gold[r] = targets[r][step];
        valid[r] = 1;
      } else {
        all_valid = false;
      }
    }
    LstmState next = lstm_step(tape, dec.cell, embed(tape, dec.emb, inputs), state, masks);
    if (!all_valid) next = {blend_rows(next.h, state.h, valid), blend_rows(next.c, state.c, valid)};
    state = next;
    const Heads h = heads(tape, dec, lstm_output(state, masks));
    run.logits.push_back(h.logits);
    run.variances.push_back(h.variance);
    run.targets.push_back(std::move(gold));
    run.valid.push_back(std::move(valid));
  }
  return run;
}

Var token_nll(Var y, std::span<const int> gold) {
  Tape& t = *y.tape;
  const Tensor& yv = y.value();
  const std::size_t rows = yv.rows(), cols = yv.cols();
  check_gold(gold, rows, cols, "token_nll");
  Tensor out({rows, 1});
  Tensor probs(yv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = yv.data().data() + r * cols;
    const double lse = row_lse(in, cols);
    out[r] = lse - in[gold[r]];
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(in[c] - lse);
  }
  std::vector<int> g(gold.begin(), gold.end());
  const std::uint32_t yi = y.id;
  return t.record(std::move(out), {y},
                  [yi, probs, g, rows, cols](const Tensor& up, GradBuffers& grads) {
                    if (!grads.wants(yi)) return;
                    Tensor& gy = grads.slot(yi);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) gy[r * cols + c] += up[r] * probs[r * cols + c];
                      gy[r * cols + static_cast<std::size_t>(g[r])] -= up[r];
                    }
                  },
                  "token_nll");
}

Var lrt_sample(Var y, Var sigma, const Tensor& eps) {
  for (double s : sigma.value().data()) {
    if (s < 0.0) fail(ErrorCode::kDomainError, "lrt_sample: negative standard deviation");
  }
  return add(y, mul_const(sigma, eps));
}

Var aleatoric_token_loss(Var y, Var sigma, std::span<const int> gold, std::span<const Tensor> eps) {
  if (eps.empty()) fail(ErrorCode::kInvalidArgument, "aleatoric loss needs T >= 1 noise draws");
  Tape& t = *y.tape;
  const Tensor& yv = y.value();
  const Tensor& sv = sigma.value();
  require_same_shape(yv, sv, "aleatoric_token_loss");
  for (double s : sv.data()) {
    if (s < 0.0) fail(ErrorCode::kDomainError, "aleatoric loss: negative variance");
  }
  for (const auto& e : eps) require_same_shape(yv, e, "aleatoric_token_loss noise");
  const std::size_t rows = yv.rows(), cols = yv.cols(), samples = eps.size();
  check_gold(gold, rows, cols, "aleatoric_token_loss");

  Tensor out({rows, 1});
  // coef[s][r, c] = w_s (p_s[c] - [c == gold]) with w the softmax over samples
  // of the per-sample log-probabilities; dL/dy sums coef over s and dL/dsigma
  // sums coef (*) eps_s.
  Tensor grad_y(yv.shape()), grad_s(yv.shape());
  std::vector<double> yhat(cols), logp(samples), probs(samples * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t g = static_cast<std::size_t>(gold[r]);
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t c = 0; c < cols; ++c) yhat[c] = yv[r * cols + c] + eps[s][r * cols + c] * sv[r * cols + c];
      const double lse = row_lse(yhat.data(), cols);
      logp[s] = yhat[g] - lse;
      for (std::size_t c = 0; c < cols; ++c) probs[s * cols + c] = std::exp(yhat[c] - lse);
    }
    const double mx = *std::max_element(logp.begin(), logp.end());
    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) total += std::exp(logp[s] - mx);
    out[r] = -(mx + std::log(total / static_cast<double>(samples)));
    for (std::size_t s = 0; s < samples; ++s) {
      const double w = std::exp(logp[s] - mx) / total;
      for (std::size_t c = 0; c < cols; ++c) {
        const double coef = w * (probs[s * cols + c] - (c == g ? 1.0 : 0.0));
        grad_y[r * cols + c] += coef;
        grad_s[r * cols + c] += coef * eps[s][r * cols + c];
      }
    }
  }
  const std::uint32_t yi = y.id, si = sigma.id;
  return t.record(std::move(out), {y, sigma},
                  [yi, si, grad_y, grad_s, rows, cols](const Tensor& up, GradBuffers& grads) {
                    if (grads.wants(yi)) {
                      Tensor& gy = grads.slot(yi);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gy[r * cols + c] += up[r] * grad_y[r * cols + c];
                    }
                    if (grads.wants(si)) {
                      Tensor& gs = grads.slot(si);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gs[r * cols + c] += up[r] * grad_s[r * cols + c];
                    }
                  },
                  "aleatoric_token_loss");
}

namespace {

// Sum over steps of per-row losses, each row divided by its token count.
Var per_row_mean(const DecodeRun& run, const std::vector<Var>& step_losses) {
  Var total;
  for (std::size_t step = 0; step < step_losses.size(); ++step) {
    Tensor w({run.lengths.size(), 1});
    for (std::size_t r = 0; r < run.lengths.size(); ++r) {
      w[r] = run.valid[step][r] ? 1.0 / static_cast<double>(run.lengths[r]) : 0.0;
    }
    Var term = mul_const(step_losses[step], w);
    total = step == 0 ? term : add(total, term);
  }
  return total;
}

}  // namespace

Var gen_loss_rows(const DecodeRun& run) {
  std::vector<Var> losses;
  for (std::size_t step = 0; step < run.logits.size(); ++step) losses.push_back(token_nll(run.logits[step], run.targets[step]));
  return per_row_mean(run, losses);
}

Var gen_loss(const DecodeRun& run) {
  std::size_t count = 0;
  for (auto n : run.lengths) count += n;
  Var total;
  for (std::size_t step = 0; step < run.logits.size(); ++step) {
    Tensor w({run.lengths.size(), 1});
    for (std::size_t r = 0; r < run.lengths.size(); ++r) {
      w[r] = run.valid[step][r] ? 1.0 / static_cast<double>(count) : 0.0;
    }
    Var term = weighted_sum(token_nll(run.logits[step], run.targets[step]), w);
    total = step == 0 ? term : add(total, term);
  }
  return total;
}

Var aleatoric_mc_loss_rows(const DecodeRun& run, std::size_t samples, MaskSource& noise) {
  if (samples == 0) fail(ErrorCode::kInvalidArgument, "aleatoric loss needs T >= 1");
  std::vector<Var> losses;
  const std::size_t vocab = run.logits.front().cols();
  for (std::size_t step = 0; step < run.logits.size(); ++step) {
    std::vector<Tensor> eps;
    eps.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) eps.push_back(noise.normal(vocab));
    Var sigma = sqrt(run.variances[step]);
    losses.push_back(aleatoric_token_loss(run.logits[step], sigma, run.targets[step], eps));
  }
  return per_row_mean(run, losses);
}

Var distorted_loss(Var l_p, Var l_y, double alpha) { return elu(sub(l_p, l_y), alpha); }

Var mumc_refine(Var g_enc, std::span<const Var> mus, const Tensor& grad_u, double gamma) {
  if (mus.empty()) fail(ErrorCode::kInvalidArgument, "mumc_refine: no cue embeddings");
  if (grad_u.shape() != g_enc.shape()) {
    fail(ErrorCode::kGraphError, "mumc_refine: uncertainty gradient " + shape_string(grad_u.shape()) +
                                     " missing or misshapen for encoding " + shape_string(g_enc.shape()));
  }
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail(ErrorCode::kInvalidArgument, "mumc_refine: gamma must be >= 0");
  if (gamma == 0.0) return g_enc;
  Tensor reversed = grad_u;
  for (double& v : reversed.data()) v *= -gamma;
  Var cue_sum = mus[0];
  for (std::size_t k = 1; k < mus.size(); ++k) cue_sum = add(cue_sum, mus[k]);
  Var certainty = mul_const(cue_sum, reversed);
  return add(g_enc, mul(certainty, g_enc));
}

Var total_loss(Var l_gen_refined, Var l_u, double lambda_u) {
  if (lambda_u == 0.0) return l_gen_refined;
  return add(l_gen_refined, scale(l_u, lambda_u));
}

std::vector<QuestionSample> decode_greedy(Tape& tape, const DecoderParams& dec, Var g_enc, const LstmMasks& masks,
                                          std::size_t max_len, std::size_t group, bool record_full) {
  if (max_len == 0) fail(ErrorCode::kInvalidArgument, "decode_greedy: max_len must be >= 1");
  const std::size_t rows = g_enc.rows(), vocab = dec.vocab();
  if (group == 0 || rows % group != 0) {
    fail(ErrorCode::kInvalidArgument, "decode_greedy: group size must divide the row count");
  }
  std::vector<QuestionSample> out(rows);
  std::vector<char> done(rows, 0);
  std::vector<int> inputs(rows, kBos);
  LstmState state = lstm_step(tape, dec.cell, decoder_input(tape, dec, g_enc),
                              lstm_zero_state(tape, dec.cell, rows), masks);
  std::vector<double> mean_prob(vocab);
  for (std::size_t step = 0; step < max_len; ++step) {
    state = lstm_step(tape, dec.cell, embed(tape, dec.emb, inputs), state, masks);
    const Heads h = heads(tape, dec, lstm_output(state, masks));
    const Tensor& y = h.logits.value();
    const Tensor& v = h.variance.value();
    bool all_done = true;
    for (std::size_t g0 = 0; g0 < rows; g0 += group) {
      if (done[g0]) continue;
      std::fill(mean_prob.begin(), mean_prob.end(), 0.0);
      for (std::size_t r = g0; r < g0 + group; ++r) {
        const double* yr = y.data().data() + r * vocab;
        const double lse = row_lse(yr, vocab);
        for (std::size_t c = 0; c < vocab; ++c) mean_prob[c] += std::exp(yr[c] - lse);
      }
      std::size_t best = 0;
      if (group == 1) {
        const double* yr = y.data().data() + g0 * vocab;
        for (std::size_t c = 1; c < vocab; ++c)
          if (yr[c] > yr[best]) best = c;
      } else {
        for (std::size_t c = 1; c < vocab; ++c)
          if (mean_prob[c] > mean_prob[best]) best = c;
      }
      for (std::size_t r = g0; r < g0 + group; ++r) {
        QuestionSample& q = out[r];
        q.tokens.push_back(static_cast<int>(best));
        q.chosen_logit.push_back(y[r * vocab + best]);
        q.chosen_variance.push_back(v[r * vocab + best]);
        if (record_full) {
          q.logits.push_back(y.row(r));
          q.variances.push_back(v.row(r));
        }
        inputs[r] = static_cast<int>(best);
        if (best == static_cast<std::size_t>(kEos)) done[r] = 1;
      }
      if (!done[g0]) all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

}  // namespace mcbmn
