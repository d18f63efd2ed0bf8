// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/model.hpp"

#include <algorithm>
#include <cmath>

#include "mcbmn/error.hpp"

namespace mcbmn {

namespace {

// Purposes for MaskSource::child; each stochastic site draws from its own
// re-keyed row streams.
enum Purpose : std::uint64_t {
  kImageMasks = 1,
  kPlaceMasks = 2,
  kCaptionMasks = 3,
  kTagMasks = 4,  // + category
  kFusionMasks = 10,  // + cue
  kGateMasks = 20,
  kDecoderMasks = 30,
  kLogitNoise = 31,
};

}  // namespace

std::string_view to_string(Combiner c) { return c == Combiner::kModerator ? "moderator" : "mixture"; }

Combiner parse_combiner(std::string_view name) {
  if (name == "moderator") return Combiner::kModerator;
  if (name == "mixture") return Combiner::kMixture;
  fail(ErrorCode::kConfigError, "unknown combiner '" + std::string(name) + "' (moderator|mixture)");
}

std::string_view to_string(GateInput g) { return g == GateInput::kFused ? "fused" : "raw"; }

GateInput parse_gate_input(std::string_view name) {
  if (name == "fused") return GateInput::kFused;
  if (name == "raw") return GateInput::kRaw;
  fail(ErrorCode::kConfigError, "unknown gate input '" + std::string(name) + "' (fused|raw)");
}

std::string_view to_string(Decision d) { return d == Decision::kDeterministic ? "deterministic" : "mc_mean"; }

Decision parse_decision(std::string_view name) {
  if (name == "deterministic") return Decision::kDeterministic;
  if (name == "mc_mean") return Decision::kMcMean;
  fail(ErrorCode::kConfigError, "unknown decision rule '" + std::string(name) + "' (deterministic|mc_mean)");
}

const std::vector<std::string>& cue_names() {
  static const std::vector<std::string> names = {"image", "place", "caption", "tag"};
  return names;
}

bool ModelConfig::has(const std::string& cue) const { return std::find(cues.begin(), cues.end(), cue) != cues.end(); }

std::vector<std::string> ModelConfig::aux_cues() const {
  std::vector<std::string> out;
  for (const char* c : {"place", "caption", "tag"})
    if (has(c)) out.emplace_back(c);
  return out;
}

void ModelConfig::validate() const {
  if (cues.empty()) fail(ErrorCode::kConfigError, "cue set must not be empty");
  for (std::size_t i = 0; i < cues.size(); ++i) {
    if (std::find(cue_names().begin(), cue_names().end(), cues[i]) == cue_names().end()) {
      fail(ErrorCode::kConfigError, "unknown cue '" + cues[i] + "' (image|place|caption|tag)");
    }
    if (std::find(cues.begin(), cues.begin() + static_cast<std::ptrdiff_t>(i), cues[i]) !=
        cues.begin() + static_cast<std::ptrdiff_t>(i)) {
      fail(ErrorCode::kConfigError, "cue '" + cues[i] + "' listed twice");
    }
  }
  if (cues.size() > 1 && !has("image")) {
    fail(ErrorCode::kConfigError, "combining several cues requires the image cue (fusion needs g_i)");
  }
  for (auto [name, v] : {std::pair{"hidden_dim", hidden_dim}, {"embed_dim", embed_dim},
                         {"encoder_hidden", encoder_hidden}, {"image_dim", image_dim}, {"place_dim", place_dim}}) {
    if (v == 0) fail(ErrorCode::kConfigError, std::string("model.") + name + " must be positive");
  }
  if (vocab_size < 5) fail(ErrorCode::kConfigError, "model.vocab_size must cover the reserved tokens plus one word");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorCode::kConfigError, "dropout.rate must lie in [0, 1)");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail(ErrorCode::kConfigError, "model.temperature must be positive");
  }
  if (!(fusion_init_gain > 0.0) || !std::isfinite(fusion_init_gain)) {
    fail(ErrorCode::kConfigError, "model.fusion_init_gain must be positive");
  }
}

Model Model::create(const ModelConfig& config, const RngStream& init) {
  config.validate();
  Model m;
  m.config = config;
  m.store = std::make_shared<ParameterStore>();
  ParameterStore& s = *m.store;
  const std::size_t d = config.hidden_dim;
  const double p = config.dropout_rate;
  const DropoutKind k = config.dropout_kind;
  Modules& net = m.net;
  if (config.has("caption") || config.has("tag")) {
    net.words = EmbeddingTable::create(s, "encoder.embedding", config.embed_dim, config.vocab_size, init);
  }
  if (config.has("image")) {
    net.image = BayesianMLP::create(s, "encoder.image", {config.image_dim, config.encoder_hidden, d}, p, k, init);
  }
  if (config.has("place")) {
    net.place = BayesianMLP::create(s, "encoder.place", {config.place_dim, config.encoder_hidden, d}, p, k, init);
  }
  if (config.has("caption")) {
    net.caption = BayesianLSTMCell::create(s, "encoder.caption", config.embed_dim, d, p, k, init);
  }
  if (config.has("tag")) {
    if (config.per_category_tags) {
      for (const char* cat : {"noun", "verb", "question"}) {
        net.tags.push_back(BayesianLSTMCell::create(s, std::string("encoder.tag_") + cat, config.embed_dim, d, p, k, init));
      }
    } else {
      net.tags.push_back(BayesianLSTMCell::create(s, "encoder.tag", config.embed_dim, d, p, k, init));
    }
  }
  const auto aux = config.aux_cues();
  if (config.has("image") && !aux.empty()) {
    const bool share = config.share_tag_projection && config.has("tag") && config.has("caption");
    net.fusion = FusionParams::create(s, d, d, aux, std::vector<std::size_t>(aux.size(), d), p, k, init,
                                      share ? "tag" : "", share ? "caption" : "", config.fusion_init_gain);
    if (config.combiner == Combiner::kModerator) {
      net.moderator = ModeratorParams::create(s, config.image_dim, config.encoder_hidden, d, p, k, config.temperature, init);
    } else {
      net.mixture = MixtureParams::create(s, aux.size(), d, init);
    }
  }
  net.decoder = DecoderParams::create(s, d, config.embed_dim, d, config.vocab_size, p, k, init,
                                      config.share_embeddings && net.words ? &*net.words : nullptr);
  return m;
}

Model Model::with_dropout(double rate, DropoutKind kind) const {
  check_dropout_rate(rate);
  Model m = *this;
  auto set_mlp = [&](std::optional<BayesianMLP>& n) {
    if (n) {
      n->rate = rate;
      n->kind = kind;
    }
  };
  auto set_cell = [&](BayesianLSTMCell& c) {
    c.rate = rate;
    c.kind = kind;
  };
  set_mlp(m.net.image);
  set_mlp(m.net.place);
  if (m.net.caption) set_cell(*m.net.caption);
  for (auto& c : m.net.tags) set_cell(c);
  if (m.net.fusion) {
    m.net.fusion->rate = rate;
    m.net.fusion->kind = kind;
  }
  if (m.net.moderator) {
    m.net.moderator->gate.rate = rate;
    m.net.moderator->gate.kind = kind;
  }
  set_cell(m.net.decoder.cell);
  m.config.dropout_rate = rate;
  m.config.dropout_kind = kind;
  return m;
}

Encoding encode(Tape& tape, const Model& model, const std::vector<const CueBundle*>& batch, Mode mode,
                MaskSource& masks) {
  if (batch.empty()) fail(ErrorCode::kInvalidArgument, "encode: empty batch");
  const ModelConfig& cfg = model.config;
  const Modules& net = model.net;
  Encoding enc;
  std::vector<std::vector<double>> image_feats, place_feats;
  std::vector<Tokens> captions;
  std::vector<TagSet> tags;
  for (const CueBundle* b : batch) {
    image_feats.push_back(b->image_feat);
    place_feats.push_back(b->place_feat);
    captions.push_back(b->caption);
    tags.push_back(b->tags);
  }
  std::optional<Var> g_i;
  if (net.image) {
    MaskSource m = masks.child(kImageMasks);
    g_i = encode_features(tape, *net.image, image_feats, mode, m);
    enc.cues.emplace_back("image");
    enc.embeddings.push_back(*g_i);
  }
  if (net.place) {
    MaskSource m = masks.child(kPlaceMasks);
    enc.cues.emplace_back("place");
    enc.embeddings.push_back(encode_features(tape, *net.place, place_feats, mode, m));
  }
  if (net.caption) {
    MaskSource m = masks.child(kCaptionMasks);
    enc.cues.emplace_back("caption");
    enc.embeddings.push_back(encode_caption(tape, *net.caption, *net.words, captions, mode, m));
  }
  if (!net.tags.empty()) {
    Var g_t;
    if (net.tags.size() == 1) {
      MaskSource m = masks.child(kTagMasks);
      g_t = encode_tags(tape, net.tags[0], *net.words, tags, mode, m);
    } else {
      for (std::size_t c = 0; c < net.tags.size(); ++c) {
        std::vector<Tokens> seqs;
        for (const auto& t : tags) {
          const auto& slots = c == 0 ? t.noun : (c == 1 ? t.verb : t.question);
          seqs.emplace_back(slots.begin(), slots.end());
        }
        MaskSource m = masks.child(kTagMasks + c);
        Var part = encode_sequences(tape, net.tags[c], *net.words, seqs, mode, m);
        g_t = c == 0 ? part : add(g_t, part);
      }
      g_t = scale(g_t, 1.0 / static_cast<double>(net.tags.size()));
    }
    enc.cues.emplace_back("tag");
    enc.embeddings.push_back(g_t);
  }

  if (!net.fusion) {
    enc.g_enc = enc.embeddings.front();
    enc.mus = {enc.g_enc};
    return enc;
  }
  std::vector<Var> raw;
  for (std::size_t k = 0; k < net.fusion->cues.size(); ++k) {
    const Var g_b = enc.embeddings[k + 1];
    MaskSource m = masks.child(kFusionMasks + k);
    enc.mus.push_back(fuse_cue(tape, *net.fusion, net.fusion->cues[k], *g_i, g_b, mode, m));
    raw.push_back(g_b);
  }
  if (net.moderator) {
    MaskSource m = masks.child(kGateMasks);
    std::vector<double> flat;
    for (const auto& f : image_feats) flat.insert(flat.end(), f.begin(), f.end());
    Var x_i = tape.constant(Tensor({batch.size(), cfg.image_dim}, std::move(flat)));
    Var g_gat = mlp_forward(tape, net.moderator->gate, x_i, mode, m);
    enc.pi = moderator_gate(cfg.gate_on == GateInput::kFused ? enc.mus : raw, g_gat, net.moderator->temperature);
    enc.g_enc = mix_encoding(*enc.pi, enc.mus);
  } else {
    enc.g_enc = simple_mixture(tape, *net.mixture, enc.mus);
  }
  return enc;
}

namespace {

struct FirstPass {
  DecodeRun run;
  Var lu_rows;
};

FirstPass uncertainty_pass(Tape& tape, const DecoderParams& dec, Var g, const std::vector<Tokens>& targets,
                           const LstmMasks& dmasks, const MaskSource& masks, const MumcConfig& mc) {
  FirstPass fp{decode_teacher_forced(tape, dec, g, targets, dmasks), {}};
  MaskSource noise = masks.child(kLogitNoise);
  Var lp = gen_loss_rows(fp.run);
  Var ly = aleatoric_mc_loss_rows(fp.run, mc.samples, noise);
  fp.lu_rows = distorted_loss(lp, ly, mc.alpha);
  return fp;
}

}  // namespace

LossValues compute_loss(const Model& model, const std::vector<TrainRow>& rows, const LossOptions& options,
                        bool accumulate) {
  if (rows.empty()) fail(ErrorCode::kInvalidArgument, "compute_loss: empty batch");
  options.mumc_config.validate();
  std::vector<const CueBundle*> batch;
  std::vector<Tokens> targets;
  std::vector<RngStream> streams;
  for (const auto& r : rows) {
    batch.push_back(r.bundle);
    targets.push_back(r.target);
    streams.push_back(r.stream);
  }
  const MaskSource masks(streams);
  const DecoderParams& dec = model.net.decoder;
  const MumcConfig& mc = options.mumc_config;

  Tape tape;
  MaskSource enc_masks = masks;
  const Encoding enc = encode(tape, model, batch, options.mode, enc_masks);
  MaskSource dm_source = masks.child(kDecoderMasks);
  const LstmMasks dmasks = sample_lstm_masks(dec.cell, rows.size(), options.mode, dm_source);

  LossValues out;
  if (!options.mumc) {
    Var loss = gen_loss(decode_teacher_forced(tape, dec, enc.g_enc, targets, dmasks));
    out.total = out.gen = loss.value().item();
    if (accumulate) tape.backward(loss);
    return out;
  }

  const FirstPass first = uncertainty_pass(tape, dec, enc.g_enc, targets, dmasks, masks, mc);
  Var lu = mean(first.lu_rows);
  Var refined_loss;
  std::optional<Var> grad_leaf;
  if (mc.gamma == 0.0) {
    refined_loss = gen_loss(first.run);
  } else {
    const Tensor g_u = tape.gradient(sum(first.lu_rows), enc.g_enc);
    Var g2;
    if (options.stop_gradient) {
      g2 = mumc_refine(enc.g_enc, enc.mus, g_u, mc.gamma);
    } else {
      // G enters as a leaf so the sweep reports dL/dG for the second-order term.
      grad_leaf = tape.leaf(g_u);
      Var cue_sum = enc.mus[0];
      for (std::size_t k = 1; k < enc.mus.size(); ++k) cue_sum = add(cue_sum, enc.mus[k]);
      g2 = add(enc.g_enc, mul(mul(scale(*grad_leaf, -mc.gamma), cue_sum), enc.g_enc));
    }
    refined_loss = gen_loss(decode_teacher_forced(tape, dec, g2, targets, dmasks));
  }
  Var total = total_loss(refined_loss, lu, mc.lambda_u);
  out.total = total.value().item();
  out.gen = refined_loss.value().item();
  out.uncertainty = lu.value().item();
  if (!accumulate) return out;
  tape.backward(total);
  if (!grad_leaf) return out;

  // Second-order term: grad_theta <u, dL_u/dg> with u = dL/dG, by central
  // differences of grad_theta L_u along g -> g + eps u.
  const Tensor u = tape.grad(*grad_leaf);
  double u_max = 0.0;
  for (double v : u.data()) u_max = std::max(u_max, std::abs(v));
  if (u_max == 0.0) return out;
  const double eps = 1e-5 / u_max;
  std::vector<Tensor> saved;
  for (Parameter* p : model.store->all()) {
    saved.push_back(p->grad);
    p->zero_grad();
  }
  for (double sign : {1.0, -1.0}) {
    Tape t2;
    MaskSource m2 = masks;
    const Encoding e2 = encode(t2, model, batch, options.mode, m2);
    Tensor shift = u;
    for (double& v : shift.data()) v *= sign * eps;
    Var g_shift = add(e2.g_enc, t2.constant(shift));
    const FirstPass fp = uncertainty_pass(t2, dec, g_shift, targets, dmasks, masks, mc);
    t2.backward(scale(sum(fp.lu_rows), sign / (2.0 * eps)));
  }
  std::size_t i = 0;
  for (Parameter* p : model.store->all()) {
    const Tensor& s = saved[i++];
    for (std::size_t k = 0; k < p->grad.size(); ++k) p->grad[k] += s[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

struct Prepared {
  Encoding enc;
  LstmMasks dmasks;
  Var g;
};

// Encodes `rows_per` copies of each bundle; with MUMC the encoding is refined
// against the first-pass decision used as pseudo-gold.
Prepared prepare(Tape& tape, const Model& model, const std::vector<const CueBundle*>& batch,
                 const std::vector<RngStream>& streams, Mode mode, const GenerateOptions& options, std::size_t group) {
  const DecoderParams& dec = model.net.decoder;
  MaskSource masks(streams);
  MaskSource enc_masks = masks;
  Prepared p{encode(tape, model, batch, mode, enc_masks), {}, {}};
  MaskSource dm_source = masks.child(kDecoderMasks);
  p.dmasks = sample_lstm_masks(dec.cell, batch.size(), mode, dm_source);
  p.g = p.enc.g_enc;
  if (!options.mumc || options.mumc_config.gamma == 0.0) return p;
  options.mumc_config.validate();
  const auto first = decode_greedy(tape, dec, p.g, p.dmasks, options.max_len, group);
  std::vector<Tokens> pseudo;
  for (const auto& q : first) pseudo.push_back(q.tokens);
  Var leaf = tape.leaf(p.g.value());
  std::vector<Var> mus;
  for (Var m : p.enc.mus) mus.push_back(tape.constant(m.value()));
  const FirstPass fp = uncertainty_pass(tape, dec, leaf, pseudo, p.dmasks, masks, options.mumc_config);
  const Tensor g_u = tape.gradient(sum(fp.lu_rows), leaf);
  p.g = mumc_refine(leaf, mus, g_u, options.mumc_config.gamma);
  return p;
}

// Fills the uncertainty summary of rows [begin, begin + group) that share one
// decision: epistemic is the across-row variance of the emitted token's logit,
// aleatoric the mean predicted variance, both averaged over steps.
void summarize_group(std::vector<QuestionSample>& rows, std::size_t begin, std::size_t group) {
  QuestionSample& head = rows[begin];
  const std::size_t steps = head.tokens.size();
  double epistemic = 0.0, aleatoric = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::vector<double>> logit;
    double v = 0.0;
    for (std::size_t r = begin; r < begin + group; ++r) {
      logit.push_back({rows[r].chosen_logit[s]});
      v += rows[r].chosen_variance[s];
    }
    epistemic += summarize_samples(std::move(logit)).variance[0];
    aleatoric += v / static_cast<double>(group);
  }
  head.epistemic = epistemic / static_cast<double>(steps);
  head.aleatoric = aleatoric / static_cast<double>(steps);
  head.predictive = head.epistemic + head.aleatoric;
}

}  // namespace

std::vector<QuestionSample> generate(const Model& model, const std::vector<const CueBundle*>& batch,
                                     const std::vector<std::uint64_t>& keys, const GenerateOptions& options,
                                     const RngStream& base) {
  if (batch.size() != keys.size()) fail(ErrorCode::kInvalidArgument, "generate: one key per bundle required");
  if (batch.empty()) return {};
  const bool mc = options.decision == Decision::kMcMean;
  if (mc && options.samples == 0) fail(ErrorCode::kInvalidArgument, "generate: T must be >= 1");
  const std::size_t group = mc ? options.samples : 1;
  std::vector<const CueBundle*> rows;
  std::vector<RngStream> streams;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const RngStream ex = base.split(keys[i]);
    for (std::size_t t = 0; t < group; ++t) {
      rows.push_back(batch[i]);
      streams.push_back(mc ? ex.split(t) : ex);
    }
  }
  Tape tape(false);
  const Prepared p = prepare(tape, model, rows, streams, mc ? Mode::kStochastic : Mode::kDeterministic, options, group);
  auto decoded = decode_greedy(tape, model.net.decoder, p.g, p.dmasks, options.max_len, group);
  std::vector<QuestionSample> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    summarize_group(decoded, i * group, group);
    out.push_back(std::move(decoded[i * group]));
  }
  return out;
}

McGeneration generate_mc(const Model& model, const CueBundle& bundle, std::uint64_t key, const GenerateOptions& options,
                         const RngStream& base) {
  if (options.samples == 0) fail(ErrorCode::kInvalidArgument, "generate_mc: T must be >= 1");
  const std::size_t T = options.samples;
  std::vector<const CueBundle*> rows(T, &bundle);
  std::vector<RngStream> streams;
  const RngStream ex = base.split(key);
  for (std::size_t t = 0; t < T; ++t) streams.push_back(ex.split(t));
  Tape tape(false);
  const Prepared p = prepare(tape, model, rows, streams, Mode::kStochastic, options, T);
  McGeneration out;
  out.samples = decode_greedy(tape, model.net.decoder, p.g, p.dmasks, options.max_len, 1);
  for (std::size_t t = 0; t < T; ++t) summarize_group(out.samples, t, 1);
  auto consensus = decode_greedy(tape, model.net.decoder, p.g, p.dmasks, options.max_len, T, true);
  summarize_group(consensus, 0, T);
  std::vector<std::vector<double>> first;
  for (const auto& q : consensus) first.push_back(q.logits.front());
  out.first_step = summarize_samples(std::move(first));
  out.consensus = std::move(consensus.front());
  return out;
}

}  // namespace mcbmn
