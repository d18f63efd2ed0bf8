// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mcbmn/error.hpp"
#include "mcbmn/grad_check.hpp"
#include "mcbmn/model.hpp"

namespace mcbmn {
namespace {

ModelConfig small_config(const Dataset& d) {
  ModelConfig c;
  c.hidden_dim = 6;
  c.embed_dim = 5;
  c.encoder_hidden = 4;
  c.image_dim = d.image_dim;
  c.place_dim = d.place_dim;
  c.vocab_size = d.vocab.size();
  c.dropout_rate = 0.2;
  return c;
}

ErrorCode config_error_of(ModelConfig c) {
  try {
    c.validate();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kIoError;
}

TEST(ModelConfig, Validation) {
  const Dataset d = synth_generate(2, 1);
  ModelConfig c = small_config(d);
  c.validate();
  auto broken = c;
  broken.cues = {"place", "caption"};
  EXPECT_EQ(config_error_of(broken), ErrorCode::kConfigError);
  broken = c;
  broken.cues = {"image", "image"};
  EXPECT_EQ(config_error_of(broken), ErrorCode::kConfigError);
  broken = c;
  broken.cues = {"audio"};
  EXPECT_EQ(config_error_of(broken), ErrorCode::kConfigError);
  broken = c;
  broken.dropout_rate = 1.0;
  EXPECT_EQ(config_error_of(broken), ErrorCode::kConfigError);
  broken = c;
  broken.fusion_init_gain = 0.0;
  EXPECT_EQ(config_error_of(broken), ErrorCode::kConfigError);
  broken = c;
  broken.cues = {"caption"};
  broken.validate();
  EXPECT_EQ(c.aux_cues(), (std::vector<std::string>{"place", "caption", "tag"}));
  EXPECT_EQ(parse_combiner(to_string(Combiner::kMixture)), Combiner::kMixture);
  EXPECT_THROW(parse_combiner("sum"), Error);
}

TEST(Model, EncodingWeightsLieOnSimplex) {
  const Dataset d = synth_generate(3, 2);
  const Model m = Model::create(small_config(d), RngStream(5));
  Tape t;
  MaskSource masks = MaskSource::split_rows(RngStream(6), 3);
  const Encoding e = encode(t, m, {&d.examples[0], &d.examples[1], &d.examples[2]}, Mode::kStochastic, masks);
  EXPECT_EQ(e.cues.size(), 4u);
  ASSERT_TRUE(e.pi.has_value());
  const Tensor& pi = e.pi->value();
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < pi.cols(); ++k) {
      EXPECT_GE(pi.at(r, k), 0.0);
      s += pi.at(r, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(e.g_enc.shape(), (Shape{3, 6}));

  auto mix = small_config(d);
  mix.combiner = Combiner::kMixture;
  const Model mm = Model::create(mix, RngStream(5));
  MaskSource m2 = MaskSource::split_rows(RngStream(6), 1);
  EXPECT_FALSE(encode(t, mm, {&d.examples[0]}, Mode::kStochastic, m2).pi.has_value());
}

TEST(Model, WithDropoutSharesParameters) {
  const Dataset d = synth_generate(1, 2);
  const Model m = Model::create(small_config(d), RngStream(5));
  const Model off = m.with_dropout(0.0, DropoutKind::kNone);
  EXPECT_EQ(off.store, m.store);
  m.store->all().front()->value[0] = 123.0;
  EXPECT_EQ(off.store->all().front()->value[0], 123.0);
  EXPECT_EQ(off.config.dropout_rate, 0.0);
}

// Equal-length targets: the batch loss is the mean of the single-row losses,
// because each row owns its stream.
TEST(Loss, BatchEqualsMeanOfRows) {
  const Dataset d = synth_generate(3, 2);
  const Model m = Model::create(small_config(d), RngStream(5));
  std::vector<TrainRow> rows;
  for (std::size_t i = 0; i < 3; ++i) rows.push_back({&d.examples[i], {5, 6, 7, kEos}, RngStream(9).split(i)});
  for (bool mumc : {false, true}) {
    LossOptions o;
    o.mumc = mumc;
    o.mumc_config.samples = 3;
    o.mumc_config.gamma = 0.5;
    const LossValues all = compute_loss(m, rows, o, false);
    double total = 0.0, unc = 0.0;
    for (const auto& r : rows) {
      const LossValues one = compute_loss(m, {r}, o, false);
      total += one.total / 3.0;
      unc += one.uncertainty / 3.0;
    }
    EXPECT_NEAR(all.total, total, 1e-12) << "mumc " << mumc;
    EXPECT_NEAR(all.uncertainty, unc, 1e-12);
  }
}

TEST(Loss, AccumulatedGradientMatchesFiniteDifferences) {
  const Dataset d = synth_generate(2, 3);
  auto cfg = small_config(d);
  cfg.cues = {"image", "caption"};
  const Model m = Model::create(cfg, RngStream(5));
  std::vector<TrainRow> rows = {{&d.examples[0], d.examples[0].questions[0], RngStream(4).split(0)},
                                {&d.examples[1], d.examples[1].questions[1], RngStream(4).split(1)}};
  LossOptions o;
  o.mumc_config.samples = 2;
  o.mumc_config.gamma = 0.3;
  m.store->zero_grad();
  compute_loss(m, rows, o, true);
  const double h = 1e-5;
  double worst = 0.0;
  for (Parameter* p : m.store->all()) {
    for (std::size_t i = 0; i < p->value.size(); i += 7) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = compute_loss(m, rows, o, false).total;
      p->value[i] = keep - h;
      const double down = compute_loss(m, rows, o, false).total;
      p->value[i] = keep;
      const double num = (up - down) / (2 * h), ana = p->grad[i];
      worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), kGradCheckGuard}));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Generate, ReproducibleAndKeyedPerBundle) {
  const Dataset d = synth_generate(2, 2);
  const Model m = Model::create(small_config(d), RngStream(5));
  GenerateOptions o;
  o.decision = Decision::kMcMean;
  o.samples = 4;
  o.max_len = 5;
  const auto a = generate(m, {&d.examples[0], &d.examples[1]}, {10, 11}, o, RngStream(3));
  const auto b = generate(m, {&d.examples[1]}, {11}, o, RngStream(3));
  EXPECT_EQ(a[1].tokens, b[0].tokens);
  EXPECT_EQ(a[1].epistemic, b[0].epistemic);
  EXPECT_GE(a[0].epistemic, 0.0);

  const McGeneration mc = generate_mc(m, d.examples[0], 10, o, RngStream(3));
  EXPECT_EQ(mc.samples.size(), 4u);
  EXPECT_EQ(mc.first_step.samples, 4u);
  EXPECT_EQ(parse_decision(to_string(Decision::kMcMean)), Decision::kMcMean);
}

TEST(Generate, McSamplesCollapseWithoutDropoutAndSpreadWithIt) {
  const Dataset d = synth_generate(2, 2);
  const ModelConfig c = small_config(d);
  GenerateOptions o;
  o.samples = 20;
  o.max_len = 6;

  ModelConfig none = c;
  none.dropout_rate = 0.0;
  const Model m0 = Model::create(none, RngStream(5));
  const McGeneration a = generate_mc(m0, d.examples[0], 1, o, RngStream(3));
  for (const auto& s : a.samples) EXPECT_EQ(s.tokens, a.samples[0].tokens);
  EXPECT_EQ(a.consensus.epistemic, 0.0);

  ModelConfig noisy = c;
  noisy.dropout_rate = 0.3;
  const Model m1 = Model::create(noisy, RngStream(5));
  const McGeneration b = generate_mc(m1, d.examples[0], 1, o, RngStream(3));
  std::set<Tokens> distinct;
  for (const auto& s : b.samples) distinct.insert(s.tokens);
  EXPECT_GE(distinct.size(), 2u);
  EXPECT_GE(b.consensus.epistemic, 0.0);
  EXPECT_GE(b.consensus.aleatoric, 0.0);
  EXPECT_NEAR(b.consensus.predictive, b.consensus.epistemic + b.consensus.aleatoric, 1e-15);
}

}  // namespace
}  // namespace mcbmn
