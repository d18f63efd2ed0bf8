// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mcbmn/cue_pipeline.hpp"
#include "mcbmn/error.hpp"

namespace mcbmn {
namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mcbmn_cue_" + name);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIoError;
}

TEST(Vocabulary, ReservedTokensAndRoundTrip) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.id("<unk>"), kUnk);
  const int cat = v.add("cat");
  EXPECT_EQ(v.add("cat"), cat);
  const int sits = v.add("sits");
  EXPECT_EQ(v.encode("cat sits dog"), (Tokens{cat, sits, kUnk}));
  EXPECT_EQ(v.decode({kBos, cat, kPad, sits, kEos, cat}), "cat sits");
  EXPECT_THROW(v.token(99), Error);
}

TEST(Vocabulary, RejectsBadTokenLists) {
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"a", "b"}), Error);
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "x", "x"}), Error);
}

TEST(Tags, CaptionOrderPaddingAndDistinctQuestionWords) {
  Vocabulary v;
  const int man = v.add("man"), dog = v.add("dog"), runs = v.add("runs"), red = v.add("red");
  const int what = v.add("what"), why = v.add("why"), is = v.add("is");
  Lexicon lex{{"man", PartOfSpeech::kNoun}, {"dog", PartOfSpeech::kNoun}, {"runs", PartOfSpeech::kVerb},
              {"red", PartOfSpeech::kOther}};
  const TagSet t = extract_tags({red, dog, runs, man}, {{what, is, kEos}, {is, kEos}, {what, kEos}, {why, kEos}}, v, lex);
  EXPECT_EQ(t.noun, (std::array<int, kTagSlots>{dog, man, kPad, kPad, kPad}));
  EXPECT_EQ(t.verb, (std::array<int, kTagSlots>{runs, kPad, kPad, kPad, kPad}));
  EXPECT_EQ(t.question, (std::array<int, kTagSlots>{what, why, kPad, kPad, kPad}));
  EXPECT_EQ(t.flattened().size(), 3 * kTagSlots);
}

TEST(Tags, TruncatesAfterFiveSlots) {
  Vocabulary v;
  Lexicon lex;
  Tokens caption;
  for (int i = 0; i < 7; ++i) {
    const std::string w = "n" + std::to_string(i);
    caption.push_back(v.add(w));
    lex[w] = PartOfSpeech::kNoun;
  }
  const TagSet t = extract_tags(caption, {}, v, lex);
  EXPECT_EQ(t.noun, (std::array<int, kTagSlots>{caption[0], caption[1], caption[2], caption[3], caption[4]}));
}

TEST(Dataset, SaveLoadRoundTrip) {
  const Dataset d = synth_generate(6, 11);
  const auto path = temp_file("roundtrip.jsonl");
  save_dataset(d, path.string());
  const Dataset r = load_dataset(path.string());
  EXPECT_EQ(r.vocab.tokens(), d.vocab.tokens());
  EXPECT_EQ(r.image_dim, d.image_dim);
  ASSERT_EQ(r.examples.size(), d.examples.size());
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    EXPECT_EQ(r.examples[i].id, d.examples[i].id);
    EXPECT_EQ(r.examples[i].image_feat, d.examples[i].image_feat);
    EXPECT_EQ(r.examples[i].place_feat, d.examples[i].place_feat);
    EXPECT_EQ(r.examples[i].caption, d.examples[i].caption);
    EXPECT_EQ(r.examples[i].tags, d.examples[i].tags);
    EXPECT_EQ(r.examples[i].questions, d.examples[i].questions);
  }
  EXPECT_EQ(&r.find(d.examples[3].id), &r.examples[3]);
  EXPECT_THROW(r.find("nope"), Error);
  std::filesystem::remove(path);
}

TEST(Dataset, LoadErrorsCarryClassAndLine) {
  EXPECT_EQ(code_of([] { load_dataset("/nonexistent/mcbmn.jsonl"); }), ErrorCode::kDatasetNotFound);

  const auto path = temp_file("bad.jsonl");
  save_dataset(synth_generate(2, 1), path.string());
  {
    std::ofstream out(path, std::ios::app);
    out << "{not json\n";
  }
  try {
    load_dataset(path.string());
    ADD_FAILURE() << "malformed line accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDatasetInvalid);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }

  Dataset d = synth_generate(2, 1);
  d.examples[1].image_feat.pop_back();
  EXPECT_EQ(code_of([&] { validate_dataset(d); }), ErrorCode::kDatasetInvalid);
  d = synth_generate(2, 1);
  d.examples[0].questions[0].pop_back();
  EXPECT_EQ(code_of([&] { validate_dataset(d); }), ErrorCode::kDatasetInvalid);
  std::filesystem::remove(path);
}

TEST(Synth, ExampleIsPureFunctionOfSeedAndIndex) {
  const Dataset a = synth_generate(5, 42);
  const Dataset b = synth_generate(9, 42);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.examples[i].image_feat, b.examples[i].image_feat);
    EXPECT_EQ(a.examples[i].questions, b.examples[i].questions);
    const CueBundle alone = synth_example(42, i);
    EXPECT_EQ(alone.caption, a.examples[i].caption);
  }
  const Dataset c = synth_generate(5, 43);
  EXPECT_NE(a.examples[0].image_feat, c.examples[0].image_feat);
  validate_dataset(a);
}

TEST(Synth, NoiseFreeFeaturesAreIndicators) {
  SceneSpec s;
  const CueBundle b = synth_example(3, 0, SynthOptions{0.0, 5}, &s);
  EXPECT_EQ(b.image_feat, image_indicator(s));
  EXPECT_EQ(b.place_feat, place_indicator(s));
  double ones = 0.0;
  for (double v : b.image_feat) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    ones += v;
  }
  EXPECT_EQ(ones, 3.0);
  EXPECT_EQ(scene_questions(s).size(), question_words().size());
  EXPECT_EQ(b.questions.size(), 5u);
}

TEST(Synth, TagsMatchExtraction) {
  const Dataset d = synth_generate(4, 5);
  const Lexicon lex = scene_lexicon();
  for (const auto& e : d.examples) EXPECT_EQ(e.tags, extract_tags(e.caption, e.questions, d.vocab, lex));
}

// One token from a zero state: c = i * g, h = o * tanh(c), with the packed
// gate order (input, forget, output, candidate).
TEST(Encoders, SingleTokenCaptionMatchesHandRecurrence) {
  ParameterStore store;
  const std::size_t E = 3, H = 4;
  auto emb = EmbeddingTable::create(store, "emb", E, 6, RngStream(1));
  auto cell = BayesianLSTMCell::create(store, "cap", E, H, 0.0, DropoutKind::kNone, RngStream(2));
  Tape tape;
  MaskSource masks = MaskSource::split_rows(RngStream(3), 1);
  const Tensor out = encode_caption(tape, cell, emb, {{4}}, Mode::kDeterministic, masks).value();
  const Tensor& W = cell.weight->value;
  const Tensor& b = cell.bias->value;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < H; ++j) {
    std::array<double, 4> z{};
    for (std::size_t gate = 0; gate < 4; ++gate) {
      z[gate] = b[gate * H + j];
      for (std::size_t k = 0; k < E; ++k) z[gate] += emb.weight->value.at(k, 4) * W.at(k, gate * H + j);
    }
    const double c = sig(z[0]) * std::tanh(z[3]);
    EXPECT_NEAR(out.at(0, j), sig(z[2]) * std::tanh(c), 1e-14);
  }
}

TEST(Encoders, RaggedBatchRowsMatchSingleRuns) {
  ParameterStore store;
  auto emb = EmbeddingTable::create(store, "emb", 3, 8, RngStream(1));
  auto cell = BayesianLSTMCell::create(store, "cap", 3, 5, 0.3, DropoutKind::kBernoulli, RngStream(2));
  const std::vector<Tokens> seqs = {{4, 5, 6, 7}, {5}, {6, 4}};
  Tape tape;
  MaskSource all = MaskSource::split_rows(RngStream(9), 3);
  const Tensor batch = encode_sequences(tape, cell, emb, seqs, Mode::kStochastic, all).value();
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    MaskSource one({RngStream(9).split(r)});
    const Tensor single = encode_sequences(tape, cell, emb, {seqs[r]}, Mode::kStochastic, one).value();
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(batch.at(r, j), single.at(0, j));
  }
  EXPECT_THROW(encode_sequences(tape, cell, emb, {{}}, Mode::kStochastic, all), Error);
}

TEST(Encoders, TagsEncodeTheFlattenedSequence) {
  ParameterStore store;
  auto emb = EmbeddingTable::create(store, "emb", 3, 12, RngStream(1));
  auto cell = BayesianLSTMCell::create(store, "tag", 3, 4, 0.0, DropoutKind::kNone, RngStream(2));
  TagSet t;
  t.noun = {4, 5, 0, 0, 0};
  t.verb = {6, 0, 0, 0, 0};
  t.question = {7, 8, 0, 0, 0};
  Tape tape;
  MaskSource a = MaskSource::split_rows(RngStream(3), 1), b = MaskSource::split_rows(RngStream(3), 1);
  EXPECT_EQ(encode_tags(tape, cell, emb, {t}, Mode::kDeterministic, a).value(),
            encode_sequences(tape, cell, emb, {t.flattened()}, Mode::kDeterministic, b).value());
}

TEST(Encoders, FeatureBatchMustBeRectangular) {
  ParameterStore store;
  auto net = BayesianMLP::create(store, "img", {3, 4}, 0.0, DropoutKind::kNone, RngStream(1));
  Tape tape;
  MaskSource m = MaskSource::split_rows(RngStream(3), 2);
  EXPECT_EQ(encode_features(tape, net, {{1, 2, 3}, {0, 0, 1}}, Mode::kDeterministic, m).shape(), (Shape{2, 4}));
  EXPECT_EQ(code_of([&] { encode_features(tape, net, {{1, 2, 3}, {0, 1}}, Mode::kDeterministic, m); }),
            ErrorCode::kDimensionMismatch);
}

TEST(Tags, SceneLexiconExamples) {
  const Vocabulary v = scene_vocabulary();
  const Lexicon lex = scene_lexicon();
  const TagSet t = extract_tags(v.encode("a dog is running at the beach"), {v.encode("what is the dog doing ?")}, v, lex);
  EXPECT_EQ(t.noun, (std::array<int, kTagSlots>{v.id("dog"), v.id("beach"), kPad, kPad, kPad}));
  EXPECT_EQ(t.verb, (std::array<int, kTagSlots>{v.id("running"), kPad, kPad, kPad, kPad}));
  EXPECT_EQ(t.question, (std::array<int, kTagSlots>{v.id("what"), kPad, kPad, kPad, kPad}));
  EXPECT_EQ(extract_tags({}, {}, v, lex), TagSet{});
}

TEST(Synth, FirstWordsCoverQuestionWords) {
  const Dataset d = synth_generate(500, 7);
  std::set<int> first;
  for (const auto& e : d.examples)
    for (const auto& q : e.questions) first.insert(q.front());
  std::size_t covered = 0;
  for (const auto& w : question_words()) covered += first.count(d.vocab.id(w));
  EXPECT_GE(covered, 4u);
}

TEST(Encoders, ZeroEmbeddingsGiveZeroInputRecurrence) {
  ParameterStore store;
  auto emb = EmbeddingTable::create(store, "emb", 3, 8, RngStream(1));
  for (double& v : emb.weight->value.data()) v = 0.0;
  auto cell = BayesianLSTMCell::create(store, "cap", 3, 4, 0.0, DropoutKind::kNone, RngStream(2));
  Tape tape;
  MaskSource m = MaskSource::split_rows(RngStream(3), 1);
  const Tensor g = encode_caption(tape, cell, emb, {{4, 6, 5}}, Mode::kDeterministic, m).value();
  MaskSource m2 = MaskSource::split_rows(RngStream(3), 1);
  const LstmMasks masks = sample_lstm_masks(cell, 1, Mode::kDeterministic, m2);
  std::vector<Var> zeros(3, tape.constant(Tensor({1, 3})));
  const auto run = lstm_sequence(tape, cell, zeros, lstm_zero_state(tape, cell, 1), masks);
  EXPECT_EQ(g, run.final_output.value());
}

TEST(Encoders, CaptionOrderMatters) {
  ParameterStore store;
  auto emb = EmbeddingTable::create(store, "emb", 3, 8, RngStream(1));
  auto cell = BayesianLSTMCell::create(store, "cap", 3, 4, 0.0, DropoutKind::kNone, RngStream(2));
  Tape tape;
  MaskSource m = MaskSource::split_rows(RngStream(3), 2);
  const Tensor g = encode_caption(tape, cell, emb, {{4, 5, 6}, {5, 4, 6}}, Mode::kDeterministic, m).value();
  EXPECT_NE(g.row(0), g.row(1));
}

TEST(Encoders, FeatureEncoderShapeDeterminismAndVariance) {
  ParameterStore store;
  auto net = BayesianMLP::create(store, "img", {6, 8, 5}, 0.3, DropoutKind::kBernoulli, RngStream(1));
  const std::vector<std::vector<double>> x = {{1, 0, 0.5, -1, 2, 0}};
  Tape tape;
  MaskSource a = MaskSource::split_rows(RngStream(3), 1), b = MaskSource::split_rows(RngStream(4), 1);
  const Tensor d1 = encode_features(tape, net, x, Mode::kDeterministic, a).value();
  EXPECT_EQ(d1.shape(), (Shape{1, 5}));
  EXPECT_EQ(d1, encode_features(tape, net, x, Mode::kDeterministic, b).value());

  std::vector<std::vector<double>> draws;
  for (std::uint64_t s = 0; s < 200; ++s) {
    MaskSource m = MaskSource::split_rows(RngStream(100 + s), 1);
    draws.push_back(encode_features(tape, net, x, Mode::kStochastic, m).value().row(0));
  }
  for (double v : summarize_samples(draws).variance) EXPECT_GT(v, 0.0);
}

}  // namespace
}  // namespace mcbmn
