// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "mcbmn/metrics.hpp"

namespace mcbmn {
namespace {

// Letters map to ids 10, 11, ...
Tokens T(const std::string& s) {
  Tokens out;
  for (char c : s)
    if (c != ' ') out.push_back(10 + (c - 'a'));
  return out;
}

TEST(Bleu, UnigramAndBigramByHand) {
  const std::vector<Tokens> refs = {T("abxd")};
  EXPECT_DOUBLE_EQ(bleu(T("abcd"), refs, 1), 0.75);
  // p1 = 3/4, p2 = 1/3
  EXPECT_NEAR(bleu(T("abcd"), refs, 2), 0.5, 1e-15);
  EXPECT_EQ(bleu(T("abcd"), refs, 3), 0.0);
}

TEST(Bleu, ClippingAndBrevity) {
  EXPECT_DOUBLE_EQ(bleu(T("aaaa"), {T("ab")}, 1), 0.25);
  EXPECT_DOUBLE_EQ(bleu(T("aa"), {T("ab"), T("aac")}, 1), 1.0);
  EXPECT_NEAR(bleu(T("ab"), {T("abcd")}, 1), std::exp(-1.0), 1e-15);
  EXPECT_EQ(bleu(Tokens{}, {T("ab")}, 1), 0.0);
}

TEST(Bleu, ClosestReferenceLengthPrefersShorter) {
  const BleuStats s = bleu_stats(T("abc"), {T("abcd"), T("ab")});
  EXPECT_EQ(s.cand_len, 3.0);
  EXPECT_EQ(s.ref_len, 2.0);
  EXPECT_EQ(s.matches[0], 3.0);
  EXPECT_EQ(s.totals[1], 2.0);
  EXPECT_DOUBLE_EQ(bleu(T("abc"), {T("abcd"), T("ab")}, 1), 1.0);
}

TEST(Bleu, SmoothingAndCorpusPooling) {
  // p1 = 2/3, bigrams: 0 of 2 matched
  EXPECT_EQ(bleu(T("acb"), {T("ab")}, 2), 0.0);
  EXPECT_NEAR(bleu(T("acb"), {T("ab")}, 2, true), std::sqrt(2.0 / 3.0 * 1.0 / 3.0), 1e-15);

  // Pooled: 1 + 2 unigram matches over 2 + 2; lengths 4 vs 2 + 2.
  const double c = corpus_bleu({T("ax"), T("cd")}, {{T("ab")}, {T("cd")}}, 1);
  EXPECT_DOUBLE_EQ(c, 0.75);
  BleuStats sum = bleu_stats(T("ax"), {T("ab")});
  sum += bleu_stats(T("cd"), {T("cd")});
  EXPECT_EQ(bleu_from_stats(sum, 1), c);
}

TEST(Rouge, LcsAndFMeasure) {
  EXPECT_EQ(lcs_length(T("abcbdab"), T("bdcaba")), 4u);
  EXPECT_EQ(lcs_length(T("abc"), Tokens{}), 0u);
  const double p = 3.0 / 5.0, r = 3.0 / 4.0, b2 = 1.2 * 1.2;
  const double f = (1 + b2) * p * r / (r + b2 * p);
  EXPECT_NEAR(rouge_l(T("abcde"), {T("acex")}), f, 1e-15);
  EXPECT_NEAR(rouge_l(T("abcde"), {T("zz"), T("acex")}), f, 1e-15);
  EXPECT_EQ(rouge_l(T("ab"), {T("cd")}), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l(T("ab"), {T("ab")}), 1.0);
}

TEST(Cider, DistinctExamplesScoreTenOnExactMatch) {
  const CiderScorer s({{T("ab")}, {T("cd")}});
  // Orders 3 and 4 have no n-grams, so only orders 1 and 2 count.
  EXPECT_NEAR(s.score(T("ab"), 0), 10.0, 1e-12);
  EXPECT_EQ(s.score(T("cd"), 0), 0.0);
  EXPECT_EQ(s.score(Tokens{}, 1), 0.0);
  EXPECT_EQ(s.score_all({T("ab"), T("cd")}).size(), 2u);
}

TEST(Cider, NgramsInEveryDocumentCarryNoWeight) {
  const CiderScorer one({{T("ab")}});
  EXPECT_EQ(one.score(T("ab"), 0), 0.0);
}

TEST(Report, StripSpecialAndWordStats) {
  EXPECT_EQ(strip_special({kBos, 10, kPad, 11, kEos, 12}), (Tokens{10, 11}));
  Vocabulary v;
  const int what = v.add("what"), how = v.add("how"), is = v.add("is");
  const WordTable w = question_word_stats({{what, is, kEos}, {how, is, kEos}, {what, kEos}}, v, 2);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w[0][0].first, "what");
  EXPECT_NEAR(w[0][0].second, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(w[0][1].second, 1.0 / 3.0, 1e-15);
  double total = 0.0;
  for (const auto& [word, f] : w[1]) total += f;
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(Report, CorpusEvalScalesAndWrites) {
  const Dataset d = synth_generate(3, 4);
  std::vector<GeneratedQuestion> gen;
  for (const auto& e : d.examples) gen.push_back({e.id, e.questions[0]});
  const EvalReport r = corpus_eval(gen, d);
  EXPECT_DOUBLE_EQ(r.bleu[0], 100.0);
  EXPECT_DOUBLE_EQ(r.rouge, 100.0);
  EXPECT_EQ(r.examples.size(), 3u);
  const auto dir = std::filesystem::temp_directory_path() / "mcbmn_metrics_report";
  std::filesystem::create_directories(dir);
  write_report(r, (dir / "r.json").string(), (dir / "r.csv").string(), (dir / "w.csv").string());
  std::ifstream csv(dir / "r.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_FALSE(header.empty());
  std::filesystem::remove_all(dir);
}

TEST(Bleu, IdentityRepeatsAndDisjoint) {
  for (std::size_t n = 1; n <= 4; ++n) EXPECT_DOUBLE_EQ(bleu(T("abcde"), {T("abcde")}, n), 1.0);
  // "the the the" vs "the cat": clipped 1 of 3, no brevity penalty.
  EXPECT_NEAR(bleu(T("ttt"), {T("tc")}, 1), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(bleu(T("abc"), {T("xyz")}, 1), 0.0);
}

TEST(Rouge, DroppedTokenExample) {
  const double p = 3.0 / 4.0, r = 1.0, b2 = 1.2 * 1.2;
  EXPECT_NEAR(rouge_l(T("abcd"), {T("acd")}), (1 + b2) * p * r / (r + b2 * p), 1e-15);
}

TEST(Cider, DuplicatedReferencesLeaveScoresUnchanged) {
  const std::vector<std::vector<Tokens>> refs = {{T("abc"), T("abd")}, {T("cde")}, {T("xab"), T("cd")}};
  std::vector<std::vector<Tokens>> doubled;
  for (const auto& r : refs) {
    doubled.push_back(r);
    doubled.back().insert(doubled.back().end(), r.begin(), r.end());
  }
  const CiderScorer a(refs), b(doubled);
  for (const Tokens& c : {T("abc"), T("cd"), T("xabd"), T("q")})
    for (std::size_t i = 0; i < refs.size(); ++i) EXPECT_NEAR(a.score(c, i), b.score(c, i), 1e-12);
}

TEST(Report, WordStatsCountingOracle) {
  Vocabulary v;
  const int what = v.add("what"), is = v.add("is");
  const WordTable same = question_word_stats(std::vector<Tokens>(3, Tokens{what, is, kEos}), v, 1);
  ASSERT_EQ(same[0].size(), 1u);
  EXPECT_EQ(same[0][0].first, "what");
  EXPECT_EQ(same[0][0].second, 1.0);

  const Dataset d = synth_generate(10, 8);
  std::vector<Tokens> qs;
  for (const auto& e : d.examples) qs.push_back(e.questions[0]);
  const WordTable w = question_word_stats(qs, d.vocab, 4);
  for (std::size_t pos = 0; pos < 4; ++pos) {
    std::map<std::string, double> count;
    double total = 0.0;
    for (const auto& q : qs) {
      const Tokens s = strip_special(q);
      if (s.size() <= pos) continue;
      count[d.vocab.token(s[pos])] += 1.0;
      total += 1.0;
    }
    ASSERT_EQ(w[pos].size(), count.size());
    for (const auto& [word, f] : w[pos]) EXPECT_NEAR(f, count.at(word) / total, 1e-15) << word;
  }
}

}  // namespace
}  // namespace mcbmn
