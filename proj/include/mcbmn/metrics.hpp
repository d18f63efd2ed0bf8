// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mcbmn/cue_pipeline.hpp"

namespace mcbmn {

inline constexpr std::size_t kMaxBleuOrder = 4;

/// Clipped n-gram matches and candidate n-gram totals per order, plus the
/// candidate length and the closest reference length (shorter on ties).
struct BleuStats {
  std::array<double, kMaxBleuOrder> matches{};
  std::array<double, kMaxBleuOrder> totals{};
  double cand_len = 0.0;
  double ref_len = 0.0;

  BleuStats& operator+=(const BleuStats& o);
};

BleuStats bleu_stats(const Tokens& candidate, const std::vector<Tokens>& references);
/// Geometric mean of orders 1..n times the brevity penalty. With `smooth`,
/// orders >= 2 use (m + 1) / (t + 1).
double bleu_from_stats(const BleuStats& stats, std::size_t n, bool smooth = false);
/// Score in [0, 1]; 0 for an empty candidate.
double bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t n, bool smooth = false);
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                   std::size_t n, bool smooth = false);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS F-measure with recall weight beta, maximised over references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta = 1.2);

/// TF-IDF n-gram cosine similarity against a reference corpus. Document
/// frequencies count the examples whose references contain an n-gram.
class CiderScorer {
 public:
  explicit CiderScorer(const std::vector<std::vector<Tokens>>& references);
  /// 10 x the mean over orders 1..4 of the reference-averaged cosine. An
  /// order only counts when some reference of the example has a nonzero
  /// weight vector at that order.
  double score(const Tokens& candidate, std::size_t example) const;
  std::vector<double> score_all(const std::vector<Tokens>& candidates) const;

 private:
  std::vector<std::vector<Tokens>> refs_;
  std::vector<std::vector<std::pair<Tokens, double>>> df_;  // per order, sorted
  double log_docs_ = 0.0;

  double doc_freq(std::size_t order, const Tokens& gram) const;
};

enum class BleuAggregation { kMaxRef, kCorpus };

struct ExampleScores {
  std::string id;
  std::array<double, kMaxBleuOrder> bleu{};
  double rouge = 0.0;
  double cider = 0.0;
};

using WordTable = std::vector<std::vector<std::pair<std::string, double>>>;

struct EvalReport {
  std::array<double, kMaxBleuOrder> bleu{};  // x100
  double rouge = 0.0;                         // x100
  double cider = 0.0;
  BleuAggregation aggregation = BleuAggregation::kMaxRef;
  std::vector<ExampleScores> examples;
  WordTable first_words;
};

struct GeneratedQuestion {
  std::string id;
  Tokens tokens;
};

/// Strips BOS, PAD and everything from EOS on.
Tokens strip_special(const Tokens& t);

EvalReport corpus_eval(const std::vector<GeneratedQuestion>& generated, const Dataset& data,
                       BleuAggregation aggregation = BleuAggregation::kMaxRef, bool smooth = false);

/// Per position 1..positions, tokens sorted by decreasing frequency (ties by
/// token text); frequencies at each position sum to 1.
WordTable question_word_stats(const std::vector<Tokens>& questions, const Vocabulary& vocab,
                              std::size_t positions = 4);

void write_report(const EvalReport& report, const std::string& json_path, const std::string& csv_path,
                  const std::string& words_csv_path);

}  // namespace mcbmn
