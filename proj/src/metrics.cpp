// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "mcbmn/error.hpp"

namespace mcbmn {

namespace {

using Counts = std::map<Tokens, double>;

Counts ngram_counts(const Tokens& s, std::size_t n) {
  Counts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out[Tokens(s.begin() + i, s.begin() + i + n)] += 1.0;
  return out;
}

void require_refs(const std::vector<Tokens>& references, const char* metric) {
  if (references.empty()) fail(ErrorCode::kInvalidArgument, std::string(metric) + ": no references");
}

}  // namespace

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t k = 0; k < kMaxBleuOrder; ++k) {
    matches[k] += o.matches[k];
    totals[k] += o.totals[k];
  }
  cand_len += o.cand_len;
  ref_len += o.ref_len;
  return *this;
}

BleuStats bleu_stats(const Tokens& candidate, const std::vector<Tokens>& references) {
  require_refs(references, "bleu");
  BleuStats st;
  st.cand_len = static_cast<double>(candidate.size());
  std::size_t best = references.front().size();
  for (const auto& r : references) {
    const auto diff = [&](std::size_t len) {
      return len > candidate.size() ? len - candidate.size() : candidate.size() - len;
    };
    if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
  }
  st.ref_len = static_cast<double>(best);
  for (std::size_t n = 1; n <= kMaxBleuOrder; ++n) {
    const Counts cand = ngram_counts(candidate, n);
    Counts max_ref;
    for (const auto& r : references) {
      for (const auto& [gram, c] : ngram_counts(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    for (const auto& [gram, c] : cand) {
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) st.matches[n - 1] += std::min(c, it->second);
      st.totals[n - 1] += c;
    }
  }
  return st;
}

double bleu_from_stats(const BleuStats& st, std::size_t n, bool smooth) {
  if (n < 1 || n > kMaxBleuOrder) fail(ErrorCode::kInvalidArgument, "bleu: order must be in 1..4");
  if (st.cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double m = st.matches[k], t = st.totals[k];
    if (smooth && k > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (t == 0.0 || m == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = st.cand_len < st.ref_len ? std::exp(1.0 - st.ref_len / st.cand_len) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(n));
}

double bleu(const Tokens& candidate, const std::vector<Tokens>& references, std::size_t n, bool smooth) {
  return bleu_from_stats(bleu_stats(candidate, references), n, smooth);
}

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                   std::size_t n, bool smooth) {
  if (candidates.size() != references.size()) {
    fail(ErrorCode::kDimensionMismatch, "corpus_bleu: one reference set per candidate required");
  }
  if (candidates.empty()) fail(ErrorCode::kInvalidArgument, "corpus_bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += bleu_stats(candidates[i], references[i]);
  return bleu_from_stats(total, n, smooth);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta) {
  require_refs(references, "rouge_l");
  double best = 0.0;
  for (const auto& r : references) {
    const double lcs = static_cast<double>(lcs_length(candidate, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(r.size());
    const double f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
    best = std::max(best, f);
  }
  return best;
}

// ---------------------------------------------------------------------------
// CIDEr

CiderScorer::CiderScorer(const std::vector<std::vector<Tokens>>& references) : refs_(references) {
  if (refs_.empty()) fail(ErrorCode::kInvalidArgument, "cider: empty corpus");
  for (const auto& r : refs_) require_refs(r, "cider");
  log_docs_ = std::log(static_cast<double>(refs_.size()));
  df_.resize(kMaxBleuOrder);
  for (std::size_t n = 1; n <= kMaxBleuOrder; ++n) {
    std::map<Tokens, double> df;
    for (const auto& example : refs_) {
      std::map<Tokens, bool> seen;
      for (const auto& r : example)
        for (const auto& [gram, c] : ngram_counts(r, n)) seen[gram] = true;
      for (const auto& [gram, _] : seen) df[gram] += 1.0;
    }
    df_[n - 1].assign(df.begin(), df.end());
  }
}

double CiderScorer::doc_freq(std::size_t order, const Tokens& gram) const {
  const auto& table = df_[order - 1];
  auto it = std::lower_bound(table.begin(), table.end(), gram,
                             [](const std::pair<Tokens, double>& e, const Tokens& g) { return e.first < g; });
  return it != table.end() && it->first == gram ? it->second : 0.0;
}

double CiderScorer::score(const Tokens& candidate, std::size_t example) const {
  if (example >= refs_.size()) fail(ErrorCode::kInvalidArgument, "cider: example index out of range");
  auto weights = [&](const Tokens& s, std::size_t n) {
    Counts v = ngram_counts(s, n);
    for (auto& [gram, c] : v) c *= log_docs_ - std::log(std::max(1.0, doc_freq(n, gram)));
    return v;
  };
  auto norm = [](const Counts& v) {
    double s = 0.0;
    for (const auto& [_, w] : v) s += w * w;
    return std::sqrt(s);
  };
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t n = 1; n <= kMaxBleuOrder; ++n) {
    const Counts cv = weights(candidate, n);
    const double cn = norm(cv);
    double per_n = 0.0;
    bool any = false;
    for (const auto& r : refs_[example]) {
      const Counts rv = weights(r, n);
      const double rn = norm(rv);
      if (rn == 0.0) continue;
      any = true;
      if (cn == 0.0) continue;
      double dot = 0.0;
      for (const auto& [gram, w] : cv) {
        auto it = rv.find(gram);
        if (it != rv.end()) dot += w * it->second;
      }
      per_n += dot / (cn * rn);
    }
    if (!any) continue;
    total += per_n / static_cast<double>(refs_[example].size());
    ++defined;
  }
  return defined == 0 ? 0.0 : 10.0 * total / static_cast<double>(defined);
}

std::vector<double> CiderScorer::score_all(const std::vector<Tokens>& candidates) const {
  if (candidates.size() != refs_.size()) fail(ErrorCode::kDimensionMismatch, "cider: one candidate per example");
  std::vector<double> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.push_back(score(candidates[i], i));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus evaluation

Tokens strip_special(const Tokens& t) {
  Tokens out;
  for (int id : t) {
    if (id == kEos) break;
    if (id == kBos || id == kPad) continue;
    out.push_back(id);
  }
  return out;
}

EvalReport corpus_eval(const std::vector<GeneratedQuestion>& generated, const Dataset& data,
                       BleuAggregation aggregation, bool smooth) {
  if (generated.empty()) fail(ErrorCode::kInvalidArgument, "corpus_eval: empty generation set");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.examples.size(); ++i) index[data.examples[i].id] = i;

  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  EvalReport report;
  report.aggregation = aggregation;
  for (const auto& g : generated) {
    auto it = index.find(g.id);
    if (it == index.end()) fail(ErrorCode::kDatasetInvalid, "generated id '" + g.id + "' is not in the dataset");
    cands.push_back(strip_special(g.tokens));
    std::vector<Tokens> r;
    for (const auto& q : data.examples[it->second].questions) r.push_back(strip_special(q));
    refs.push_back(std::move(r));
  }
  const CiderScorer cider(refs);
  const double n_ex = static_cast<double>(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    ExampleScores s;
    s.id = generated[i].id;
    for (std::size_t n = 1; n <= kMaxBleuOrder; ++n) {
      double best = 0.0;
      for (const auto& r : refs[i]) best = std::max(best, bleu(cands[i], {r}, n, smooth));
      s.bleu[n - 1] = 100.0 * best;
    }
    s.rouge = 100.0 * rouge_l(cands[i], refs[i]);
    s.cider = cider.score(cands[i], i);
    report.rouge += s.rouge / n_ex;
    report.cider += s.cider / n_ex;
    if (aggregation == BleuAggregation::kMaxRef)
      for (std::size_t n = 0; n < kMaxBleuOrder; ++n) report.bleu[n] += s.bleu[n] / n_ex;
    report.examples.push_back(std::move(s));
  }
  if (aggregation == BleuAggregation::kCorpus) {
    for (std::size_t n = 1; n <= kMaxBleuOrder; ++n) report.bleu[n - 1] = 100.0 * corpus_bleu(cands, refs, n, smooth);
  }
  std::vector<Tokens> questions;
  for (const auto& g : generated) questions.push_back(g.tokens);
  report.first_words = question_word_stats(questions, data.vocab);
  return report;
}

WordTable question_word_stats(const std::vector<Tokens>& questions, const Vocabulary& vocab, std::size_t positions) {
  if (questions.empty()) fail(ErrorCode::kInvalidArgument, "question_word_stats: no questions");
  WordTable table(positions);
  for (std::size_t pos = 0; pos < positions; ++pos) {
    std::map<std::string, double> counts;
    double total = 0.0;
    for (const auto& q : questions) {
      const Tokens s = strip_special(q);
      if (pos < s.size()) {
        counts[vocab.token(s[pos])] += 1.0;
        total += 1.0;
      }
    }
    for (const auto& [w, c] : counts) table[pos].emplace_back(w, c / total);
    std::stable_sort(table[pos].begin(), table[pos].end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
  }
  return table;
}

void write_report(const EvalReport& report, const std::string& json_path, const std::string& csv_path,
                  const std::string& words_csv_path) {
  nlohmann::ordered_json j;
  j["aggregation"] = report.aggregation == BleuAggregation::kMaxRef ? "max_ref" : "corpus";
  j["examples"] = report.examples.size();
  for (std::size_t n = 0; n < kMaxBleuOrder; ++n) j["bleu_" + std::to_string(n + 1)] = report.bleu[n];
  j["rouge_l"] = report.rouge;
  j["cider"] = report.cider;
  std::ofstream out(json_path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write report '" + json_path + "'");
  out << j.dump(2) << '\n';

  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) fail(ErrorCode::kIoError, "cannot write report '" + csv_path + "'");
  csv << "id,bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider\n";
  for (const auto& s : report.examples) {
    nlohmann::json row = {s.bleu[0], s.bleu[1], s.bleu[2], s.bleu[3], s.rouge, s.cider};
    csv << s.id;
    for (const auto& v : row) csv << ',' << v.dump();
    csv << '\n';
  }

  std::ofstream words(words_csv_path, std::ios::binary);
  if (!words) fail(ErrorCode::kIoError, "cannot write report '" + words_csv_path + "'");
  words << "position,word,frequency\n";
  for (std::size_t pos = 0; pos < report.first_words.size(); ++pos) {
    for (const auto& [w, f] : report.first_words[pos]) words << pos + 1 << ',' << w << ',' << nlohmann::json(f).dump() << '\n';
  }
}

}  // namespace mcbmn
