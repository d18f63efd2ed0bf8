// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/cue_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mcbmn/error.hpp"

namespace mcbmn {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};
}  // namespace

Vocabulary::Vocabulary() : Vocabulary(kReserved) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    fail(ErrorCode::kInvalidArgument, "vocabulary must start with <pad> <bos> <eos> <unk>");
  }
  for (const auto& t : tokens) {
    if (index_.count(t)) fail(ErrorCode::kInvalidArgument, "duplicate vocabulary token '" + t + "'");
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(token);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Tokens Vocabulary::encode(const std::string& sentence) const {
  Tokens out;
  for (const auto& w : split_words(sentence)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const Tokens& ids) const {
  std::string out;
  for (int t : ids) {
    if (t == kEos) break;
    if (t == kPad || t == kBos) continue;
    if (!out.empty()) out += ' ';
    out += token(t);
  }
  return out;
}

std::vector<std::string> split_words(const std::string& sentence) {
  std::istringstream in(sentence);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// ---------------------------------------------------------------------------
// Tags

const std::vector<std::string>& question_words() {
  static const std::vector<std::string> words = {"why", "how", "what", "when", "where", "who", "which"};
  return words;
}

Tokens TagSet::flattened() const {
  Tokens out;
  out.insert(out.end(), noun.begin(), noun.end());
  out.insert(out.end(), verb.begin(), verb.end());
  out.insert(out.end(), question.begin(), question.end());
  return out;
}

TagSet extract_tags(const Tokens& caption, const std::vector<Tokens>& questions, const Vocabulary& vocab,
                    const Lexicon& lexicon) {
  TagSet tags;
  std::size_t nouns = 0, verbs = 0, qs = 0;
  for (int t : caption) {
    auto it = lexicon.find(vocab.token(t));
    if (it == lexicon.end()) continue;
    if (it->second == PartOfSpeech::kNoun && nouns < kTagSlots) tags.noun[nouns++] = t;
    if (it->second == PartOfSpeech::kVerb && verbs < kTagSlots) tags.verb[verbs++] = t;
  }
  const auto& words = question_words();
  for (const Tokens& q : questions) {
    if (q.empty() || qs == kTagSlots) continue;
    const int lead = q.front();
    if (std::find(words.begin(), words.end(), vocab.token(lead)) == words.end()) continue;
    if (std::find(tags.question.begin(), tags.question.begin() + static_cast<std::ptrdiff_t>(qs), lead) !=
        tags.question.begin() + static_cast<std::ptrdiff_t>(qs)) {
      continue;
    }
    tags.question[qs++] = lead;
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Dataset files

const CueBundle& Dataset::find(const std::string& id) const {
  for (const auto& e : examples) {
    if (e.id == id) return e;
  }
  fail(ErrorCode::kDatasetInvalid, "no example with id '" + id + "'");
}

namespace {

[[noreturn]] void invalid(std::size_t line, const std::string& msg) {
  fail(ErrorCode::kDatasetInvalid, "line " + std::to_string(line) + ": " + msg);
}

Tokens read_tokens(const json& j, std::size_t line, const char* field) {
  if (!j.is_array()) invalid(line, std::string(field) + " must be an array of token ids");
  Tokens out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) invalid(line, std::string(field) + " must hold integer token ids");
    out.push_back(v.get<int>());
  }
  return out;
}

std::vector<double> read_vector(const json& j, std::size_t line, const char* field) {
  if (!j.is_array()) invalid(line, std::string(field) + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) invalid(line, std::string(field) + " must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

std::array<int, kTagSlots> read_tag_slots(const json& j, std::size_t line, const char* field) {
  const Tokens t = read_tokens(j, line, field);
  if (t.size() != kTagSlots) invalid(line, std::string("tags.") + field + " must have exactly 5 entries");
  std::array<int, kTagSlots> out{};
  std::copy(t.begin(), t.end(), out.begin());
  return out;
}

void check_record(const CueBundle& b, const Dataset& d, std::size_t line) {
  const auto vocab = static_cast<int>(d.vocab.size());
  auto check_ids = [&](const auto& ids, const std::string& field) {
    for (int t : ids) {
      if (t < 0 || t >= vocab) invalid(line, field + " token id " + std::to_string(t) + " outside [0, V)");
    }
  };
  if (b.id.empty()) invalid(line, "id must be a nonempty string");
  if (b.image_feat.size() != d.image_dim) {
    invalid(line, "image_feat has " + std::to_string(b.image_feat.size()) + " entries, header says D_i=" +
                      std::to_string(d.image_dim));
  }
  if (b.place_feat.size() != d.place_dim) {
    invalid(line, "place_feat has " + std::to_string(b.place_feat.size()) + " entries, header says D_p=" +
                      std::to_string(d.place_dim));
  }
  for (double v : b.image_feat)
    if (!std::isfinite(v)) invalid(line, "image_feat holds a non-finite value");
  for (double v : b.place_feat)
    if (!std::isfinite(v)) invalid(line, "place_feat holds a non-finite value");
  check_ids(b.caption, "caption");
  check_ids(b.tags.noun, "tags.noun");
  check_ids(b.tags.verb, "tags.verb");
  check_ids(b.tags.question, "tags.question");
  const auto& words = question_words();
  for (int t : b.tags.question) {
    if (t != kPad && std::find(words.begin(), words.end(), d.vocab.token(t)) == words.end()) {
      invalid(line, "tags.question holds '" + d.vocab.token(t) + "', not a question word");
    }
  }
  if (b.questions.empty()) invalid(line, "questions must hold at least one reference");
  for (const auto& q : b.questions) {
    check_ids(q, "questions");
    if (q.empty() || q.back() != kEos) invalid(line, "every question must end with <eos>");
  }
}

}  // namespace

void validate_dataset(const Dataset& data) {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    check_record(data.examples[i], data, i + 2);
    if (!seen.insert(data.examples[i].id).second) invalid(i + 2, "duplicate id '" + data.examples[i].id + "'");
  }
}

Dataset load_dataset(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) fail(ErrorCode::kDatasetNotFound, "dataset file '" + path + "' not found");
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kDatasetNotFound, "cannot open dataset file '" + path + "'");
  Dataset d;
  bool have_header = false;
  std::set<std::string> seen;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      invalid(line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) invalid(line, "record must be a JSON object");
    try {
      if (!have_header) {
        if (j.value("type", "") != "header") invalid(line, "first record must be the header");
        std::vector<std::string> tokens = j.at("vocab").get<std::vector<std::string>>();
        if (j.at("V").get<std::size_t>() != tokens.size()) invalid(line, "header V disagrees with the vocab list");
        try {
          d.vocab = Vocabulary(std::move(tokens));
        } catch (const Error& e) {
          invalid(line, e.what());
        }
        d.image_dim = j.at("D_i").get<std::size_t>();
        d.place_dim = j.at("D_p").get<std::size_t>();
        if (d.image_dim == 0 || d.place_dim == 0) invalid(line, "feature dimensions must be positive");
        have_header = true;
        continue;
      }
      CueBundle b;
      const json& id = j.at("id");
      b.id = id.is_string() ? id.get<std::string>() : id.dump();
      b.image_feat = read_vector(j.at("image_feat"), line, "image_feat");
      b.place_feat = read_vector(j.at("place_feat"), line, "place_feat");
      b.caption = read_tokens(j.at("caption"), line, "caption");
      const json& tags = j.at("tags");
      b.tags.noun = read_tag_slots(tags.at("noun"), line, "noun");
      b.tags.verb = read_tag_slots(tags.at("verb"), line, "verb");
      b.tags.question = read_tag_slots(tags.at("question"), line, "question");
      if (!j.at("questions").is_array()) invalid(line, "questions must be an array");
      for (const auto& q : j.at("questions")) b.questions.push_back(read_tokens(q, line, "questions"));
      check_record(b, d, line);
      if (!seen.insert(b.id).second) invalid(line, "duplicate id '" + b.id + "'");
      d.examples.push_back(std::move(b));
    } catch (const json::exception& e) {
      invalid(line, std::string("missing or mistyped field: ") + e.what());
    }
  }
  if (!have_header) fail(ErrorCode::kDatasetInvalid, "dataset file '" + path + "' has no header record");
  if (d.examples.empty()) fail(ErrorCode::kDatasetInvalid, "dataset file '" + path + "' has no examples");
  return d;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write dataset file '" + path + "'");
  json header = {{"type", "header"},
                 {"V", data.vocab.size()},
                 {"D_i", data.image_dim},
                 {"D_p", data.place_dim},
                 {"vocab", data.vocab.tokens()}};
  out << header.dump() << '\n';
  for (const auto& b : data.examples) {
    json rec;
    rec["id"] = b.id;
    rec["image_feat"] = b.image_feat;
    rec["place_feat"] = b.place_feat;
    rec["caption"] = b.caption;
    rec["tags"] = {{"noun", b.tags.noun}, {"verb", b.tags.verb}, {"question", b.tags.question}};
    rec["questions"] = b.questions;
    out << rec.dump() << '\n';
  }
  if (!out) fail(ErrorCode::kIoError, "failed writing dataset file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic scenes

const SceneGrammar& scene_grammar() {
  static const SceneGrammar g{
      {"dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "child", "cow"},
      {"running", "eating", "sitting", "jumping", "playing", "sleeping", "standing", "swimming"},
      {"beach", "park", "kitchen", "street", "field", "forest", "room", "lake"},
      {"small", "big", "white", "black", "young", "brown"},
      {"ball", "tree", "car", "table", "bench"},
      32,
      32,
  };
  return g;
}

namespace {
const std::vector<std::string> kFunctionWords = {"a", "the", "is", "at", "near", "doing", "did", "go", "to", "?"};
}  // namespace

Vocabulary scene_vocabulary() {
  const auto& g = scene_grammar();
  Vocabulary v;
  for (const auto* list : {&kFunctionWords, &question_words(), &g.subjects, &g.verbs, &g.places, &g.attributes,
                           &g.objects}) {
    for (const auto& w : *list) v.add(w);
  }
  return v;
}

Lexicon scene_lexicon() {
  const auto& g = scene_grammar();
  Lexicon lex;
  for (const auto& w : kFunctionWords) lex[w] = PartOfSpeech::kOther;
  for (const auto& w : question_words()) lex[w] = PartOfSpeech::kOther;
  for (const auto& w : g.attributes) lex[w] = PartOfSpeech::kOther;
  for (const auto* list : {&g.subjects, &g.places, &g.objects})
    for (const auto& w : *list) lex[w] = PartOfSpeech::kNoun;
  for (const auto& w : g.verbs) lex[w] = PartOfSpeech::kVerb;
  lex["doing"] = PartOfSpeech::kVerb;
  lex["go"] = PartOfSpeech::kVerb;
  return lex;
}

SceneSpec sample_scene(RngStream& rng) {
  const auto& g = scene_grammar();
  SceneSpec s;
  s.place = static_cast<int>(rng.below(g.places.size()));
  s.subject = static_cast<int>(rng.below(g.subjects.size()));
  s.verb = static_cast<int>(rng.below(g.verbs.size()));
  s.object = static_cast<int>(rng.below(g.objects.size()));
  s.attribute = static_cast<int>(rng.below(g.attributes.size()));
  return s;
}

std::vector<double> image_indicator(const SceneSpec& s) {
  const auto& g = scene_grammar();
  std::vector<double> f(g.image_dim, 0.0);
  f[static_cast<std::size_t>(s.subject)] = 1.0;
  f[g.subjects.size() + static_cast<std::size_t>(s.attribute)] = 1.0;
  f[g.subjects.size() + g.attributes.size() + static_cast<std::size_t>(s.object)] = 1.0;
  return f;
}

std::vector<double> place_indicator(const SceneSpec& s) {
  std::vector<double> f(scene_grammar().place_dim, 0.0);
  f[static_cast<std::size_t>(s.place)] = 1.0;
  return f;
}

std::string scene_caption(const SceneSpec& s, int template_id) {
  const auto& g = scene_grammar();
  const std::string& subj = g.subjects[static_cast<std::size_t>(s.subject)];
  const std::string& verb = g.verbs[static_cast<std::size_t>(s.verb)];
  switch (template_id) {
    case 0: return "a " + subj + " is " + verb + " at the " + g.places[static_cast<std::size_t>(s.place)];
    case 1:
      return "a " + g.attributes[static_cast<std::size_t>(s.attribute)] + " " + subj + " is " + verb + " near the " +
             g.objects[static_cast<std::size_t>(s.object)];
    case 2: return "the " + subj + " is " + verb;
  }
  fail(ErrorCode::kInvalidArgument, "caption template id must be 0, 1 or 2");
}

std::vector<std::string> scene_questions(const SceneSpec& s) {
  const auto& g = scene_grammar();
  const std::string& subj = g.subjects[static_cast<std::size_t>(s.subject)];
  const std::string& verb = g.verbs[static_cast<std::size_t>(s.verb)];
  const std::string& place = g.places[static_cast<std::size_t>(s.place)];
  const std::string& attr = g.attributes[static_cast<std::size_t>(s.attribute)];
  const std::string& obj = g.objects[static_cast<std::size_t>(s.object)];
  // Same order as question_words().
  return {
      "why is the " + subj + " " + verb + " ?",
      "how is the " + subj + " " + verb + " at the " + place + " ?",
      "what is the " + subj + " doing at the " + place + " ?",
      "when did the " + subj + " go to the " + place + " ?",
      "where is the " + attr + " " + subj + " " + verb + " ?",
      "who is " + verb + " near the " + obj + " ?",
      "which " + subj + " is " + verb + " near the " + obj + " ?",
  };
}

CueBundle synth_example(std::uint64_t seed, std::size_t index, const SynthOptions& options, SceneSpec* spec_out) {
  static const Vocabulary vocab = scene_vocabulary();
  static const Lexicon lexicon = scene_lexicon();
  if (options.noise < 0.0 || !std::isfinite(options.noise)) {
    fail(ErrorCode::kInvalidArgument, "feature noise must be a finite value >= 0");
  }
  const std::size_t n_questions = std::min<std::size_t>(options.questions_per_example, question_words().size());
  if (n_questions == 0) fail(ErrorCode::kInvalidArgument, "at least one reference question per example is required");

  RngStream rng = RngStream(seed).split(index);
  const SceneSpec spec = sample_scene(rng);
  const int caption_template = static_cast<int>(rng.below(3));

  CueBundle b;
  b.id = "ex" + std::to_string(index);
  b.image_feat = image_indicator(spec);
  b.place_feat = place_indicator(spec);
  for (double& v : b.image_feat) v += options.noise * rng.normal();
  for (double& v : b.place_feat) v += options.noise * rng.normal();
  b.caption = vocab.encode(scene_caption(spec, caption_template));

  const auto all = scene_questions(spec);
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < n_questions; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  // References keep question-word order, so the first one leads with the
  // first question tag.
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_questions));
  for (std::size_t i = 0; i < n_questions; ++i) {
    Tokens q = vocab.encode(all[order[i]]);
    q.push_back(kEos);
    b.questions.push_back(std::move(q));
  }
  b.tags = extract_tags(b.caption, b.questions, vocab, lexicon);
  if (spec_out) *spec_out = spec;
  return b;
}

Dataset synth_generate(std::size_t n, std::uint64_t seed, const SynthOptions& options) {
  if (n == 0) fail(ErrorCode::kInvalidArgument, "synth_generate needs n >= 1");
  Dataset d;
  d.vocab = scene_vocabulary();
  d.image_dim = scene_grammar().image_dim;
  d.place_dim = scene_grammar().place_dim;
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.examples.push_back(synth_example(seed, i, options));
  return d;
}

// ---------------------------------------------------------------------------
// Encoders

Var encode_sequences(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb,
                     const std::vector<Tokens>& seqs, Mode mode, MaskSource& masks) {
  if (seqs.empty()) fail(ErrorCode::kInvalidArgument, "encode_sequences: empty batch");
  std::size_t longest = 0;
  for (const auto& s : seqs) {
    if (s.empty()) fail(ErrorCode::kInvalidArgument, "encode_sequences: empty token sequence");
    longest = std::max(longest, s.size());
  }
  const std::size_t rows = seqs.size();
  std::vector<Var> inputs;
  std::vector<std::vector<char>> keep(longest, std::vector<char>(rows, 0));
  bool ragged = false;
  for (std::size_t t = 0; t < longest; ++t) {
    std::vector<int> ids(rows, kPad);
    for (std::size_t r = 0; r < rows; ++r) {
      if (t < seqs[r].size()) {
        ids[r] = seqs[r][t];
        keep[t][r] = 1;
      } else {
        ragged = true;
      }
    }
    inputs.push_back(embed(tape, emb, ids));
  }
  const LstmMasks m = sample_lstm_masks(cell, rows, mode, masks);
  return lstm_sequence(tape, cell, inputs, lstm_zero_state(tape, cell, rows), m, ragged ? &keep : nullptr)
      .final_output;
}

Var encode_caption(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb,
                   const std::vector<Tokens>& captions, Mode mode, MaskSource& masks) {
  // An empty caption reads as a single PAD token.
  std::vector<Tokens> seqs = captions;
  for (auto& s : seqs)
    if (s.empty()) s.push_back(kPad);
  return encode_sequences(tape, cell, emb, seqs, mode, masks);
}

Var encode_tags(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb, const std::vector<TagSet>& tags,
                Mode mode, MaskSource& masks) {
  std::vector<Tokens> seqs;
  seqs.reserve(tags.size());
  for (const auto& t : tags) seqs.push_back(t.flattened());
  return encode_sequences(tape, cell, emb, seqs, mode, masks);
}

Var encode_features(Tape& tape, const BayesianMLP& net, const std::vector<std::vector<double>>& feats, Mode mode,
                    MaskSource& masks) {
  if (feats.empty()) fail(ErrorCode::kInvalidArgument, "encode_features: empty batch");
  const std::size_t width = feats.front().size();
  std::vector<double> flat;
  flat.reserve(feats.size() * width);
  for (const auto& f : feats) {
    if (f.size() != width) fail(ErrorCode::kDimensionMismatch, "encode_features: ragged feature batch");
    flat.insert(flat.end(), f.begin(), f.end());
  }
  return mlp_forward(tape, net, tape.constant(Tensor({feats.size(), width}, std::move(flat))), mode, masks);
}

}  // namespace mcbmn
