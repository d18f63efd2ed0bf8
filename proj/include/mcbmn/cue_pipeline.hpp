// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcbmn/bayes_nn.hpp"

namespace mcbmn {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr std::size_t kTagSlots = 5;

using Tokens = std::vector<int>;

class Vocabulary {
 public:
  /// Reserved tokens only.
  Vocabulary();
  /// `tokens` must start with the four reserved tokens.
  explicit Vocabulary(std::vector<std::string> tokens);

  int add(const std::string& token);
  /// UNK for unknown tokens.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  Tokens encode(const std::string& sentence) const;
  /// Stops at EOS; skips PAD and BOS.
  std::string decode(const Tokens& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(const std::string& sentence);

enum class PartOfSpeech { kNoun, kVerb, kOther };

using Lexicon = std::unordered_map<std::string, PartOfSpeech>;

/// The seven leading words a question tag may take.
const std::vector<std::string>& question_words();

struct TagSet {
  std::array<int, kTagSlots> noun{};
  std::array<int, kTagSlots> verb{};
  std::array<int, kTagSlots> question{};

  /// noun | verb | question.
  Tokens flattened() const;
  bool operator==(const TagSet&) const = default;
};

/// Nouns and verbs in caption order, padded or truncated to five slots.
/// Question tags are the distinct leading words of the references that
/// belong to the seven-word set.
TagSet extract_tags(const Tokens& caption, const std::vector<Tokens>& questions, const Vocabulary& vocab,
                    const Lexicon& lexicon);

struct CueBundle {
  std::string id;
  std::vector<double> image_feat;
  std::vector<double> place_feat;
  Tokens caption;
  TagSet tags;
  std::vector<Tokens> questions;  // EOS-terminated, no BOS
};

struct Dataset {
  Vocabulary vocab;
  std::size_t image_dim = 0;
  std::size_t place_dim = 0;
  std::vector<CueBundle> examples;

  const CueBundle& find(const std::string& id) const;
};

/// Throws DATASET_NOT_FOUND for a missing file and DATASET_INVALID (with the
/// line number) for malformed records.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& data, const std::string& path);
/// Checks every record against the header.
void validate_dataset(const Dataset& data);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneSpec {
  int place = 0;
  int subject = 0;
  int verb = 0;
  int object = 0;
  int attribute = 0;
};

struct SceneGrammar {
  std::vector<std::string> subjects;
  std::vector<std::string> verbs;
  std::vector<std::string> places;
  std::vector<std::string> attributes;
  std::vector<std::string> objects;
  std::size_t image_dim = 32;
  std::size_t place_dim = 32;
};

const SceneGrammar& scene_grammar();
Vocabulary scene_vocabulary();
Lexicon scene_lexicon();

SceneSpec sample_scene(RngStream& rng);
/// Indicator features: subject, attribute and object blocks for the image;
/// the place block for the place vector.
std::vector<double> image_indicator(const SceneSpec& s);
std::vector<double> place_indicator(const SceneSpec& s);
std::string scene_caption(const SceneSpec& s, int template_id);
/// All seven question templates for a scene, one per question word.
std::vector<std::string> scene_questions(const SceneSpec& s);

struct SynthOptions {
  double noise = 0.1;
  std::size_t questions_per_example = 5;
};

/// Example i is a pure function of (seed, i).
CueBundle synth_example(std::uint64_t seed, std::size_t index, const SynthOptions& options = {},
                        SceneSpec* spec_out = nullptr);
Dataset synth_generate(std::size_t n, std::uint64_t seed, const SynthOptions& options = {});

// ---------------------------------------------------------------------------
// Cue encoders

/// Final masked output of `cell` over right-padded token sequences,
/// [batch x hidden]. Each sequence must be nonempty.
Var encode_sequences(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb,
                     const std::vector<Tokens>& seqs, Mode mode, MaskSource& masks);

Var encode_caption(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb,
                   const std::vector<Tokens>& captions, Mode mode, MaskSource& masks);
/// One LSTM over the 15-token sequence noun | verb | question.
Var encode_tags(Tape& tape, const BayesianLSTMCell& cell, const EmbeddingTable& emb, const std::vector<TagSet>& tags,
                Mode mode, MaskSource& masks);
Var encode_features(Tape& tape, const BayesianMLP& net, const std::vector<std::vector<double>>& feats, Mode mode,
                    MaskSource& masks);

}  // namespace mcbmn
