// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mcbmn/error.hpp"

namespace mcbmn {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  fail(ErrorCode::kConfigError, path + ": " + what);
}

// Walks one JSON object; every key must be claimed by a reader before
// finish(), otherwise it is reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) bad(key_path(key), "expected a boolean");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) bad(key_path(key), "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) bad(key_path(key), "must be finite");
    }
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) bad(key_path(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }

  void read(const std::string& key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        bad(key_path(key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) bad(key_path(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  template <typename Enum, typename Parse>
  void read_enum(const std::string& key, Enum& out, Parse parse) {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      bad(key_path(key), e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) bad(key_path(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  fail(ErrorCode::kConfigError, "unknown optimizer '" + std::string(s) + "' (sgd|adam)");
}

TargetMode parse_target(std::string_view s) {
  if (s == "first") return TargetMode::kFirst;
  if (s == "sample") return TargetMode::kSample;
  if (s == "all") return TargetMode::kAll;
  fail(ErrorCode::kConfigError, "unknown target mode '" + std::string(s) + "' (first|sample|all)");
}

Selection parse_selection(std::string_view s) {
  if (s == "val_loss") return Selection::kValLoss;
  if (s == "last") return Selection::kLast;
  if (s == "probe_bleu") return Selection::kProbeBleu;
  fail(ErrorCode::kConfigError, "unknown selection '" + std::string(s) + "' (val_loss|last|probe_bleu)");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "all") return Split::kAll;
  fail(ErrorCode::kConfigError, "unknown split '" + std::string(s) + "' (train|val|all)");
}

BleuAggregation parse_aggregation(std::string_view s) {
  if (s == "max_ref") return BleuAggregation::kMaxRef;
  if (s == "corpus") return BleuAggregation::kCorpus;
  fail(ErrorCode::kConfigError, "unknown BLEU aggregation '" + std::string(s) + "' (max_ref|corpus)");
}

std::string_view to_string(BleuAggregation a) { return a == BleuAggregation::kMaxRef ? "max_ref" : "corpus"; }

void read_model(Section& s, ModelConfig& m) {
  s.read("hidden_dim", m.hidden_dim);
  s.read("embed_dim", m.embed_dim);
  s.read("encoder_hidden", m.encoder_hidden);
  s.read("image_dim", m.image_dim);
  s.read("place_dim", m.place_dim);
  s.read("vocab_size", m.vocab_size);
  std::string tags;
  s.read("tag_encoder", tags);
  if (tags == "joint") {
    m.per_category_tags = false;
  } else if (tags == "per_category") {
    m.per_category_tags = true;
  } else if (!tags.empty()) {
    bad(s.key_path("tag_encoder"), "expected joint|per_category");
  }
  s.read("share_tag_projection", m.share_tag_projection);
  s.read_enum("gate_on", m.gate_on, parse_gate_input);
  s.read("temperature", m.temperature);
  s.read("share_embeddings", m.share_embeddings);
  s.read("fusion_init_gain", m.fusion_init_gain);
  s.finish();
}

void apply_json(RunConfig& c, const json& j) {
  Section top(j, "");
  top.find("preset");
  top.read("seed", c.seed, 0);
  if (const json* v = top.find("paths")) {
    Section s(*v, "paths");
    s.read("dataset", c.paths.dataset);
    s.read("out_dir", c.paths.out_dir);
    s.finish();
  }
  if (const json* v = top.find("model")) {
    Section s(*v, "model");
    read_model(s, c.model);
  }
  if (const json* v = top.find("dropout")) {
    Section s(*v, "dropout");
    s.read_enum("kind", c.model.dropout_kind, parse_dropout_kind);
    s.read("rate", c.model.dropout_rate);
    s.finish();
  }
  if (const json* v = top.find("cues")) {
    if (!v->is_array()) bad("cues", "expected an array of cue names");
    c.model.cues.clear();
    for (const auto& e : *v) {
      if (!e.is_string()) bad("cues", "expected an array of cue names");
      c.model.cues.push_back(e.get<std::string>());
    }
  }
  top.read_enum("combiner", c.model.combiner, parse_combiner);
  if (const json* v = top.find("mumc")) {
    Section s(*v, "mumc");
    s.read("enabled", c.mumc.enabled);
    s.read("train_samples", c.mumc.train_samples);
    s.read("eval_samples", c.mumc.eval_samples);
    s.read("alpha", c.mumc.alpha);
    s.read("gamma", c.mumc.gamma);
    s.read("lambda_u", c.mumc.lambda_u);
    s.read("stop_gradient", c.mumc.stop_gradient);
    s.read("at_inference", c.mumc.at_inference);
    s.finish();
  }
  if (const json* v = top.find("optimizer")) {
    Section s(*v, "optimizer");
    s.read_enum("kind", c.optimizer.kind, parse_optimizer);
    s.read("learning_rate", c.optimizer.learning_rate);
    s.read("momentum", c.optimizer.momentum);
    s.read("beta1", c.optimizer.beta1);
    s.read("beta2", c.optimizer.beta2);
    s.read("batch_size", c.optimizer.batch_size);
    s.read("epochs", c.optimizer.epochs);
    s.read("clip_norm", c.optimizer.clip_norm);
    s.finish();
  }
  if (const json* v = top.find("training")) {
    Section s(*v, "training");
    s.read_enum("target", c.training.target, parse_target);
    s.read("validation_fraction", c.training.validation_fraction);
    s.read("eval_every", c.training.eval_every);
    s.read_enum("selection", c.training.selection, parse_selection);
    s.finish();
  }
  if (const json* v = top.find("eval")) {
    Section s(*v, "eval");
    s.read_enum("decision", c.eval.decision, parse_decision);
    s.read("samples", c.eval.samples);
    s.read("max_len", c.eval.max_len);
    s.read_enum("split", c.eval.split, parse_split);
    s.read_enum("bleu", c.eval.bleu, parse_aggregation);
    s.read("smoothing", c.eval.smoothing);
    s.finish();
  }
  if (const json* v = top.find("variance")) {
    Section s(*v, "variance");
    s.read("examples", c.variance.examples);
    s.read("samples", c.variance.samples);
    s.finish();
  }
  top.finish();
}

void set_dotted(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) bad("grid", "malformed key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key)) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    if (!cur->is_object()) bad("grid", "'" + dotted + "' descends into a non-object");
    start = dot + 1;
  }
}

std::string slug(const json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  std::string out;
  for (char ch : s) {
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-') {
      out += ch;
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "x" : out;
}

}  // namespace

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

std::string_view to_string(TargetMode t) {
  switch (t) {
    case TargetMode::kFirst: return "first";
    case TargetMode::kSample: return "sample";
    case TargetMode::kAll: return "all";
  }
  return "?";
}

std::string_view to_string(Selection s) {
  switch (s) {
    case Selection::kValLoss: return "val_loss";
    case Selection::kLast: return "last";
    case Selection::kProbeBleu: return "probe_bleu";
  }
  return "?";
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kAll: return "all";
  }
  return "?";
}

void RunConfig::validate() const {
  ModelConfig m = model;
  // Placeholder dims are legal until a dataset fills them in.
  if (m.image_dim == 0) m.image_dim = 1;
  if (m.place_dim == 0) m.place_dim = 1;
  if (m.vocab_size == 0) m.vocab_size = 5;
  m.validate();
  train_mumc().validate();
  if (mumc.eval_samples == 0) bad("mumc.eval_samples", "must be positive");
  if (!(optimizer.learning_rate > 0.0)) bad("optimizer.learning_rate", "must be positive");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) bad("optimizer.momentum", "must lie in [0, 1)");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0) bad("optimizer.beta1", "must lie in [0, 1)");
  if (optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0) bad("optimizer.beta2", "must lie in [0, 1)");
  if (optimizer.batch_size == 0) bad("optimizer.batch_size", "must be positive");
  if (optimizer.clip_norm < 0.0) bad("optimizer.clip_norm", "must be non-negative");
  if (training.validation_fraction < 0.0 || training.validation_fraction >= 1.0) {
    bad("training.validation_fraction", "must lie in [0, 1)");
  }
  if (training.selection == Selection::kProbeBleu &&
      (training.eval_every == 0 || training.validation_fraction == 0.0)) {
    bad("training.selection", "probe_bleu needs eval_every > 0 and a validation split");
  }
  if (eval.samples == 0) bad("eval.samples", "must be positive");
  if (eval.max_len == 0) bad("eval.max_len", "must be positive");
  if (variance.examples == 0) bad("variance.examples", "must be positive");
  if (variance.samples < 2) bad("variance.samples", "needs at least 2 samples");
}

ModelConfig RunConfig::resolve_model(const Dataset& data) const {
  ModelConfig m = model;
  auto fill = [](std::size_t& field, std::size_t actual, const char* name) {
    if (field == 0) {
      field = actual;
    } else if (field != actual) {
      bad(std::string("model.") + name,
          std::to_string(field) + " does not match the dataset (" + std::to_string(actual) + ")");
    }
  };
  fill(m.image_dim, data.image_dim, "image_dim");
  fill(m.place_dim, data.place_dim, "place_dim");
  fill(m.vocab_size, data.vocab.size(), "vocab_size");
  m.validate();
  return m;
}

MumcConfig RunConfig::train_mumc() const {
  MumcConfig m;
  m.samples = mumc.train_samples;
  m.alpha = mumc.alpha;
  m.gamma = mumc.gamma;
  m.lambda_u = mumc.lambda_u;
  return m;
}

GenerateOptions RunConfig::generate_options() const {
  GenerateOptions g;
  g.decision = eval.decision;
  g.samples = eval.samples;
  g.max_len = eval.max_len;
  g.mumc = mumc.enabled && mumc.at_inference;
  g.mumc_config = train_mumc();
  g.mumc_config.samples = mumc.eval_samples;
  return g;
}

const std::map<std::string, json>& ablation_presets() {
  static const std::map<std::string, json> presets = [] {
    std::map<std::string, json> p;
    p["MC-SMix"] = {{"combiner", "mixture"}, {"dropout", {{"kind", "none"}}}, {"mumc", {{"enabled", false}}}};
    p["MC-BMix"] = {{"combiner", "mixture"}, {"dropout", {{"kind", "bernoulli"}}}, {"mumc", {{"enabled", false}}}};
    p["MC-SMN"] = {{"combiner", "moderator"},
                   {"dropout", {{"kind", "bernoulli"}}},
                   {"eval", {{"decision", "deterministic"}}},
                   {"mumc", {{"enabled", false}}}};
    p["MC-BMN"] = {{"combiner", "moderator"},
                   {"dropout", {{"kind", "bernoulli"}}},
                   {"eval", {{"decision", "mc_mean"}}},
                   {"mumc", {{"enabled", false}}}};
    p["MC-BMN-MUMC"] = {{"combiner", "moderator"},
                        {"dropout", {{"kind", "bernoulli"}}},
                        {"eval", {{"decision", "mc_mean"}}},
                        {"mumc", {{"enabled", true}}}};
    p["MC-BMN-gaussian"] = {{"combiner", "moderator"},
                            {"dropout", {{"kind", "gaussian"}}},
                            {"eval", {{"decision", "mc_mean"}}},
                            {"mumc", {{"enabled", false}}}};
    p["MC-BMN2"] = {{"combiner", "moderator"},
                    {"cues", {"image", "place"}},
                    {"dropout", {{"kind", "bernoulli"}}},
                    {"mumc", {{"enabled", false}}}};
    p["MC-BMN3"] = {{"combiner", "moderator"},
                    {"cues", {"image", "place", "caption"}},
                    {"dropout", {{"kind", "bernoulli"}}},
                    {"mumc", {{"enabled", false}}}};
    for (const std::string& c : cue_names()) p["cue-" + c] = {{"cues", {c}}};
    return p;
  }();
  return presets;
}

void apply_preset(RunConfig& c, const std::string& name) {
  const auto& p = ablation_presets();
  auto it = p.find(name);
  if (it == p.end()) {
    std::string known;
    for (const auto& [k, v] : p) known += (known.empty() ? "" : "|") + k;
    bad("preset", "unknown preset '" + name + "' (" + known + ")");
  }
  apply_json(c, it->second);
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  if (!j.is_object()) bad("config", "expected an object");
  if (auto it = j.find("preset"); it != j.end()) {
    if (!it->is_string()) bad("preset", "expected a string");
    apply_preset(c, it->get<std::string>());
  }
  apply_json(c, j);
  c.validate();
  return c;
}

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["paths"] = {{"dataset", c.paths.dataset}, {"out_dir", c.paths.out_dir}};
  const ModelConfig& m = c.model;
  j["model"] = {{"hidden_dim", m.hidden_dim},
                {"embed_dim", m.embed_dim},
                {"encoder_hidden", m.encoder_hidden},
                {"image_dim", m.image_dim},
                {"place_dim", m.place_dim},
                {"vocab_size", m.vocab_size},
                {"tag_encoder", m.per_category_tags ? "per_category" : "joint"},
                {"share_tag_projection", m.share_tag_projection},
                {"gate_on", to_string(m.gate_on)},
                {"temperature", m.temperature},
                {"share_embeddings", m.share_embeddings},
                {"fusion_init_gain", m.fusion_init_gain}};
  j["dropout"] = {{"kind", to_string(m.dropout_kind)}, {"rate", m.dropout_rate}};
  j["cues"] = m.cues;
  j["combiner"] = to_string(m.combiner);
  j["mumc"] = {{"enabled", c.mumc.enabled},
               {"train_samples", c.mumc.train_samples},
               {"eval_samples", c.mumc.eval_samples},
               {"alpha", c.mumc.alpha},
               {"gamma", c.mumc.gamma},
               {"lambda_u", c.mumc.lambda_u},
               {"stop_gradient", c.mumc.stop_gradient},
               {"at_inference", c.mumc.at_inference}};
  j["optimizer"] = {{"kind", to_string(c.optimizer.kind)},
                    {"learning_rate", c.optimizer.learning_rate},
                    {"momentum", c.optimizer.momentum},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"batch_size", c.optimizer.batch_size},
                    {"epochs", c.optimizer.epochs},
                    {"clip_norm", c.optimizer.clip_norm}};
  j["training"] = {{"target", to_string(c.training.target)},
                   {"validation_fraction", c.training.validation_fraction},
                   {"eval_every", c.training.eval_every},
                   {"selection", to_string(c.training.selection)}};
  j["eval"] = {{"decision", to_string(c.eval.decision)},
               {"samples", c.eval.samples},
               {"max_len", c.eval.max_len},
               {"split", to_string(c.eval.split)},
               {"bleu", to_string(c.eval.bleu)},
               {"smoothing", c.eval.smoothing}};
  j["variance"] = {{"examples", c.variance.examples}, {"samples", c.variance.samples}};
  return j;
}

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kConfigError, "cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kConfigError, "'" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

RunConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

void save_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write '" + path + "'");
  out << config_to_json(c).dump(2) << "\n";
}

std::vector<SweepRun> expand_sweep(const json& manifest, const std::string& manifest_dir) {
  Section top(manifest, "");
  json base = json::object();
  if (const json* b = top.find("base")) {
    if (b->is_string()) {
      std::filesystem::path p(b->get<std::string>());
      if (p.is_relative()) p = std::filesystem::path(manifest_dir) / p;
      base = read_json_file(p.string());
    } else if (b->is_object()) {
      base = *b;
    } else {
      bad("base", "expected a config object or a path");
    }
  }
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  if (const json* g = top.find("grid")) {
    if (!g->is_object()) bad("grid", "expected an object of key -> value list");
    for (auto it = g->begin(); it != g->end(); ++it) {
      if (!it->is_array() || it->empty()) bad("grid." + it.key(), "expected a non-empty list of values");
      axes.emplace_back(it.key(), std::vector<json>(it->begin(), it->end()));
    }
  }
  std::vector<std::uint64_t> seeds;
  if (const json* s = top.find("seeds")) {
    if (!s->is_array() || s->empty()) bad("seeds", "expected a non-empty list of integers");
    for (const auto& v : *s) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        bad("seeds", "expected a non-empty list of integers");
      }
      seeds.push_back(v.get<std::uint64_t>());
    }
  }
  top.finish();

  std::vector<SweepRun> runs;
  std::set<std::string> seen;
  std::vector<std::size_t> idx(axes.size(), 0);
  const std::size_t n_seeds = seeds.empty() ? 1 : seeds.size();
  while (true) {
    for (std::size_t si = 0; si < n_seeds; ++si) {
      json cfg = base;
      ordered_json overrides = ordered_json::object();
      std::string name;
      for (std::size_t a = 0; a < axes.size(); ++a) {
        const json& v = axes[a].second[idx[a]];
        set_dotted(cfg, axes[a].first, v);
        overrides[axes[a].first] = v;
        name += (name.empty() ? "" : "__") + slug(v);
      }
      if (!seeds.empty()) {
        cfg["seed"] = seeds[si];
        overrides["seed"] = seeds[si];
        name += (name.empty() ? "" : "__") + std::string("seed") + std::to_string(seeds[si]);
      }
      if (name.empty()) name = "base";
      SweepRun run;
      try {
        run.config = config_from_json(cfg);
      } catch (const Error& e) {
        fail(ErrorCode::kConfigError, "sweep run '" + name + "': " + e.what());
      }
      const std::string key = config_to_json(run.config).dump();
      if (!seen.insert(key).second) bad("grid", "run '" + name + "' duplicates an earlier run");
      run.name = std::to_string(runs.size()) + "_" + name;
      run.overrides = std::move(overrides);
      runs.push_back(std::move(run));
    }
    std::size_t a = 0;
    while (a < axes.size() && ++idx[a] == axes[a].second.size()) idx[a++] = 0;
    if (a == axes.size()) break;
  }
  return runs;
}

}  // namespace mcbmn
