// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "mcbmn/error.hpp"
#include "mcbmn/harness.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace mcbmn {
namespace {

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kConfigError, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = config_from_json(j);
  c.validate();
  return c;
}

json report_json(const EvalReport& r) {
  json words = json::array();
  for (const auto& pos : r.first_words) {
    json p = json::array();
    for (const auto& [w, f] : pos) p.push_back({w, f});
    words.push_back(p);
  }
  return {{"bleu", r.bleu}, {"rouge_l", r.rouge}, {"cider", r.cider}, {"first_words", words}};
}

json generation_json(const std::vector<GenerationRecord>& recs, const Vocabulary& vocab) {
  json out = json::array();
  for (const auto& g : recs) {
    json samples = json::array();
    for (const auto& s : g.samples) samples.push_back(vocab.decode(s));
    out.push_back({{"id", g.id},
                   {"samples", samples},
                   {"epistemic", g.epistemic},
                   {"aleatoric", g.aleatoric},
                   {"predictive", g.predictive}});
  }
  return out;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "all") return Split::kAll;
  fail(ErrorCode::kInvalidArgument, "split must be train, val or all, got '" + s + "'");
}

std::string checkpoint_or_default(const RunConfig& c, const std::string& ckpt) {
  return ckpt.empty() ? c.paths.out_dir + "/checkpoint.json" : ckpt;
}

}  // namespace
}  // namespace mcbmn

PYBIND11_MODULE(_core, m) {
  using namespace mcbmn;
  m.doc() = "Bindings for the mcbmn library; the mcbmn package wraps these with dict conversion.";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      // Same shape as the CLI's error line.
      error((std::string(error_class(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("gen_data", [](const std::string& path, std::size_t n, std::uint64_t seed, double noise,
                       std::size_t questions) {
    save_dataset(synth_generate(n, seed, SynthOptions{noise, questions}), path);
  }, py::arg("path"), py::arg("n"), py::arg("seed"), py::arg("noise") = 0.1, py::arg("questions") = 5);

  m.def("default_config", [] { return config_to_json(RunConfig{}).dump(); });
  m.def("normalize_config", [](const std::string& text) { return config_to_json(parse_config(text)).dump(); },
        "Parses, validates and re-serializes a config with every key filled in.");
  m.def("presets", [] {
    std::vector<std::string> names;
    for (const auto& [k, v] : ablation_presets()) names.push_back(k);
    return names;
  });

  m.def("train", [](const std::string& config) {
    const RunConfig c = parse_config(config);
    const Dataset data = load_dataset(c.paths.dataset);
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train(c, data, {c.paths.out_dir, {}});
    }
    json curve = json::array();
    for (const auto& e : r.curve) {
      curve.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss ? json(*e.val_loss) : json(nullptr)},
                       {"L_gen", e.gen},
                       {"L_u", e.uncertainty}});
    }
    return json{{"best_epoch", r.best_epoch}, {"best_score", r.best_loss}, {"curve", curve}}.dump();
  }, py::arg("config"));

  m.def("evaluate", [](const std::string& config, const std::string& checkpoint, const std::string& split) {
    const RunConfig c = parse_config(config);
    const Dataset data = load_dataset(c.paths.dataset);
    const Model model = load_model(c, data, checkpoint_or_default(c, checkpoint));
    Evaluation ev;
    {
      py::gil_scoped_release release;
      ev = evaluate(c, model, data, parse_split(split));
    }
    json j = report_json(ev.report);
    j["generations"] = generation_json(ev.generations, data.vocab);
    return j.dump();
  }, py::arg("config"), py::arg("checkpoint") = "", py::arg("split") = "val");

  m.def("sample", [](const std::string& config, const std::string& checkpoint, const std::string& split,
                     std::size_t samples) {
    const RunConfig c = parse_config(config);
    const Dataset data = load_dataset(c.paths.dataset);
    const Model model = load_model(c, data, checkpoint_or_default(c, checkpoint));
    return generation_json(sample_questions(c, model, data, parse_split(split), samples), data.vocab).dump();
  }, py::arg("config"), py::arg("checkpoint") = "", py::arg("split") = "val", py::arg("samples") = 10);

  m.def("variance", [](const std::string& config, const std::string& checkpoint) {
    const RunConfig c = parse_config(config);
    const Dataset data = load_dataset(c.paths.dataset);
    const Model model = load_model(c, data, checkpoint_or_default(c, checkpoint));
    json out = json::array();
    for (const auto& r : variance_probe(c, model, data)) out.push_back({{"id", r.id}, {"norm_variance", r.norm_variance}});
    return out.dump();
  }, py::arg("config"), py::arg("checkpoint") = "");

  m.def("bleu", &bleu, py::arg("candidate"), py::arg("references"), py::arg("n") = 4, py::arg("smooth") = false);
  m.def("corpus_bleu", &corpus_bleu, py::arg("candidates"), py::arg("references"), py::arg("n") = 4,
        py::arg("smooth") = false);
  m.def("rouge_l", &rouge_l, py::arg("candidate"), py::arg("references"), py::arg("beta") = 1.2);
  m.def("cider", [](const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references) {
    if (candidates.size() != references.size()) {
      fail(ErrorCode::kInvalidArgument, "cider: one candidate per reference set is required");
    }
    return CiderScorer(references).score_all(candidates);
  }, py::arg("candidates"), py::arg("references"));
}
