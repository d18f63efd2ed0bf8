// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Failures print one line to stderr:
//   error: <CLASS>: <message>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mcbmn/error.hpp"
#include "mcbmn/harness.hpp"

namespace fs = std::filesystem;
using namespace mcbmn;

namespace {

int report_error(std::string_view cls, std::string message) {
  for (char& c : message)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "error: " << cls << ": " << message << std::endl;
  return cls == "USAGE_ERROR" ? 2 : 1;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool config_required = true) {
  auto* opt = app->add_option("--config", c.config, "run config (JSON)");
  if (config_required) opt->required();
  app->add_option("--seed", c.seed, "overrides the config seed");
  app->add_option("--out", c.out, "output path");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::string checkpoint_path(const RunConfig& cfg, const std::string& flag) {
  return flag.empty() ? (fs::path(cfg.paths.out_dir) / "checkpoint.json").string() : flag;
}

Split parse_split_flag(const std::string& s, Split fallback) {
  if (s.empty()) return fallback;
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "all") return Split::kAll;
  fail(ErrorCode::kConfigError, "unknown split '" + s + "' (train|val|all)");
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mcbmn: Bayesian multi-cue question generation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  std::size_t gen_n = 100;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "data/synth.jsonl";
  SynthOptions synth;
  gen->add_option("--n", gen_n, "number of examples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output JSONL path");
  gen->add_option("--noise", synth.noise, "feature noise std");
  gen->add_option("--questions", synth.questions_per_example, "reference questions per example");

  Common train_c, eval_c, sample_c, var_c, sweep_c;
  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint, loss curve and config");
  add_common(tr, train_c);

  auto* ev = app.add_subcommand("eval", "generate and score questions");
  add_common(ev, eval_c);
  std::string ev_ckpt, ev_split, ev_generations;
  ev->add_option("--checkpoint", ev_ckpt, "defaults to <out_dir>/checkpoint.json");
  ev->add_option("--split", ev_split, "train|val|all");
  ev->add_option("--generations", ev_generations, "score an existing generation file instead of decoding");

  auto* sa = app.add_subcommand("sample", "draw Monte-Carlo questions with uncertainty");
  add_common(sa, sample_c);
  std::string sa_ckpt, sa_split;
  std::optional<std::size_t> sa_samples;
  sa->add_option("--checkpoint", sa_ckpt, "defaults to <out_dir>/checkpoint.json");
  sa->add_option("--split", sa_split, "train|val|all");
  sa->add_option("--samples", sa_samples, "T; defaults to eval.samples");

  auto* va = app.add_subcommand("variance", "normalized variance of the mixed encoding");
  add_common(va, var_c);
  std::string va_ckpt;
  std::optional<std::size_t> va_examples, va_samples;
  bool va_per_dim = false;
  va->add_option("--checkpoint", va_ckpt, "defaults to <out_dir>/checkpoint.json");
  va->add_option("--examples", va_examples, "n; defaults to variance.examples");
  va->add_option("--samples", va_samples, "T; defaults to variance.samples");
  va->add_flag("--per-dim", va_per_dim, "add per-dimension mean and reference columns");

  auto* sw = app.add_subcommand("sweep", "train and evaluate every run of a manifest");
  add_common(sw, sweep_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("USAGE_ERROR", e.what());
  }

  try {
    if (*gen) {
      ensure_parent(gen_out);
      save_dataset(synth_generate(gen_n, gen_seed, synth), gen_out);
      std::cout << "wrote " << gen_n << " examples to " << gen_out << '\n';
      return 0;
    }
    if (*tr) {
      RunConfig cfg = resolve(train_c);
      if (!train_c.out.empty()) cfg.paths.out_dir = train_c.out;
      const Dataset data = load_dataset(cfg.paths.dataset);
      TrainOptions opts;
      opts.out_dir = cfg.paths.out_dir;
      opts.progress = [](const EpochStats& s) {
        std::cout << "epoch " << s.epoch << " train_loss " << s.train_loss;
        if (s.val_loss) std::cout << " val_loss " << *s.val_loss;
        std::cout << " L_gen " << s.gen << " L_u " << s.uncertainty;
        if (s.probe) std::cout << " val_bleu_1 " << s.probe->bleu[0];
        std::cout << '\n';
      };
      const TrainResult r = train(cfg, data, opts);
      std::cout << "best epoch " << r.best_epoch << " loss " << r.best_loss << "; wrote " << cfg.paths.out_dir << '\n';
      return 0;
    }
    if (*ev) {
      RunConfig cfg = resolve(eval_c);
      const std::string out = eval_c.out.empty() ? cfg.paths.out_dir : eval_c.out;
      const Dataset data = load_dataset(cfg.paths.dataset);
      fs::create_directories(out);
      const fs::path dir(out);
      EvalReport report;
      if (!ev_generations.empty()) {
        report = corpus_eval(read_generations(ev_generations, data.vocab), data, cfg.eval.bleu, cfg.eval.smoothing);
      } else {
        const Model model = load_model(cfg, data, checkpoint_path(cfg, ev_ckpt));
        Evaluation e = evaluate(cfg, model, data, parse_split_flag(ev_split, cfg.eval.split));
        write_generations(e.generations, data.vocab, (dir / "generations.jsonl").string());
        report = std::move(e.report);
      }
      write_report(report, (dir / "report.json").string(), (dir / "scores.csv").string(),
                   (dir / "first_words.csv").string());
      std::cout << "BLEU-1 " << report.bleu[0] << " BLEU-4 " << report.bleu[3] << " ROUGE-L " << report.rouge
                << " CIDEr " << report.cider << "; wrote " << out << '\n';
      return 0;
    }
    if (*sa) {
      RunConfig cfg = resolve(sample_c);
      const Dataset data = load_dataset(cfg.paths.dataset);
      const Model model = load_model(cfg, data, checkpoint_path(cfg, sa_ckpt));
      const std::string out =
          sample_c.out.empty() ? (fs::path(cfg.paths.out_dir) / "samples.jsonl").string() : sample_c.out;
      const std::size_t T = sa_samples.value_or(cfg.eval.samples);
      if (T == 0) fail(ErrorCode::kInvalidArgument, "--samples must be >= 1");
      ensure_parent(out);
      write_generations(sample_questions(cfg, model, data, parse_split_flag(sa_split, cfg.eval.split), T), data.vocab,
                        out);
      std::cout << "wrote " << out << '\n';
      return 0;
    }
    if (*va) {
      RunConfig cfg = resolve(var_c);
      if (va_examples) cfg.variance.examples = *va_examples;
      if (va_samples) {
        if (*va_samples < 2) fail(ErrorCode::kInvalidArgument, "variance probe needs T >= 2");
        cfg.variance.samples = *va_samples;
      }
      cfg.validate();
      const Dataset data = load_dataset(cfg.paths.dataset);
      const Model model = load_model(cfg, data, checkpoint_path(cfg, va_ckpt));
      const std::string out =
          var_c.out.empty() ? (fs::path(cfg.paths.out_dir) / "variance.csv").string() : var_c.out;
      ensure_parent(out);
      const auto records = variance_probe(cfg, model, data);
      write_variance_csv(records, out, va_per_dim);
      std::cout << "mean normalized variance " << mean_norm_variance(records) << "; wrote " << out << '\n';
      return 0;
    }
    if (*sw) {
      std::ifstream in(sweep_c.config);
      if (!in) fail(ErrorCode::kConfigError, "cannot open manifest '" + sweep_c.config + "'");
      nlohmann::json manifest;
      try {
        manifest = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::kConfigError, "manifest is not valid JSON: " + std::string(e.what()));
      }
      std::vector<SweepRun> runs = expand_sweep(manifest, fs::path(sweep_c.config).parent_path().string());
      if (sweep_c.seed) {
        for (auto& r : runs) r.config.seed = *sweep_c.seed;
      }
      const std::string out = sweep_c.out.empty() ? "runs/sweep" : sweep_c.out;
      const auto results = run_sweep(runs, out, [](const std::string& m) { std::cout << m << std::endl; });
      std::cout << "wrote " << results.size() << " reports to " << out << '\n';
      return 0;
    }
  } catch (const Error& e) {
    return report_error(error_class(e.code()), e.what());
  } catch (const fs::filesystem_error& e) {
    return report_error("IO_ERROR", e.what());
  } catch (const std::exception& e) {
    return report_error("INTERNAL_ERROR", e.what());
  }
  return 0;
}
