// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbmn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "mcbmn/error.hpp"

namespace mcbmn {

namespace fs = std::filesystem;

namespace {

// Children of the run seed.
enum StreamKey : std::uint64_t {
  kInitKey = 1,
  kSplitKey = 2,
  kShuffleKey = 3,
  kTrainKey = 4,
  kValKey = 5,
  kEvalKey = 6,
  kSampleKey = 7,
  kVarianceKey = 8,
};

constexpr std::uint64_t kTargetPick = 0xfffff;
constexpr std::size_t kEvalChunk = 16;

std::string num(double v) { return nlohmann::json(v).dump(); }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write '" + path + "'");
  return out;
}

std::vector<TrainRow> make_rows(const Dataset& data, std::size_t idx, TargetMode mode, const RngStream& stream) {
  const CueBundle& b = data.examples[idx];
  std::vector<TrainRow> rows;
  switch (mode) {
    case TargetMode::kFirst:
      rows.push_back({&b, b.questions.front(), stream});
      break;
    case TargetMode::kSample: {
      RngStream pick = stream.split(kTargetPick);
      rows.push_back({&b, b.questions[pick.below(b.questions.size())], stream});
      break;
    }
    case TargetMode::kAll:
      for (std::size_t j = 0; j < b.questions.size(); ++j) rows.push_back({&b, b.questions[j], stream.split(j)});
      break;
  }
  return rows;
}

std::string batch_ids(const Dataset& data, std::span<const std::size_t> idx) {
  std::string s;
  for (std::size_t i : idx) s += (s.empty() ? "" : ",") + data.examples[i].id;
  return s;
}

double held_out_loss(const RunConfig& config, const Model& model, const Dataset& data,
                     const std::vector<std::size_t>& val, const LossOptions& base) {
  LossOptions lo = base;
  lo.mode = Mode::kDeterministic;
  const RngStream root = RngStream(config.seed).split(kValKey);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < val.size(); start += config.optimizer.batch_size) {
    const std::size_t end = std::min(val.size(), start + config.optimizer.batch_size);
    std::vector<TrainRow> rows;
    for (std::size_t k = start; k < end; ++k) {
      auto r = make_rows(data, val[k], TargetMode::kAll, root.split(val[k]));
      rows.insert(rows.end(), r.begin(), r.end());
    }
    total += compute_loss(model, rows, lo, false).total * static_cast<double>(rows.size());
    count += rows.size();
  }
  return total / static_cast<double>(count);
}

void keep_max(EvalReport& best, const EvalReport& r) {
  for (std::size_t n = 0; n < kMaxBleuOrder; ++n) best.bleu[n] = std::max(best.bleu[n], r.bleu[n]);
  best.rouge = std::max(best.rouge, r.rouge);
  best.cider = std::max(best.cider, r.cider);
}

void write_scores_json(const EvalReport& r, const std::string& path) {
  nlohmann::ordered_json j;
  j["aggregation"] = r.aggregation == BleuAggregation::kMaxRef ? "max_ref" : "corpus";
  for (std::size_t n = 0; n < kMaxBleuOrder; ++n) j["bleu_" + std::to_string(n + 1)] = r.bleu[n];
  j["rouge_l"] = r.rouge;
  j["cider"] = r.cider;
  open_out(path) << j.dump(2) << '\n';
}

}  // namespace

DataSplit split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RngStream rng = RngStream(seed).split(kSplitKey);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n == 0 ? 0 : n - 1;
  DataSplit s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

std::vector<std::size_t> split_members(const DataSplit& split, Split which) {
  switch (which) {
    case Split::kTrain: return split.train;
    case Split::kVal: return split.val;
    case Split::kAll: {
      std::vector<std::size_t> all = split.train;
      all.insert(all.end(), split.val.begin(), split.val.end());
      std::sort(all.begin(), all.end());
      return all;
    }
  }
  return {};
}

Optimizer::Optimizer(const RunConfig::Optimizer& config, ParameterStore& store)
    : config_(config), params_(store.all()) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Optimizer::step() {
  ++t_;
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (Parameter* p : params_)
      for (double g : p->grad.data()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  const double lr = config_.learning_rate;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k] * scale;
      if (config_.kind == OptimizerKind::kAdam) {
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-8);
      } else if (config_.momentum > 0.0) {
        m[k] = config_.momentum * m[k] + g;
        p.value[k] -= lr * m[k];
      } else {
        p.value[k] -= lr * g;
      }
    }
  }
}

TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options) {
  config.validate();
  if (data.examples.empty()) fail(ErrorCode::kDatasetInvalid, "dataset has no examples");
  const ModelConfig mc = config.resolve_model(data);
  TrainResult result{Model::create(mc, RngStream(config.seed).split(kInitKey)), {}, 0, 0.0, std::nullopt};
  Model& model = result.model;
  const DataSplit split = split_indices(data.examples.size(), config.training.validation_fraction, config.seed);
  Optimizer opt(config.optimizer, *model.store);

  LossOptions lo;
  lo.mumc = config.mumc.enabled;
  lo.mumc_config = config.train_mumc();
  lo.stop_gradient = config.mumc.stop_gradient;
  lo.mode = Mode::kStochastic;

  const RngStream shuffle_root = RngStream(config.seed).split(kShuffleKey);
  const RngStream train_root = RngStream(config.seed).split(kTrainKey);
  std::vector<Tensor> best;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= config.optimizer.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    RngStream sh = shuffle_root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[sh.below(i)]);
    const RngStream epoch_root = train_root.split(epoch);

    EpochStats st;
    st.epoch = epoch;
    std::size_t rows_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.optimizer.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.optimizer.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<TrainRow> rows;
      for (std::size_t i : idx) {
        auto r = make_rows(data, i, config.training.target, epoch_root.split(i));
        rows.insert(rows.end(), r.begin(), r.end());
      }
      model.store->zero_grad();
      LossValues lv;
      try {
        lv = compute_loss(model, rows, lo, true);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNonFinite) throw;
        fail(ErrorCode::kNonFinite, "epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(start / config.optimizer.batch_size) + " [" +
                                        batch_ids(data, idx) + "]: " + e.what());
      }
      bool finite = std::isfinite(lv.total);
      for (const Parameter* p : model.store->all()) finite = finite && p->grad.all_finite();
      if (!finite) {
        fail(ErrorCode::kNonFinite, "epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(start / config.optimizer.batch_size) + " [" +
                                        batch_ids(data, idx) + "]: loss " + num(lv.total) +
                                        " or its gradient is not finite");
      }
      opt.step();
      const double w = static_cast<double>(rows.size());
      st.train_loss += lv.total * w;
      st.gen += lv.gen * w;
      st.uncertainty += lv.uncertainty * w;
      rows_seen += rows.size();
    }
    st.train_loss /= static_cast<double>(rows_seen);
    st.gen /= static_cast<double>(rows_seen);
    st.uncertainty /= static_cast<double>(rows_seen);
    if (!split.val.empty()) st.val_loss = held_out_loss(config, model, data, split.val, lo);

    if (config.training.eval_every > 0 && epoch % config.training.eval_every == 0 && !split.val.empty()) {
      st.probe = evaluate_indices(config, model, data, split.val).report;
      if (!result.max_over_epochs) {
        result.max_over_epochs = *st.probe;
        result.max_over_epochs->examples.clear();
        result.max_over_epochs->first_words.clear();
      } else {
        keep_max(*result.max_over_epochs, *st.probe);
      }
    }
    // Lower is better; probe scores are negated.
    double score = 0.0;
    bool take = false;
    switch (config.training.selection) {
      case Selection::kValLoss:
        score = st.val_loss.value_or(st.train_loss);
        take = !have_best || score < result.best_loss;
        break;
      case Selection::kLast:
        score = st.train_loss;
        take = true;
        break;
      case Selection::kProbeBleu:
        if (st.probe) {
          score = -st.probe->bleu[0];
          take = !have_best || score < result.best_loss;
        }
        break;
    }
    if (take) {
      have_best = true;
      result.best_loss = score;
      result.best_epoch = epoch;
      best.clear();
      for (const Parameter* p : model.store->all()) best.push_back(p->value);
    }
    if (options.progress) options.progress(st);
    result.curve.push_back(std::move(st));
  }
  if (have_best) {
    std::size_t i = 0;
    for (Parameter* p : model.store->all()) p->value = best[i++];
  }

  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const fs::path dir(options.out_dir);
    save_config(config, (dir / "config.json").string());
    save_checkpoint(*model.store, (dir / "checkpoint.json").string());
    std::ofstream curve = open_out((dir / "loss_curve.csv").string());
    curve << "epoch,train_loss,val_loss,L_gen,L_u\n";
    for (const auto& s : result.curve) {
      curve << s.epoch << ',' << num(s.train_loss) << ',' << (s.val_loss ? num(*s.val_loss) : "") << ','
            << num(s.gen) << ',' << num(s.uncertainty) << '\n';
    }
    if (result.max_over_epochs) {
      std::ofstream probes = open_out((dir / "probe_scores.csv").string());
      probes << "epoch,bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider\n";
      for (const auto& s : result.curve) {
        if (!s.probe) continue;
        probes << s.epoch;
        for (double b : s.probe->bleu) probes << ',' << num(b);
        probes << ',' << num(s.probe->rouge) << ',' << num(s.probe->cider) << '\n';
      }
      write_scores_json(*result.max_over_epochs, (dir / "report_max_over_epochs.json").string());
    }
  }
  return result;
}

Model load_model(const RunConfig& config, const Dataset& data, const std::string& checkpoint) {
  Model model = Model::create(config.resolve_model(data), RngStream(config.seed).split(kInitKey));
  load_checkpoint(*model.store, checkpoint);
  return model;
}

Evaluation evaluate(const RunConfig& config, const Model& model, const Dataset& data, Split which) {
  const DataSplit split = split_indices(data.examples.size(), config.training.validation_fraction, config.seed);
  std::vector<std::size_t> idx = split_members(split, which);
  if (idx.empty()) {
    fail(ErrorCode::kDatasetInvalid, std::string("split '") + std::string(to_string(which)) + "' has no examples");
  }
  return evaluate_indices(config, model, data, idx);
}

Evaluation evaluate_indices(const RunConfig& config, const Model& model, const Dataset& data,
                            const std::vector<std::size_t>& indices) {
  const GenerateOptions go = config.generate_options();
  const RngStream base = RngStream(config.seed).split(kEvalKey);
  for (std::size_t i : indices) {
    if (i >= data.examples.size()) {
      fail(ErrorCode::kInvalidArgument, "evaluate: example index " + std::to_string(i) + " out of range");
    }
  }
  Evaluation ev;
  std::vector<GeneratedQuestion> generated;
  for (std::size_t start = 0; start < indices.size(); start += kEvalChunk) {
    const std::size_t end = std::min(indices.size(), start + kEvalChunk);
    std::vector<const CueBundle*> batch;
    std::vector<std::uint64_t> keys;
    for (std::size_t k = start; k < end; ++k) {
      batch.push_back(&data.examples[indices[k]]);
      keys.push_back(indices[k]);
    }
    auto out = generate(model, batch, keys, go, base);
    for (std::size_t k = 0; k < out.size(); ++k) {
      GenerationRecord rec{batch[k]->id, {out[k].tokens}, out[k].epistemic, out[k].aleatoric, out[k].predictive};
      generated.push_back({rec.id, out[k].tokens});
      ev.generations.push_back(std::move(rec));
    }
  }
  ev.report = corpus_eval(generated, data, config.eval.bleu, config.eval.smoothing);
  return ev;
}

std::vector<GenerationRecord> sample_questions(const RunConfig& config, const Model& model, const Dataset& data,
                                               Split which, std::size_t samples) {
  const DataSplit split = split_indices(data.examples.size(), config.training.validation_fraction, config.seed);
  GenerateOptions go = config.generate_options();
  go.samples = samples;
  const RngStream base = RngStream(config.seed).split(kSampleKey);
  std::vector<GenerationRecord> out;
  for (std::size_t i : split_members(split, which)) {
    McGeneration g = generate_mc(model, data.examples[i], i, go, base);
    GenerationRecord rec{data.examples[i].id, {}, g.consensus.epistemic, g.consensus.aleatoric,
                         g.consensus.predictive};
    for (auto& s : g.samples) rec.samples.push_back(std::move(s.tokens));
    out.push_back(std::move(rec));
  }
  return out;
}

void write_generations(const std::vector<GenerationRecord>& records, const Vocabulary& vocab,
                       const std::string& path) {
  std::ofstream out = open_out(path);
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : r.samples) j["samples"].push_back(vocab.decode(s));
    j["epistemic"] = r.epistemic;
    j["aleatoric"] = r.aleatoric;
    j["predictive"] = r.predictive;
    out << j.dump() << '\n';
  }
}

std::vector<GeneratedQuestion> read_generations(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kDatasetNotFound, "generation file '" + path + "' not found");
  std::vector<GeneratedQuestion> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + " line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kDatasetInvalid, where + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("samples") ||
        !j["samples"].is_array() || j["samples"].empty() || !j["samples"][0].is_string()) {
      fail(ErrorCode::kDatasetInvalid, where + "expected {id, samples: [text, ...], ...}");
    }
    out.push_back({j["id"].get<std::string>(), vocab.encode(j["samples"][0].get<std::string>())});
  }
  return out;
}

std::vector<VarianceRecord> variance_probe(const RunConfig& config, const Model& model, const Dataset& data,
                                           const std::vector<std::size_t>& indices, std::size_t samples) {
  if (samples < 2) fail(ErrorCode::kInvalidArgument, "variance probe needs T >= 2, got " + std::to_string(samples));
  const Model probe = model.config.dropout_kind == DropoutKind::kNone
                          ? model.with_dropout(model.config.dropout_rate, DropoutKind::kBernoulli)
                          : model;
  const RngStream base = RngStream(config.seed).split(kVarianceKey);
  std::vector<VarianceRecord> out;
  for (std::size_t i : indices) {
    if (i >= data.examples.size()) {
      fail(ErrorCode::kInvalidArgument, "variance probe: example index " + std::to_string(i) + " out of range");
    }
    const CueBundle* b = &data.examples[i];
    const RngStream ex = base.split(i);
    Tape tape(false);
    std::vector<RngStream> streams;
    for (std::size_t t = 0; t < samples; ++t) streams.push_back(ex.split(t));
    MaskSource masks(streams);
    const Tensor g = encode(tape, probe, std::vector<const CueBundle*>(samples, b), Mode::kStochastic, masks)
                         .g_enc.value();
    MaskSource none({ex});
    const Tensor ref = encode(tape, probe, {b}, Mode::kDeterministic, none).g_enc.value();
    VarianceRecord rec{b->id, std::vector<double>(g.cols(), 0.0), ref.row(0), 0.0};
    double gap = 0.0, scale = 0.0;
    for (std::size_t c = 0; c < g.cols(); ++c) {
      // Running mean: identical draws reproduce the value exactly.
      double m = g.at(0, c);
      for (std::size_t t = 1; t < samples; ++t) m += (g.at(t, c) - m) / static_cast<double>(t + 1);
      rec.mc_mean[c] = m;
      gap += std::abs(m - rec.reference[c]);
      scale += std::abs(rec.reference[c]);
    }
    rec.norm_variance = gap == 0.0 ? 0.0 : gap / (scale + 1e-12);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<VarianceRecord> variance_probe(const RunConfig& config, const Model& model, const Dataset& data) {
  const DataSplit split = split_indices(data.examples.size(), config.training.validation_fraction, config.seed);
  std::vector<std::size_t> idx = split_members(split, config.eval.split);
  if (idx.size() > config.variance.examples) idx.resize(config.variance.examples);
  return variance_probe(config, model, data, idx, config.variance.samples);
}

void write_variance_csv(const std::vector<VarianceRecord>& records, const std::string& path, bool per_dim) {
  std::ofstream out = open_out(path);
  out << "id,norm_variance";
  const std::size_t d = records.empty() ? 0 : records.front().mc_mean.size();
  if (per_dim) {
    for (std::size_t c = 0; c < d; ++c) out << ",mean_" << c;
    for (std::size_t c = 0; c < d; ++c) out << ",ref_" << c;
  }
  out << '\n';
  for (const auto& r : records) {
    out << r.id << ',' << num(r.norm_variance);
    if (per_dim) {
      for (double v : r.mc_mean) out << ',' << num(v);
      for (double v : r.reference) out << ',' << num(v);
    }
    out << '\n';
  }
}

double mean_norm_variance(const std::vector<VarianceRecord>& records) {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.norm_variance;
  return s / static_cast<double>(records.size());
}

std::vector<SweepResult> run_sweep(const std::vector<SweepRun>& runs, const std::string& out_dir,
                                   const std::function<void(const std::string&)>& log) {
  fs::create_directories(out_dir);
  std::map<std::string, Dataset> datasets;
  std::vector<SweepResult> results;
  for (const SweepRun& run : runs) {
    const RunConfig& cfg = run.config;
    auto it = datasets.find(cfg.paths.dataset);
    if (it == datasets.end()) it = datasets.emplace(cfg.paths.dataset, load_dataset(cfg.paths.dataset)).first;
    const Dataset& data = it->second;
    const fs::path dir = fs::path(out_dir) / run.name;
    if (log) log("run " + run.name);
    TrainResult tr = train(cfg, data, {dir.string(), {}});
    Evaluation ev = evaluate(cfg, tr.model, data, cfg.eval.split);
    write_report(ev.report, (dir / "report.json").string(), (dir / "scores.csv").string(),
                 (dir / "first_words.csv").string());
    write_generations(ev.generations, data.vocab, (dir / "generations.jsonl").string());
    results.push_back({run.name, run.overrides, std::move(ev.report)});
  }
  std::ofstream sum = open_out((fs::path(out_dir) / "sweep_summary.csv").string());
  sum << "run,overrides,bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider\n";
  for (const auto& r : results) {
    std::string ov = r.overrides.dump();
    std::string quoted = "\"";
    for (char c : ov) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
    quoted += '"';
    sum << r.name << ',' << quoted;
    for (double b : r.report.bleu) sum << ',' << num(b);
    sum << ',' << num(r.report.rouge) << ',' << num(r.report.cider) << '\n';
  }
  return results;
}

}  // namespace mcbmn
