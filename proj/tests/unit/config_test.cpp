// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "mcbmn/config.hpp"
#include "mcbmn/error.hpp"

namespace mcbmn {
namespace {

using nlohmann::json;

std::string config_error(const json& j) {
  try {
    config_from_json(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
    return e.what();
  }
  ADD_FAILURE() << "accepted " << j.dump();
  return "";
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.seed = 77;
  c.model.hidden_dim = 12;
  c.model.cues = {"image", "caption"};
  c.model.fusion_init_gain = 2.5;
  c.optimizer.kind = OptimizerKind::kAdam;
  c.training.selection = Selection::kLast;
  c.training.target = TargetMode::kAll;
  c.eval.decision = Decision::kMcMean;
  const auto j = config_to_json(c);
  const RunConfig r = config_from_json(json::parse(j.dump()));
  EXPECT_EQ(config_to_json(r), j);
  EXPECT_EQ(r.training.selection, Selection::kLast);
  EXPECT_EQ(r.model.fusion_init_gain, 2.5);

  const auto path = std::filesystem::temp_directory_path() / "mcbmn_config_rt.json";
  save_config(c, path.string());
  EXPECT_EQ(config_to_json(load_config(path.string())), j);
  std::filesystem::remove(path);
}

TEST(Config, UnknownAndMistypedKeysNameTheirPath) {
  EXPECT_NE(config_error({{"modle", {}}}).find("modle"), std::string::npos);
  EXPECT_NE(config_error({{"model", {{"hidden", 3}}}}).find("model.hidden"), std::string::npos);
  EXPECT_NE(config_error({{"optimizer", {{"epochs", "ten"}}}}).find("optimizer.epochs"), std::string::npos);
  config_error({{"training", {{"selection", "best"}}}});
  config_error({{"dropout", {{"kind", "uniform"}}}});
  config_error({{"preset", "MC-Nothing"}});
  EXPECT_THROW(load_config("/nonexistent/mcbmn.json"), Error);
}

TEST(Config, ProbeSelectionNeedsProbesAndValidation) {
  config_error({{"training", {{"selection", "probe_bleu"}, {"eval_every", 0}}}});
  config_error({{"training", {{"selection", "probe_bleu"}, {"eval_every", 2}, {"validation_fraction", 0.0}}}});
  config_from_json({{"training", {{"selection", "probe_bleu"}, {"eval_every", 2}}}}).validate();
}

TEST(Config, EveryPresetValidates) {
  ASSERT_FALSE(ablation_presets().empty());
  for (const auto& [name, body] : ablation_presets()) {
    RunConfig c = config_from_json({{"preset", name}});
    EXPECT_NO_THROW(c.validate()) << name;
  }
  const RunConfig b2 = config_from_json({{"preset", "MC-BMN2"}});
  EXPECT_EQ(b2.model.cues, (std::vector<std::string>{"image", "place"}));
  const RunConfig smix = config_from_json({{"preset", "MC-SMix"}, {"dropout", {{"rate", 0.2}}}});
  EXPECT_EQ(smix.model.combiner, Combiner::kMixture);
  EXPECT_EQ(smix.model.dropout_kind, DropoutKind::kNone);
  EXPECT_EQ(smix.model.dropout_rate, 0.2);
}

TEST(Config, ResolveModelFillsDatasetDims) {
  const Dataset d = synth_generate(2, 1);
  RunConfig c;
  const ModelConfig m = c.resolve_model(d);
  EXPECT_EQ(m.vocab_size, d.vocab.size());
  EXPECT_EQ(m.image_dim, d.image_dim);
  c.model.image_dim = d.image_dim + 1;
  EXPECT_THROW(c.resolve_model(d), Error);
}

TEST(Sweep, CartesianProductWithSeeds) {
  const json manifest = {{"base", {{"optimizer", {{"epochs", 1}}}}},
                         {"grid", {{"model.hidden_dim", {8, 16}}, {"combiner", {"moderator", "mixture", "moderator"}}}},
                         {"seeds", {1, 2}}};
  EXPECT_THROW(expand_sweep(manifest), Error);

  json ok = manifest;
  ok["grid"]["combiner"] = {"moderator", "mixture"};
  const auto runs = expand_sweep(ok);
  ASSERT_EQ(runs.size(), 8u);
  std::set<std::string> names;
  std::set<std::tuple<std::size_t, Combiner, std::uint64_t>> combos;
  for (const auto& r : runs) {
    names.insert(r.name);
    combos.insert({r.config.model.hidden_dim, r.config.model.combiner, r.config.seed});
    EXPECT_EQ(r.config.optimizer.epochs, 1u);
    EXPECT_TRUE(r.overrides.contains("seed"));
  }
  EXPECT_EQ(names.size(), 8u);
  EXPECT_EQ(combos.size(), 8u);

  EXPECT_THROW(expand_sweep({{"grid", {{"model.bogus", {1}}}}}), Error);
  EXPECT_THROW(expand_sweep({{"grid", {{"seed", json::array()}}}}), Error);
  EXPECT_THROW(expand_sweep({{"extra", 1}}), Error);
}

}  // namespace
}  // namespace mcbmn
