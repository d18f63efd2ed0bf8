// Copyright 2026 The mcbmn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct CliRun {
  int status = 0;
  std::string err;
};

CliRun cli(const fs::path& dir, const std::string& args) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + MCBMN_CLI_PATH + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
  CliRun r;
  r.status = std::system(cmd.c_str());
  r.err = slurp(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mcbmn_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TEST(Cli, GenDataIsByteIdentical) {
  const fs::path d = fresh_dir("gen");
  ASSERT_EQ(cli(d, "gen-data --n 100 --seed 7 --out " + (d / "a.jsonl").string()).status, 0);
  ASSERT_EQ(cli(d, "gen-data --n 100 --seed 7 --out " + (d / "b.jsonl").string()).status, 0);
  const std::string a = slurp(d / "a.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(d / "b.jsonl"));
  fs::remove_all(d);
}

TEST(Cli, MissingDatasetIsOneErrorLine) {
  const fs::path d = fresh_dir("missing");
  std::ofstream(d / "run.json") << R"({"paths": {"dataset": ")" << (d / "absent.jsonl").string() << R"("}})";
  const CliRun r = cli(d, "train --config " + (d / "run.json").string());
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("error: DATASET_NOT_FOUND: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  fs::remove_all(d);
}

TEST(Cli, UnknownConfigKeyIsConfigError) {
  const fs::path d = fresh_dir("badkey");
  std::ofstream(d / "run.json") << R"({"optimizer": {"lr": 0.1}})";
  const CliRun r = cli(d, "train --config " + (d / "run.json").string());
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(r.err.rfind("error: CONFIG_ERROR: ", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("optimizer.lr"), std::string::npos) << r.err;
  fs::remove_all(d);
}

TEST(Cli, SweepWritesOneReportPerRun) {
  const fs::path d = fresh_dir("sweep");
  ASSERT_EQ(cli(d, "gen-data --n 8 --seed 3 --out " + (d / "d.jsonl").string()).status, 0);
  const nlohmann::json manifest = {
      {"base",
       {{"paths", {{"dataset", (d / "d.jsonl").string()}}},
        {"model", {{"hidden_dim", 4}, {"embed_dim", 4}, {"encoder_hidden", 4}}},
        {"mumc", {{"train_samples", 2}, {"eval_samples", 2}}},
        {"optimizer", {{"epochs", 1}, {"batch_size", 4}}},
        {"eval", {{"samples", 2}, {"max_len", 4}}}}},
      {"grid",
       {{"cues", {{"image", "place"}, {"image", "caption"}, {"image", "place", "caption", "tag"}}},
        {"dropout.kind", {"bernoulli", "none"}}}}};
  std::ofstream(d / "sweep.json") << manifest.dump();
  const CliRun r = cli(d, "sweep --config " + (d / "sweep.json").string() + " --out " + (d / "out").string());
  ASSERT_EQ(r.status, 0) << r.err;
  std::size_t reports = 0;
  for (const auto& e : fs::recursive_directory_iterator(d / "out"))
    if (e.path().filename() == "report.json") ++reports;
  EXPECT_EQ(reports, 6u);
  fs::remove_all(d);
}

}  // namespace
