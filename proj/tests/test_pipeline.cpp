// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mergequant/pipeline.hpp"

namespace mq {
namespace {

namespace fs = std::filesystem;

nlohmann::json smoke_config() {
  return nlohmann::json::parse(R"({
    "seed": 3,
    "model": {"hidden": 16, "heads": 2, "ffn": 32},
    "data": {"calibration_samples": 2, "eval_samples": 2, "tokens": 8},
    "quant": {"bits": 4, "alpha": 2.0, "hadamard": true, "clip_grid": {"start_percent": 80, "step_percent": 5}},
    "lora": {"rank": 2, "steps": 5},
    "bench": {"batches": [1], "seqlens": [1, 4], "hidden": [16], "repetitions": 3, "warmup": 1}
  })");
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mergequant_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct PipelineRun {
  nlohmann::json calibrate, quantize, eval;
};

PipelineRun run_all(const PipelineConfig& c, const fs::path& dir) {
  return {cmd_calibrate(c, dir).report, cmd_quantize(c, dir).report, cmd_eval(c, dir).report};
}

TEST(Config, ParsesAndEchoesVerbatim) {
  const auto j = smoke_config();
  const auto c = parse_config(j);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.model.hidden, 16u);
  EXPECT_EQ(c.quant.clip_grid, (std::vector<double>{0.8, 0.85, 0.9, 0.95, 1.0}));
  EXPECT_TRUE(c.quant.hadamard);
  EXPECT_EQ(c.lora.rank, 2u);
  EXPECT_EQ(c.raw, j);
  EXPECT_EQ(parse_config(j, 99).seed, 99u);
  const auto dir = fresh_dir("echo");
  const auto r = cmd_calibrate(c, dir).report;
  EXPECT_EQ(r.at("config"), j);
  EXPECT_EQ(r.at("report_version"), 1);
  EXPECT_EQ(r.at("toolkit_version"), kToolkitVersion);
  EXPECT_EQ(r.at("seed"), 3);
  fs::remove_all(dir);
}

TEST(Config, RejectsInvalidDocuments) {
  auto bad = [](auto mutate) {
    auto j = smoke_config();
    mutate(j);
    return j;
  };
  EXPECT_THROW(parse_config(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["model"]["hidden"] = 24; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["model"]["heads"] = 3; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["quant"]["bits"] = 1; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["quant"]["clip_grid"] = {0.5, 0.7}; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["quant"]["alpha"] = "five"; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["lora"]["step_size"] = -1; })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["bench"]["batches"] = nlohmann::json::array(); })), ConfigError);
  EXPECT_THROW(parse_config(bad([](auto& j) { j["data"] = 5; })), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Pipeline, DeterministicArtifactsAndReports) {
  const auto c = parse_config(smoke_config());
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const PipelineRun ra = run_all(c, a), rb = run_all(c, b);
  EXPECT_EQ(slurp(a / kCalibrationFile), slurp(b / kCalibrationFile));
  EXPECT_EQ(slurp(a / kModelFile), slurp(b / kModelFile));
  EXPECT_EQ(strip_timings(ra.calibrate).dump(), strip_timings(rb.calibrate).dump());
  EXPECT_EQ(strip_timings(ra.quantize).dump(), strip_timings(rb.quantize).dump());
  EXPECT_EQ(strip_timings(ra.eval).dump(), strip_timings(rb.eval).dump());
  EXPECT_TRUE(ra.quantize.contains("timings"));
  const auto other = parse_config(smoke_config(), 4);
  cmd_calibrate(other, b);
  EXPECT_NE(slurp(a / kCalibrationFile), slurp(b / kCalibrationFile));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, ReportContents) {
  const auto c = parse_config(smoke_config());
  const auto dir = fresh_dir("contents");
  const PipelineRun r = run_all(c, dir);
  const auto& stats = r.calibrate.at("results").at("stats");
  EXPECT_EQ(stats.at("attn_in.channel").at("length"), 16);
  EXPECT_EQ(stats.at("down_in.channel").at("length"), 32);
  const auto& variants = r.quantize.at("results").at("variants");
  for (const char* v : {"mergequant", "per_channel_static", "per_tensor_static", "per_token_static"})
    EXPECT_TRUE(variants.contains(v)) << v;
  EXPECT_TRUE(variants.at("mergequant").contains("compensation"));
  const auto& ev = r.eval.at("results");
  EXPECT_TRUE(ev.at("variants").at("mergequant").contains("per_layer_mse"));
  EXPECT_EQ(ev.at("granularity_comparison").size(), 4u);
  for (const auto& item : ev.at("variants").items()) {
    const double m = item.value().at("block_mse");
    EXPECT_TRUE(std::isfinite(m)) << item.key();
    EXPECT_GT(m, 0.0) << item.key();
  }
  const TensorArchive model = TensorArchive::load(dir / kModelFile);
  EXPECT_TRUE(model.has_real("mergequant.qkv.lora_a"));
  EXPECT_TRUE(model.has_real("mergequant.attn_in.folded_gamma"));
  fs::remove_all(dir);
}

TEST(Pipeline, WideGridDrivesErrorsToZero) {
  auto j = smoke_config();
  j["quant"]["bits"] = 32;
  j["lora"]["rank"] = 0;
  j["quant"]["reconstruct"] = false;  // pruning is a structural loss, not a grid effect
  const auto dir = fresh_dir("wide");
  // Evaluate on the calibration tensors so static ranges cover every input.
  OutlierProfile p;
  p.seed = 5;
  save_calibration(dir / "data.mqt", generate_samples(p, 2, 8, 16, 0));
  j["data"]["calibration_path"] = (dir / "data.mqt").string();
  j["data"]["eval_path"] = (dir / "data.mqt").string();
  const auto r = run_all(parse_config(j), dir).eval;
  for (const auto& item : r.at("results").at("variants").items())
    EXPECT_LE(item.value().at("relative_error").get<double>(), 1e-4) << item.key();
  fs::remove_all(dir);
}

TEST(Pipeline, EvalConsumesOnlyTheModelArtifact) {
  const auto c = parse_config(smoke_config());
  const auto dir = fresh_dir("isolation");
  cmd_calibrate(c, dir);
  cmd_quantize(c, dir);
  const auto before = strip_timings(cmd_eval(c, dir).report);
  fs::remove(dir / kCalibrationFile);
  EXPECT_EQ(strip_timings(cmd_eval(c, dir).report), before);
  fs::remove(dir / kModelFile);
  EXPECT_THROW(cmd_eval(c, dir), DataError);
  EXPECT_THROW(cmd_quantize(c, dir), DataError);
  fs::remove_all(dir);
}

TEST(Pipeline, StageFailuresNameTheStage) {
  auto j = smoke_config();
  j["data"]["calibration_path"] = "/nonexistent/calib.mqt";
  const auto c = parse_config(j);
  const auto dir = fresh_dir("stage");
  try {
    cmd_calibrate(c, dir);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'load_data'"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("/nonexistent/calib.mqt"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Pipeline, ShapeMismatchBetweenStagesIsRejected) {
  const auto dir = fresh_dir("mismatch");
  cmd_calibrate(parse_config(smoke_config()), dir);
  auto j = smoke_config();
  j["model"]["hidden"] = 32;
  EXPECT_THROW(cmd_quantize(parse_config(j), dir), ConfigError);
  fs::remove_all(dir);
}

TEST(Bench, GridAndOpCounts) {
  const auto c = parse_config(smoke_config());
  const auto r = cmd_bench(c);
  const auto& res = r.report.at("results");
  EXPECT_EQ(res.at("repetitions"), 3);
  EXPECT_EQ(res.at("grid").size(), 2u);
  EXPECT_TRUE(res.at("op_count_assertion_holds").get<bool>());
  for (const auto& cell : res.at("grid")) EXPECT_LT(cell.at("gather_ops"), cell.at("quant_dequant_ops"));
  EXPECT_EQ(r.report.at("timings").at("grid").size(), 2u);
  EXPECT_EQ(r.csv.size(), 3u);
  for (std::size_t n : {1u, 16u, 4096u}) {
    EXPECT_EQ(gather_ops_per_token(n), n);
    EXPECT_GE(quant_dequant_ops_per_token(n), 3 * n);
  }
}

TEST(Csv, Formatting) {
  EXPECT_EQ(to_csv({{"a", "b"}, {"1", "2"}}), "a,b\n1,2\n");
  const auto c = parse_config(smoke_config());
  const auto dir = fresh_dir("csv");
  const auto r = cmd_calibrate(c, dir);
  EXPECT_EQ(r.csv.front().front(), "stats");
  EXPECT_EQ(r.csv.size(), 1u + BlockCalibration::kNames.size());
  fs::remove_all(dir);
}

}  // namespace
}  // namespace mq
