// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// mergequant calibrate|quantize|eval|bench --config <json> [--seed N] [--out DIR] [--format json|csv]
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mergequant/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string format = "json";
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--out", o.out, "artifact and report directory");
  sub->add_option("--format", o.format, "report format")->check(CLI::IsMember({"json", "csv"}));
}

void emit(const mq::CommandResult& r, const std::string& command, const Options& o) {
  std::filesystem::create_directories(o.out);
  const std::filesystem::path path = std::filesystem::path(o.out) / (command + "_report." + o.format);
  const std::string text = o.format == "json" ? r.report.dump(2) + "\n" : mq::to_csv(r.csv);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw mq::DataError("cannot write report " + path.string());
  f << text;
  std::cout << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-channel static W4A4 quantization toolkit"};
  app.require_subcommand(1);
  Options o;
  for (const char* name : {"calibrate", "quantize", "eval", "bench"}) {
    static const std::map<std::string, std::string> help{
        {"calibrate", "collect activation statistics"},
        {"quantize", "plan, fold, clip, quantize and compensate"},
        {"eval", "compare quantized variants against the reference block"},
        {"bench", "time gather against per-token quantize+dequantize"}};
    add_common(app.add_subcommand(name, help.at(name)), o);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const mq::PipelineConfig cfg = mq::load_config(o.config, o.seed);
    mq::CommandResult r;
    if (command == "calibrate") r = mq::cmd_calibrate(cfg, o.out);
    else if (command == "quantize") r = mq::cmd_quantize(cfg, o.out);
    else if (command == "eval") r = mq::cmd_eval(cfg, o.out);
    else r = mq::cmd_bench(cfg);
    emit(r, command, o);
    return kOk;
  } catch (const mq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const mq::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const mq::Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
}
