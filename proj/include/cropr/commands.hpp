// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Implementations of the command-line subcommands. Each returns a process
// exit code: 0 success, 2 configuration error, 3 numeric or validation
// failure. Exceptions are mapped by run_guarded.

#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropr/config.hpp"

namespace cropr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Runs `fn`, printing any exception to `err` and mapping it to an exit code.
int run_guarded(const std::function<int()>& fn, std::ostream& err);

/// Loads a run-config file (empty path: defaults) and applies overrides.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          nlohmann::json* resolved_json = nullptr);

/// Header line block for text outputs: "# cropr <version> config_hash=<h>".
std::string provenance_comment(const nlohmann::json& config_json);

struct ScheduleArgs {
  std::string config_path;  // when set, the run-config's schedule is used
  std::vector<std::string> overrides;
  Index depth = 24;
  Index m0 = 196;
  Index r = 0;
  std::vector<ScheduleEntry> stages;  // staged schedule when non-empty
  bool llf = false;
  bool cls = false;
  bool prefer_div8 = false;
  std::string json_out;  // also write the JSON here
};
int cmd_schedule(const ScheduleArgs& args, std::ostream& out);

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint_out = "model.ckpt";
  std::string metrics_out = "metrics.csv";
  bool quiet = false;
};
int cmd_train(const TrainArgs& args, std::ostream& out);

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;  // exported dataset file; empty: the config's test split
  std::optional<std::string> selector;  // override, e.g. "random"
  std::optional<bool> invert;
  std::string routing = "folded";  // folded | full
  std::string csv_out;             // empty: stdout
  int workers = 1;
  std::uint64_t seed = 0;
};
int cmd_eval(const EvalArgs& args, std::ostream& out);

struct FoldArgs {
  std::string checkpoint;
  std::string out;
};
int cmd_fold(const FoldArgs& args, std::ostream& out);

struct BenchArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string csv_out;  // empty: stdout
  bool router_only = false;
};
int cmd_bench(const BenchArgs& args, std::ostream& out);

struct HeatmapArgs {
  std::string checkpoint;
  Index index = 0;  // test-split sample
  std::string dataset;
  std::string pgm_out = "heatmap.pgm";
  std::string csv_out = "heatmap.csv";
};
int cmd_heatmap(const HeatmapArgs& args, std::ostream& out);

struct ExportArgs {
  std::string checkpoint;
  std::string dataset;
  Index count = 16;
  std::string out = "tokens.bin";
};
int cmd_export_tokens(const ExportArgs& args, std::ostream& out);

struct ExportDataArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string split = "test";  // train | test
  std::string out = "data.bin";
};
int cmd_export_data(const ExportDataArgs& args, std::ostream& out);

/// Pre-head token dump (see docs/formats.md).
struct TokenDump {
  nlohmann::json header;
  Index images = 0;
  Index rows_per_image = 0;
  Index width = 0;
  std::vector<std::int64_t> positions;  // [images*rows]
  std::vector<std::int32_t> stages;     // [images*rows]
  std::vector<double> values;           // [images*rows*width]
};
TokenDump read_token_dump(const std::string& path);

}  // namespace cropr
