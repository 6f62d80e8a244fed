// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subcommands end to end on a tiny model, in process, plus exit codes of the
// real binary.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "cropr/checkpoint.hpp"
#include "cropr/commands.hpp"
#include "cropr/schedule.hpp"

using namespace cropr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cropr_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

const char* kTiny = R"({
  "model": {"image_side": 16, "patch_size": 4, "depth": 3, "width": 16, "heads": 2, "mlp_ratio": 2},
  "schedule": {"type": "per_block", "r": 3, "llf": true},
  "task": {"kind": "segmentation", "num_classes": 3, "train_size": 32, "test_size": 16, "min_rect": 4, "max_rect": 8},
  "fusion": {"kind": "llf"},
  "train": {"epochs": 1, "batch_size": 16, "precision": "f64"}
})";

std::string write_config(const TempDir& dir, const std::string& text = kTiny) {
  const std::string p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> data_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);)
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

int train_to(const TempDir& dir, const std::string& name, const std::vector<std::string>& overrides = {}) {
  TrainArgs t;
  t.config_path = write_config(dir);
  t.overrides = overrides;
  t.checkpoint_out = dir / (name + ".ckpt");
  t.metrics_out = dir / (name + ".csv");
  t.quiet = true;
  std::ostringstream sink;
  return cmd_train(t, sink);
}

}  // namespace

TEST_CASE("schedule command reproduces the golden schedules") {
  auto run = [](ScheduleArgs a) {
    std::ostringstream os;
    REQUIRE(cmd_schedule(a, os) == kExitOk);
    return os.str();
  };
  ScheduleArgs a;
  a.depth = 24;
  a.m0 = 196;
  a.r = 8;
  auto out = run(a);
  CHECK(out.find("final tokens 12") != std::string::npos);
  CHECK(out.find("TPR 94%") != std::string::npos);
  a.llf = true;
  out = run(a);
  CHECK(out.find("final tokens 20") != std::string::npos);
  CHECK(out.find("TPR 90%") != std::string::npos);
  ScheduleArgs st;
  st.stages = {{6, 50}, {12, 50}, {18, 50}};
  out = run(st);
  CHECK(out.find("final tokens 46") != std::string::npos);
  CHECK(out.find("TPR 77%") != std::string::npos);

  ScheduleArgs empty;
  empty.depth = 2;
  out = run(empty);
  // JSON line, table header, one row, summary, TPR.
  CHECK(data_lines(out).size() == 5);

  TempDir dir;
  ScheduleArgs js;
  js.depth = 12;
  js.m0 = 64;
  js.r = 4;
  js.cls = true;
  js.json_out = dir / "s.json";
  run(js);
  CHECK(schedule_from_json(nlohmann::json::parse(slurp(js.json_out))) == build_per_block(12, 64, 4, false, true));

  ScheduleArgs bad;
  bad.r = 9;
  std::ostringstream err;
  CHECK(run_guarded([&] { std::ostringstream o; return cmd_schedule(bad, o); }, err) == kExitConfig);
}

TEST_CASE("train, eval, fold, heatmap, export on a tiny segmentation model") {
  TempDir dir;
  REQUIRE(train_to(dir, "a") == kExitOk);
  const auto metrics = slurp(dir / "a.csv");
  CHECK(metrics.rfind("# cropr ", 0) == 0);
  auto rows = data_lines(metrics);
  REQUIRE(rows.size() == 2);  // header + one epoch

  // Bitwise determinism of the loss in f64.
  REQUIRE(train_to(dir, "b") == kExitOk);
  auto col = [](const std::string& row, int k) {
    std::istringstream is(row);
    std::string cell;
    for (int i = 0; i <= k; ++i) std::getline(is, cell, ',');
    return cell;
  };
  CHECK(col(rows[1], 3) == col(data_lines(slurp(dir / "b.csv"))[1], 3));
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  // Eval: selector and inversion are recorded.
  EvalArgs ev;
  ev.checkpoint = dir / "a.ckpt";
  ev.selector = "random";
  ev.invert = true;
  ev.csv_out = dir / "eval.csv";
  std::ostringstream sink;
  REQUIRE(cmd_eval(ev, sink) == kExitOk);
  auto eval_rows = data_lines(slurp(ev.csv_out));
  REQUIRE(eval_rows.size() == 2);
  CHECK(col(eval_rows[1], 2) == "random");
  CHECK(col(eval_rows[1], 3) == "1");

  // Fold: smaller file, same metrics as full routing.
  FoldArgs fo{dir / "a.ckpt", dir / "a.folded"};
  REQUIRE(cmd_fold(fo, sink) == kExitOk);
  CHECK(fs::file_size(fo.out) < fs::file_size(fo.checkpoint));
  EvalArgs full;
  full.checkpoint = dir / "a.ckpt";
  full.routing = "full";
  full.csv_out = dir / "full.csv";
  EvalArgs folded;
  folded.checkpoint = fo.out;
  folded.csv_out = dir / "folded.csv";
  REQUIRE(cmd_eval(full, sink) == kExitOk);
  REQUIRE(cmd_eval(folded, sink) == kExitOk);
  const auto fr = data_lines(slurp(full.csv_out))[1], gr = data_lines(slurp(folded.csv_out))[1];
  CHECK(std::stod(col(fr, 7)) == doctest::Approx(std::stod(col(gr, 7))).epsilon(1e-9));
  CHECK(std::stod(col(fr, 8)) == doctest::Approx(std::stod(col(gr, 8))).epsilon(1e-6));
  std::ostringstream err;
  CHECK(run_guarded([&] { FoldArgs again{fo.out, dir / "twice"}; return cmd_fold(again, sink); }, err) ==
        kExitConfig);

  // Heatmap: stage histogram equals the schedule's prune counts.
  HeatmapArgs hm;
  hm.checkpoint = dir / "a.ckpt";
  hm.pgm_out = dir / "h.pgm";
  hm.csv_out = dir / "h.csv";
  REQUIRE(cmd_heatmap(hm, sink) == kExitOk);
  std::map<std::string, int> hist;
  auto hrows = data_lines(slurp(hm.csv_out));
  for (std::size_t i = 1; i < hrows.size(); ++i) ++hist[col(hrows[i], 3)];
  CHECK(hist["1"] == 3);
  CHECK(hist["kept"] == 13);
  CHECK(hist.size() == 2);
  const auto pgm = slurp(hm.pgm_out);
  CHECK(pgm.rfind("P2\n", 0) == 0);

  // Export: M0 rows per image, stage tags agree with the heatmap.
  ExportArgs ex;
  ex.checkpoint = dir / "a.ckpt";
  ex.count = 3;
  ex.out = dir / "tok.bin";
  REQUIRE(cmd_export_tokens(ex, sink) == kExitOk);
  auto dump = read_token_dump(ex.out);
  CHECK(dump.images == 3);
  CHECK(dump.rows_per_image == 16);
  CHECK(dump.values.size() == static_cast<std::size_t>(3 * 16 * 16));
  for (Index i = 0; i < 16; ++i) {
    CHECK(dump.positions[static_cast<std::size_t>(i)] == i);
    const std::string tag = dump.stages[static_cast<std::size_t>(i)] == 0
                                ? "kept"
                                : std::to_string(dump.stages[static_cast<std::size_t>(i)]);
    CHECK(tag == col(hrows[static_cast<std::size_t>(i + 1)], 3));
  }
}

TEST_CASE("unpruned and R=0 checkpoints evaluate identically") {
  TempDir dir;
  REQUIRE(train_to(dir, "none", {"schedule.type=\"none\"", "schedule.llf=false", "fusion.kind=\"none\""}) == kExitOk);
  REQUIRE(train_to(dir, "zero", {"schedule.r=0", "schedule.llf=false", "fusion.kind=\"none\""}) == kExitOk);
  std::ostringstream sink;
  EvalArgs a, b;
  a.checkpoint = dir / "none.ckpt";
  a.csv_out = dir / "none_eval.csv";
  b.checkpoint = dir / "zero.ckpt";
  b.csv_out = dir / "zero_eval.csv";
  REQUIRE(cmd_eval(a, sink) == kExitOk);
  REQUIRE(cmd_eval(b, sink) == kExitOk);
  auto ra = data_lines(slurp(a.csv_out))[1], rb = data_lines(slurp(b.csv_out))[1];
  CHECK(ra.substr(ra.find(',')) == rb.substr(rb.find(',')));

  // Unpruned heatmap is uniform.
  HeatmapArgs hm;
  hm.checkpoint = a.checkpoint;
  hm.pgm_out = dir / "u.pgm";
  hm.csv_out = dir / "u.csv";
  REQUIRE(cmd_heatmap(hm, sink) == kExitOk);
  auto rows = data_lines(slurp(hm.csv_out));
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].substr(rows[i].rfind(',') + 1) == "kept");
}

TEST_CASE("MHA checkpoints refuse to fold") {
  TempDir dir;
  REQUIRE(train_to(dir, "mha", {"model.cropr.scorer=\"mha\""}) == kExitOk);
  std::ostringstream sink, err;
  FoldArgs fo{dir / "mha.ckpt", dir / "mha.folded"};
  CHECK(run_guarded([&] { return cmd_fold(fo, sink); }, err) == kExitConfig);
  CHECK(err.str().find("unsupported variant") != std::string::npos);
}

TEST_CASE("binary exit codes") {
  TempDir dir;
  const std::string bin = CROPR_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  CHECK(status(bin + " schedule --depth 24 --m0 196 --r 8") == 0);
  CHECK(status(bin + " schedule --depth 24 --m0 196 --r 9") == 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(status(bin + " train -c " + (dir / "broken.json") + " -o " + (dir / "x.ckpt")) == 2);
  CHECK(status(bin + " eval " + (dir / "missing.ckpt")) != 0);
  CHECK(status(bin + " --version") == 0);
}
