// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// cropr: train, evaluate, fold, benchmark and inspect pruned ViTs.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cropr/commands.hpp"

namespace {

std::vector<cropr::ScheduleEntry> parse_stages(const std::vector<std::string>& specs) {
  std::vector<cropr::ScheduleEntry> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw cropr::ConfigError("stage '" + s + "' is not block:r");
    try {
      out.push_back({std::stoll(s.substr(0, colon)), std::stoll(s.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw cropr::ConfigError("stage '" + s + "' is not block:r");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-attention token pruning for Vision Transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cropr::version_string());

  // Config and --set are shared by the config-driven commands; --seed is an
  // alias for --set train.seed=<n>.
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run-config");
    cmd->add_option("--set", overrides, "override section.key=value (repeatable)");
    cmd->add_option("--seed", seed, "shorthand for --set train.seed=N");
  };

  cropr::ScheduleArgs sched;
  std::vector<std::string> stage_specs;
  auto* c_sched = app.add_subcommand("schedule", "print a pruning schedule, its trajectory and div8 warnings");
  add_config(c_sched);
  c_sched->add_option("--depth", sched.depth, "number of blocks L");
  c_sched->add_option("--m0", sched.m0, "initial patch tokens");
  c_sched->add_option("--r", sched.r, "per-block prune count");
  c_sched->add_option("--stage", stage_specs, "staged entry block:r (repeatable)");
  c_sched->add_flag("--llf", sched.llf, "last layer fusion");
  c_sched->add_flag("--cls", sched.cls, "CLS token present");
  c_sched->add_flag("--div8", sched.prefer_div8, "warn on sequence lengths not divisible by 8");
  c_sched->add_option("--json", sched.json_out, "also write the schedule JSON here");

  cropr::TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model; writes a checkpoint and per-epoch metrics");
  add_config(c_train);
  c_train->add_option("-o,--out", tr.checkpoint_out, "checkpoint path");
  c_train->add_option("--metrics", tr.metrics_out, "metrics CSV path");
  c_train->add_flag("-q,--quiet", tr.quiet, "no per-epoch progress");

  cropr::EvalArgs ev;
  std::string ev_selector;
  bool ev_invert = false;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint; writes a metrics CSV");
  c_eval->add_option("checkpoint", ev.checkpoint, "checkpoint path")->required();
  c_eval->add_option("--dataset", ev.dataset, "exported dataset (default: the config's test split)");
  auto* sel_opt = c_eval->add_option("--selector", ev_selector, "cropr|random|variance|attn_cls|attn_avg");
  auto* inv_opt = c_eval->add_flag("--invert", ev_invert, "non-salient: prune the highest scores");
  c_eval->add_option("--routing", ev.routing, "folded|full");
  c_eval->add_option("-o,--out", ev.csv_out, "CSV path (default stdout)");
  c_eval->add_option("--workers", ev.workers, "evaluation threads");
  c_eval->add_option("--seed", ev.seed, "seed of the random selector");

  cropr::FoldArgs fo;
  auto* c_fold = app.add_subcommand("fold", "drop aggregators and aux heads; keep one summed query per module");
  c_fold->add_option("checkpoint", fo.checkpoint, "training checkpoint")->required();
  c_fold->add_option("-o,--out", fo.out, "folded checkpoint path")->required();

  cropr::BenchArgs be;
  auto* c_bench = app.add_subcommand("bench", "throughput of pruned vs unpruned models and the router microbenchmark");
  add_config(c_bench);
  c_bench->add_option("-o,--out", be.csv_out, "CSV path (default stdout)");
  c_bench->add_flag("--router-only", be.router_only, "only the router microbenchmark");

  cropr::HeatmapArgs hm;
  auto* c_heat = app.add_subcommand("heatmap", "per-patch prune stage of one image as PGM and CSV");
  c_heat->add_option("checkpoint", hm.checkpoint, "checkpoint path")->required();
  c_heat->add_option("--index", hm.index, "sample index in the test split or dataset");
  c_heat->add_option("--dataset", hm.dataset, "exported dataset");
  c_heat->add_option("--pgm", hm.pgm_out, "PGM output");
  c_heat->add_option("--csv", hm.csv_out, "CSV output");

  cropr::ExportArgs ex;
  auto* c_export = app.add_subcommand("export-tokens", "dump pre-head tokens with prune-stage tags");
  c_export->add_option("checkpoint", ex.checkpoint, "checkpoint path")->required();
  c_export->add_option("--dataset", ex.dataset, "exported dataset");
  c_export->add_option("--count", ex.count, "number of images");
  c_export->add_option("-o,--out", ex.out, "dump path");

  cropr::ExportDataArgs ed;
  auto* c_data = app.add_subcommand("export-data", "write a synthetic dataset split to disk");
  add_config(c_data);
  c_data->add_option("--split", ed.split, "train|test");
  c_data->add_option("-o,--out", ed.out, "dataset path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cropr::kExitConfig;
  }
  if (seed >= 0) overrides.push_back("train.seed=" + std::to_string(seed));

  return cropr::run_guarded(
      [&]() -> int {
        if (*c_sched) {
          sched.config_path = config_path;
          sched.overrides = overrides;
          sched.stages = parse_stages(stage_specs);
          return cropr::cmd_schedule(sched, std::cout);
        }
        if (*c_train) {
          tr.config_path = config_path;
          tr.overrides = overrides;
          return cropr::cmd_train(tr, std::cout);
        }
        if (*c_eval) {
          if (*sel_opt) ev.selector = ev_selector;
          if (*inv_opt) ev.invert = ev_invert;
          return cropr::cmd_eval(ev, std::cout);
        }
        if (*c_fold) return cropr::cmd_fold(fo, std::cout);
        if (*c_bench) {
          be.config_path = config_path;
          be.overrides = overrides;
          return cropr::cmd_bench(be, std::cout);
        }
        if (*c_heat) return cropr::cmd_heatmap(hm, std::cout);
        if (*c_export) return cropr::cmd_export_tokens(ex, std::cout);
        if (*c_data) {
          ed.config_path = config_path;
          ed.overrides = overrides;
          return cropr::cmd_export_data(ed, std::cout);
        }
        return cropr::kExitConfig;
      },
      std::cerr);
}
