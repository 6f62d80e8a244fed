// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/commands.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cropr/bench.hpp"
#include "cropr/checkpoint.hpp"
#include "cropr/flops.hpp"
#include "cropr/train.hpp"

namespace cropr {
namespace {

using nlohmann::json;

/// Non-finite losses or failed validation during a command.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename F>
int with_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f.template operator()<float>();
  if (precision == "f64") return f.template operator()<double>();
  throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  return os;
}

json checkpoint_meta(const json& config_json, const std::string& precision, bool folded) {
  return {{"format", "cropr-checkpoint"},
          {"version", version_string()},
          {"config", config_json},
          {"config_hash", config_hash(config_json)},
          {"precision", precision},
          {"folded", folded}};
}

struct LoadedMeta {
  json meta;
  json config_json;
  RunConfig config;
  std::string precision;
};

LoadedMeta load_meta(const std::string& path) {
  LoadedMeta m;
  m.meta = read_checkpoint_meta(path);
  if (!m.meta.contains("config")) throw FormatError("checkpoint has no run config");
  m.config_json = m.meta.at("config");
  m.config = run_config_from_json(m.config_json);
  m.precision = m.meta.value("precision", std::string("f64"));
  return m;
}

LabeledImages eval_data(const RunConfig& config, const std::string& dataset, std::vector<int>* patch_labels) {
  LabeledImages data;
  if (dataset.empty()) {
    const TaskSpec task = config.resolved_task();
    data = generate_task(task, task.test_size, task.data_seed + 1000003);
  } else {
    std::ifstream is(dataset, std::ios::binary);
    if (!is) throw ConfigError("cannot open dataset '" + dataset + "'");
    data = read_dataset(is);
  }
  if (config.task.kind == TaskKind::Segmentation) *patch_labels = patch_label_vector(data, config.model.patch_size);
  return data;
}

std::string stage_name(Index stage) { return stage == 0 ? "kept" : std::to_string(stage); }

}  // namespace

int run_guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UnsupportedVariantError& e) {
    err << "unsupported variant: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "validation failure: " << e.what() << '\n';
    return kExitNumeric;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides, json* resolved_json) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  j = apply_overrides(std::move(j), overrides);
  RunConfig c = run_config_from_json(j);
  c.validate();
  if (resolved_json != nullptr) *resolved_json = to_json(c);
  return c;
}

std::string provenance_comment(const json& config_json) {
  return "# cropr " + version_string() + " config_hash=" + config_hash(config_json) + "\n";
}

int cmd_schedule(const ScheduleArgs& args, std::ostream& out) {
  PruningSchedule s;
  if (!args.config_path.empty() || !args.overrides.empty()) {
    s = load_run_config(args.config_path, args.overrides).resolved_schedule();
  } else if (!args.stages.empty()) {
    s = build_staged(args.depth, args.stages, args.m0, args.llf, args.cls);
  } else {
    s = build_per_block(args.depth, args.m0, args.r, args.llf, args.cls);
  }
  s.prefer_div8 = s.prefer_div8 || args.prefer_div8;
  const json j = to_json(s);
  out << j.dump() << '\n' << trajectory_table(s);
  char line[64];
  std::snprintf(line, sizeof line, "TPR %d%%\n", tpr_percent(s));
  out << line;
  for (const auto& w : validate_div8(s)) out << "warning: " << w << '\n';
  if (!args.json_out.empty()) {
    auto os = open_out(args.json_out);
    os << j.dump(2) << '\n';
  }
  return kExitOk;
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
  json cj;
  const RunConfig config = load_run_config(args.config_path, args.overrides, &cj);
  return with_precision(config.train.precision, [&]<typename S>() {
    const Datasets data = make_datasets(config);
    ParameterStore<S> store;
    Rng init_rng(config.train.seed);
    PrunedViT<S> model(config, store, init_rng);
    if (!config.train.init_from.empty()) {
      const auto init = load_checkpoint<S>(config.train.init_from);
      const Index copied = copy_matching(init, store);
      if (!args.quiet) out << "initialised " << copied << " tensors from " << config.train.init_from << '\n';
    }
    auto metrics = open_out(args.metrics_out);
    metrics << provenance_comment(cj) << kMetricsCsvHeader << '\n';
    train(config, model, store, data, [&](const EpochRecord& r) {
      write_metrics_row(metrics, r);
      metrics.flush();
      if (!args.quiet) {
        out << "epoch " << r.epoch << " loss " << r.main_loss << " train " << r.train_metric << " test "
            << r.test_metric;
        if (r.test_recall >= 0) out << " recall " << r.test_recall;
        out << " (" << r.seconds << " s)\n";
      }
      if (!std::isfinite(r.main_loss)) throw NumericError("loss became non-finite at epoch " + std::to_string(r.epoch));
    });
    save_checkpoint(args.checkpoint_out, store, checkpoint_meta(cj, config.train.precision, false));
    return kExitOk;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  LoadedMeta m = load_meta(args.checkpoint);
  RunConfig config = m.config;
  if (args.selector) config.selector = selector_mode_from(*args.selector);
  if (args.invert) config.invert_selector = *args.invert;
  config.validate();
  if (args.routing != "folded" && args.routing != "full") throw ConfigError("routing must be folded or full");
  const json cj = to_json(config);
  return with_precision(m.precision, [&]<typename S>() {
    const auto store = load_checkpoint<S>(args.checkpoint);
    PrunedViT<S> model(config, store);
    std::vector<int> patch_labels;
    const auto data = eval_data(config, args.dataset, &patch_labels);
    EvalOptions eo;
    eo.workers = args.workers;
    eo.seed = args.seed;
    eo.routing = args.routing == "full" ? Routing::Full : Routing::Folded;
    const auto acc = evaluate(model, data, patch_labels, eo);
    std::ostringstream csv;
    csv.precision(10);
    csv << provenance_comment(cj) << "checkpoint,task,selector,invert,fusion,routing,samples,metric,loss,recall\n"
        << args.checkpoint << ',' << to_string(config.task.kind) << ',' << to_string(config.selector) << ','
        << (config.invert_selector ? 1 : 0) << ',' << to_string(config.fusion) << ',' << args.routing << ','
        << acc.samples << ',' << acc.metric() << ',' << acc.mean_loss() << ',' << acc.recall() << '\n';
    if (args.csv_out.empty()) {
      out << csv.str();
    } else {
      auto os = open_out(args.csv_out);
      os << csv.str();
    }
    if (!std::isfinite(acc.mean_loss())) throw NumericError("evaluation loss is not finite");
    return kExitOk;
  });
}

int cmd_fold(const FoldArgs& args, std::ostream& out) {
  LoadedMeta m = load_meta(args.checkpoint);
  if (m.meta.value("folded", false)) throw ConfigError("checkpoint is already folded");
  return with_precision(m.precision, [&]<typename S>() {
    const auto store = load_checkpoint<S>(args.checkpoint);
    const auto folded = fold_store(m.config, store);
    save_checkpoint(args.out, folded, checkpoint_meta(m.config_json, m.precision, true));
    out << "folded " << store.parameter_count() << " -> " << folded.parameter_count() << " parameters\n";
    return kExitOk;
  });
}

int cmd_bench(const BenchArgs& args, std::ostream& out) {
  json cj;
  const RunConfig config = load_run_config(args.config_path, args.overrides, &cj);
  std::vector<BenchRow> rows;
  BenchOptions bo{config.bench.warmup, config.bench.repetitions};
  if (!args.router_only) {
    RunConfig unpruned = config;
    unpruned.schedule = ScheduleSpec{};
    unpruned.fusion = FusionMode::None;
    const bool dense = config.task.kind == TaskKind::Segmentation;
    const CostModel cost = CostModel::from(config.resolved_model(), dense);
    const double gf_pruned = flops(cost, config.resolved_schedule()).total / 1e9;
    const double gf_unpruned = flops(cost, unpruned.resolved_schedule()).total / 1e9;
    for (const auto& precision : config.bench.precisions) {
      with_precision(precision, [&]<typename S>() {
        for (const auto& [name, cfg, gf] : {std::tuple{std::string("unpruned"), unpruned, gf_unpruned},
                                            std::tuple{std::string("pruned"), config, gf_pruned}}) {
          ParameterStore<S> store;
          Rng rng(config.train.seed);
          PrunedViT<S> model(cfg, store, rng);
          for (Index batch : config.bench.batch_sizes) {
            const auto data = generate_task(cfg.resolved_task(), batch, 7);
            Rng eval_rng(1);
            auto fn = [&] {
              NoGradGuard no_grad;
              ForwardOptions fo;
              fo.rng = &eval_rng;
              model.forward(data.images, fo);
            };
            auto row = bench(name, batch, precision, fn, bo);
            row.gflops = gf;
            rows.push_back(row);
          }
        }
        return 0;
      });
    }
  }
  const Index M = config.bench.router_tokens, D = config.bench.router_width;
  const auto router = router_microbench(M, D, M / 4, config.train.seed, BenchOptions{5, 200});
  rows.insert(rows.end(), router.rows.begin(), router.rows.end());
  std::ostringstream csv;
  csv << provenance_comment(cj) << "# flops convention: multiply-add = 2 FLOPs\n";
  write_bench_csv(csv, rows);
  if (args.csv_out.empty()) {
    out << csv.str();
  } else {
    auto os = open_out(args.csv_out);
    os << csv.str();
  }
  if (!args.router_only) {
    for (const auto& precision : config.bench.precisions) {
      const auto u = best_over_batches(rows, "unpruned", precision);
      const auto p = best_over_batches(rows, "pruned", precision);
      out << "# best " << precision << ": unpruned " << u.imgs_per_sec << " img/s (batch " << u.batch
          << "), pruned " << p.imgs_per_sec << " img/s (batch " << p.batch << ")\n";
    }
  }
  out << "# router M=" << M << " D=" << D << ": folded " << router.folded_ms << " ms, random " << router.random_ms
      << " ms, ratio " << router.ratio() << '\n';
  return kExitOk;
}

int cmd_heatmap(const HeatmapArgs& args, std::ostream& out) {
  LoadedMeta m = load_meta(args.checkpoint);
  const RunConfig& config = m.config;
  return with_precision(m.precision, [&]<typename S>() {
    const auto store = load_checkpoint<S>(args.checkpoint);
    PrunedViT<S> model(config, store);
    std::vector<int> patch_labels;
    const auto data = eval_data(config, args.dataset, &patch_labels);
    if (args.index < 0 || args.index >= data.size()) throw ConfigError("sample index out of range");
    NoGradGuard no_grad;
    Rng rng(0);
    ForwardOptions fo;
    fo.rng = &rng;
    const auto fw = model.forward(data.slice(args.index, 1).images, fo);
    const Index L = config.model.depth, g = config.model.grid_side(), p = config.model.patch_size;
    const Index side = g * p;
    const std::string prov = provenance_comment(m.config_json);
    {
      auto os = open_out(args.pgm_out);
      os << "P2\n" << prov << "# value v in 1..L: pruned after block v; v = L+1: kept to the end; L=" << L << '\n'
         << side << ' ' << side << '\n'
         << L + 1 << '\n';
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          const Index s = fw.stage_map(0, (y / p) * g + x / p);
          os << (s == 0 ? L + 1 : s) << (x + 1 < side ? ' ' : '\n');
        }
      }
    }
    {
      auto os = open_out(args.csv_out);
      os << prov << "row,col,position,stage\n";
      for (Index i = 0; i < g * g; ++i) {
        os << i / g << ',' << i % g << ',' << i << ',' << stage_name(fw.stage_map(0, i)) << '\n';
      }
    }
    out << "wrote " << args.pgm_out << " and " << args.csv_out << '\n';
    return kExitOk;
  });
}

int cmd_export_tokens(const ExportArgs& args, std::ostream& out) {
  LoadedMeta m = load_meta(args.checkpoint);
  const RunConfig& config = m.config;
  return with_precision(m.precision, [&]<typename S>() {
    const auto store = load_checkpoint<S>(args.checkpoint);
    PrunedViT<S> model(config, store);
    std::vector<int> patch_labels;
    const auto data = eval_data(config, args.dataset, &patch_labels);
    const Index count = std::min(args.count, data.size());
    const Index M0 = config.model.num_patches(), D = config.model.width;
    auto os = open_out(args.out);
    const json header = {{"format", "cropr-tokens"},
                         {"version", version_string()},
                         {"config_hash", config_hash(m.config_json)},
                         {"images", count},
                         {"rows_per_image", M0},
                         {"width", D},
                         {"dtype", "f64"}};
    os << "CROPRTOK1\n" << header.dump() << '\n';
    NoGradGuard no_grad;
    for (Index b = 0; b < count; ++b) {
      Rng rng(static_cast<std::uint64_t>(b));
      ForwardOptions fo;
      fo.rng = &rng;
      fo.keep_fused_tokens = true;
      const auto fw = model.forward(data.slice(b, 1).images, fo);
      const auto& t = fw.pre_head;
      const Index offset = t.cls_present ? 1 : 0;
      if (t.length() - offset != M0) throw FusionError("pre-head tokens do not cover the grid");
      const auto values = t.tokens.matrix();
      std::vector<std::int64_t> pos(static_cast<std::size_t>(M0));
      std::vector<std::int32_t> stage(static_cast<std::size_t>(M0));
      std::vector<double> vals(static_cast<std::size_t>(M0 * D));
      for (Index i = 0; i < M0; ++i) {
        pos[static_cast<std::size_t>(i)] = t.positions(0, i + offset);
        stage[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(fw.stage_map(0, t.positions(0, i + offset)));
        for (Index d = 0; d < D; ++d) vals[static_cast<std::size_t>(i * D + d)] = static_cast<double>(values(i + offset, d));
      }
      os.write(reinterpret_cast<const char*>(pos.data()), static_cast<std::streamsize>(pos.size() * 8));
      os.write(reinterpret_cast<const char*>(stage.data()), static_cast<std::streamsize>(stage.size() * 4));
      os.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(vals.size() * 8));
    }
    out << "wrote " << count << " x " << M0 << " tokens to " << args.out << '\n';
    return kExitOk;
  });
}

TokenDump read_token_dump(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open token dump '" + path + "'");
  std::string magic, line;
  std::getline(is, magic);
  if (magic != "CROPRTOK1") throw FormatError("not a token dump");
  std::getline(is, line);
  TokenDump d;
  d.header = json::parse(line);
  d.images = d.header.at("images");
  d.rows_per_image = d.header.at("rows_per_image");
  d.width = d.header.at("width");
  const auto rows = static_cast<std::size_t>(d.rows_per_image);
  const auto w = static_cast<std::size_t>(d.width);
  for (Index b = 0; b < d.images; ++b) {
    std::vector<std::int64_t> pos(rows);
    std::vector<std::int32_t> stage(rows);
    std::vector<double> vals(rows * w);
    is.read(reinterpret_cast<char*>(pos.data()), static_cast<std::streamsize>(rows * 8));
    is.read(reinterpret_cast<char*>(stage.data()), static_cast<std::streamsize>(rows * 4));
    is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(rows * w * 8));
    if (!is) throw FormatError("token dump truncated");
    d.positions.insert(d.positions.end(), pos.begin(), pos.end());
    d.stages.insert(d.stages.end(), stage.begin(), stage.end());
    d.values.insert(d.values.end(), vals.begin(), vals.end());
  }
  return d;
}

int cmd_export_data(const ExportDataArgs& args, std::ostream& out) {
  json cj;
  const RunConfig config = load_run_config(args.config_path, args.overrides, &cj);
  const TaskSpec task = config.resolved_task();
  if (args.split != "train" && args.split != "test") throw ConfigError("split must be train or test");
  const bool test = args.split == "test";
  const auto data = generate_task(task, test ? task.test_size : task.train_size,
                                  test ? task.data_seed + 1000003 : task.data_seed);
  auto os = open_out(args.out);
  write_dataset(os, data, to_string(task.kind), task.num_classes, config.model.patch_size,
                json{{"config_hash", config_hash(cj)}, {"version", version_string()}, {"split", args.split}}.dump());
  out << "wrote " << data.size() << " samples to " << args.out << '\n';
  return kExitOk;
}

}  // namespace cropr
