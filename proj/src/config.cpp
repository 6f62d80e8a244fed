// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/config.hpp"

#include <cstdio>

namespace cropr {
namespace {

using nlohmann::json;

template <typename E>
struct Names;
template <>
struct Names<TaskKind> {
  static constexpr std::pair<TaskKind, const char*> table[] = {
      {TaskKind::Needle, "needle"}, {TaskKind::Segmentation, "segmentation"}, {TaskKind::MultiLabel, "multilabel"}};
};
template <>
struct Names<SelectorMode> {
  static constexpr std::pair<SelectorMode, const char*> table[] = {{SelectorMode::Cropr, "cropr"},
                                                                  {SelectorMode::Random, "random"},
                                                                  {SelectorMode::Variance, "variance"},
                                                                  {SelectorMode::AttnCls, "attn_cls"},
                                                                  {SelectorMode::AttnAvg, "attn_avg"}};
};
template <>
struct Names<FusionMode> {
  static constexpr std::pair<FusionMode, const char*> table[] = {{FusionMode::None, "none"},
                                                                {FusionMode::Llf, "llf"},
                                                                {FusionMode::TokenConcat, "token_concat"},
                                                                {FusionMode::CrossAttn, "cross_attn"},
                                                                {FusionMode::CrossAttnConcat, "cross_attn_concat"},
                                                                {FusionMode::MhsaConcat, "mhsa_concat"},
                                                                {FusionMode::Dtop, "dtop"}};
};

template <typename E>
std::string name_of(E e) {
  for (const auto& [v, n] : Names<E>::table)
    if (v == e) return n;
  throw ConfigError("unnamed enum value");
}

template <typename E>
E parse_name(const std::string& s, const char* what) {
  for (const auto& [v, n] : Names<E>::table)
    if (s == n) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

json section(const json& j, const char* name) { return j.contains(name) ? j.at(name) : json::object(); }

std::vector<ScheduleEntry> entries_from(const json& j) {
  std::vector<ScheduleEntry> out;
  for (const auto& e : j) out.push_back({e.at("block").get<Index>(), e.at("r").get<Index>()});
  return out;
}

json entries_to(const std::vector<ScheduleEntry>& entries) {
  json out = json::array();
  for (const auto& e : entries) out.push_back({{"block", e.block}, {"r", e.r}});
  return out;
}

}  // namespace

std::string to_string(TaskKind k) { return name_of(k); }
std::string to_string(SelectorMode k) { return name_of(k); }
std::string to_string(FusionMode k) { return name_of(k); }
TaskKind task_kind_from(const std::string& s) { return parse_name<TaskKind>(s, "task"); }
SelectorMode selector_mode_from(const std::string& s) { return parse_name<SelectorMode>(s, "selector"); }
FusionMode fusion_mode_from(const std::string& s) { return parse_name<FusionMode>(s, "fusion"); }

ViTConfig RunConfig::resolved_model() const {
  ViTConfig m = model;
  m.num_classes = task.num_classes;
  if (m.droppath_rates.empty() && train.droppath > 0.0) m.droppath_rates = ViTConfig::linear_droppath(m.depth, train.droppath);
  return m;
}

TaskSpec RunConfig::resolved_task() const {
  TaskSpec t = task;
  t.needle.num_classes = t.num_classes;
  t.needle.image_side = model.image_side;
  t.needle.patch_size = model.patch_size;
  t.needle.channels = model.channels;
  t.segmentation.num_classes = t.num_classes;
  t.segmentation.image_side = model.image_side;
  t.segmentation.channels = model.channels;
  t.multilabel.num_classes = t.num_classes;
  t.multilabel.image_side = model.image_side;
  t.multilabel.patch_size = model.patch_size;
  t.multilabel.channels = model.channels;
  return t;
}

PruningSchedule RunConfig::resolved_schedule() const {
  const Index L = model.depth, m0 = model.num_patches();
  const bool cls = model.cls_token, llf = schedule.llf;
  PruningSchedule s;
  if (schedule.type == "none") {
    s = build_per_block(L, m0, 0, llf, cls);
  } else if (schedule.type == "per_block") {
    s = build_per_block(L, m0, schedule.r, llf, cls);
  } else if (schedule.type == "staged" || schedule.type == "explicit") {
    s = build_staged(L, schedule.entries, m0, llf, cls);
  } else {
    throw ConfigError("unknown schedule type '" + schedule.type + "'");
  }
  s.prefer_div8 = schedule.prefer_div8;
  s.curriculum = schedule.curriculum;
  s.validate();
  if (s.curriculum.enabled) {
    // Every epoch's schedule must be valid, the largest R being the binding one.
    PruningSchedule peak = s;
    const Index r = std::max(s.curriculum.start_r, s.curriculum.final_r);
    for (auto& e : peak.entries) e.r = r;
    peak.validate();
  }
  return s;
}

void RunConfig::validate() const {
  resolved_model().validate();
  const auto s = resolved_schedule();
  const bool pruning = !s.entries.empty();
  if ((fusion == FusionMode::Llf) != s.llf) {
    throw ConfigError("the schedule's llf flag must be set exactly when fusion is llf");
  }
  if (task.kind == TaskKind::Segmentation && pruning && fusion == FusionMode::None) {
    throw ConfigError("dense prediction with pruning needs a fusion mode");
  }
  if (task.kind != TaskKind::Segmentation &&
      (fusion == FusionMode::CrossAttn || fusion == FusionMode::CrossAttnConcat || fusion == FusionMode::Dtop)) {
    throw ConfigError("fusion '" + to_string(fusion) + "' is defined for dense prediction only");
  }
  if (fusion == FusionMode::Dtop && selector != SelectorMode::Cropr) {
    throw ConfigError("dtop fusion needs the auxiliary heads of the pruning modules");
  }
  if ((selector == SelectorMode::AttnCls || model.pooling == Pooling::Cls) && !model.cls_token) {
    throw ConfigError("CLS attention scores and CLS pooling need a CLS token");
  }
  if (variant.scorer == ScorerKind::Mha && (variant.mha_heads <= 0 || model.width % variant.mha_heads != 0)) {
    throw ConfigError("MHA scorer heads must divide the width");
  }
  if (train.epochs < 0 || train.batch_size <= 0) throw ConfigError("epochs must be >= 0 and batch_size > 0");
  if (train.precision != "f64" && train.precision != "f32") throw ConfigError("precision must be f32 or f64");
  if (train.droppath < 0.0 || train.droppath >= 1.0) throw ConfigError("droppath must lie in [0, 1)");
  if (task.train_size <= 0 || task.test_size <= 0) throw ConfigError("dataset sizes must be positive");
  if (train.eval_workers < 1) throw ConfigError("eval_workers must be >= 1");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    const json m = section(j, "model");
    c.model.image_side = m.value("image_side", c.model.image_side);
    c.model.patch_size = m.value("patch_size", c.model.patch_size);
    c.model.channels = m.value("channels", c.model.channels);
    c.model.depth = m.value("depth", c.model.depth);
    c.model.width = m.value("width", c.model.width);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
    c.model.cls_token = m.value("cls_token", c.model.cls_token);
    c.model.pooling = m.value("pooling", std::string("avg")) == "cls" ? Pooling::Cls : Pooling::Avg;
    if (m.contains("droppath_rates")) c.model.droppath_rates = m.at("droppath_rates").get<std::vector<double>>();
    const json cr = section(m, "cropr");
    c.cropr_mlp_ratio = cr.value("mlp_ratio", c.cropr_mlp_ratio);
    c.variant.scorer = cr.value("scorer", std::string("simple")) == "mha" ? ScorerKind::Mha : ScorerKind::Simple;
    c.variant.selector = cr.value("selector", std::string("topk")) == "sampling" ? SelectorKind::Sampling : SelectorKind::TopK;
    c.variant.aggregator_mlp = cr.value("aggregator_mlp", c.variant.aggregator_mlp);
    c.variant.stop_gradient = cr.value("stop_gradient", c.variant.stop_gradient);
    c.variant.mha_heads = cr.value("mha_heads", c.variant.mha_heads);

    const json s = section(j, "schedule");
    c.schedule.type = s.value("type", c.schedule.type);
    c.schedule.r = s.value("r", c.schedule.r);
    if (s.contains("entries")) c.schedule.entries = entries_from(s.at("entries"));
    c.schedule.llf = s.value("llf", c.schedule.llf);
    c.schedule.prefer_div8 = s.value("prefer_div8", c.schedule.prefer_div8);
    const json cu = section(s, "curriculum");
    c.schedule.curriculum.enabled = cu.value("enabled", false);
    c.schedule.curriculum.start_r = cu.value("start_r", Index{1});
    c.schedule.curriculum.final_r = cu.value("final_r", Index{1});
    c.schedule.curriculum.warmup_epochs = cu.value("warmup_epochs", Index{1});

    const json t = section(j, "task");
    c.task.kind = task_kind_from(t.value("kind", std::string("needle")));
    c.task.num_classes = t.value("num_classes", c.task.num_classes);
    c.task.train_size = t.value("train_size", c.task.train_size);
    c.task.test_size = t.value("test_size", c.task.test_size);
    c.task.data_seed = t.value("data_seed", c.task.data_seed);
    c.task.needle.num_informative = t.value("num_informative", c.task.needle.num_informative);
    c.task.needle.num_distractors = t.value("num_distractors", c.task.needle.num_distractors);
    c.task.needle.background_std = t.value("background_std", c.task.needle.background_std);
    c.task.needle.signal_noise_std = t.value("signal_noise_std", c.task.needle.signal_noise_std);
    c.task.segmentation.max_rects = t.value("max_rects", c.task.segmentation.max_rects);
    c.task.segmentation.min_rect = t.value("min_rect", c.task.segmentation.min_rect);
    c.task.segmentation.max_rect = t.value("max_rect", c.task.segmentation.max_rect);
    c.task.segmentation.texture_std = t.value("texture_std", c.task.segmentation.texture_std);
    c.task.multilabel.presence = t.value("presence", c.task.multilabel.presence);

    const json sel = section(j, "selector");
    c.selector = selector_mode_from(sel.value("kind", std::string("cropr")));
    c.invert_selector = sel.value("invert", false);
    c.fusion = fusion_mode_from(section(j, "fusion").value("kind", std::string("none")));

    const json tr = section(j, "train");
    c.train.epochs = tr.value("epochs", c.train.epochs);
    c.train.batch_size = tr.value("batch_size", c.train.batch_size);
    c.train.lr = tr.value("lr", c.train.lr);
    c.train.min_lr = tr.value("min_lr", c.train.min_lr);
    c.train.weight_decay = tr.value("weight_decay", c.train.weight_decay);
    c.train.warmup_epochs = tr.value("warmup_epochs", c.train.warmup_epochs);
    c.train.droppath = tr.value("droppath", c.train.droppath);
    c.train.grad_clip = tr.value("grad_clip", c.train.grad_clip);
    c.train.seed = tr.value("seed", c.train.seed);
    c.train.precision = tr.value("precision", c.train.precision);
    c.train.eval_workers = tr.value("eval_workers", c.train.eval_workers);
    c.train.init_from = tr.value("init_from", c.train.init_from);

    const json b = section(j, "bench");
    if (b.contains("batch_sizes")) c.bench.batch_sizes = b.at("batch_sizes").get<std::vector<Index>>();
    c.bench.warmup = b.value("warmup", c.bench.warmup);
    c.bench.repetitions = b.value("repetitions", c.bench.repetitions);
    if (b.contains("precisions")) c.bench.precisions = b.at("precisions").get<std::vector<std::string>>();
    c.bench.router_tokens = b.value("router_tokens", c.bench.router_tokens);
    c.bench.router_width = b.value("router_width", c.bench.router_width);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

json to_json(const RunConfig& c) {
  json model = {{"image_side", c.model.image_side},
                {"patch_size", c.model.patch_size},
                {"channels", c.model.channels},
                {"depth", c.model.depth},
                {"width", c.model.width},
                {"heads", c.model.heads},
                {"mlp_ratio", c.model.mlp_ratio},
                {"cls_token", c.model.cls_token},
                {"pooling", c.model.pooling == Pooling::Cls ? "cls" : "avg"},
                {"cropr",
                 {{"mlp_ratio", c.cropr_mlp_ratio},
                  {"scorer", c.variant.scorer == ScorerKind::Mha ? "mha" : "simple"},
                  {"selector", c.variant.selector == SelectorKind::Sampling ? "sampling" : "topk"},
                  {"aggregator_mlp", c.variant.aggregator_mlp},
                  {"stop_gradient", c.variant.stop_gradient},
                  {"mha_heads", c.variant.mha_heads}}}};
  if (!c.model.droppath_rates.empty()) model["droppath_rates"] = c.model.droppath_rates;
  json schedule = {{"type", c.schedule.type},
                   {"r", c.schedule.r},
                   {"entries", entries_to(c.schedule.entries)},
                   {"llf", c.schedule.llf},
                   {"prefer_div8", c.schedule.prefer_div8},
                   {"curriculum",
                    {{"enabled", c.schedule.curriculum.enabled},
                     {"start_r", c.schedule.curriculum.start_r},
                     {"final_r", c.schedule.curriculum.final_r},
                     {"warmup_epochs", c.schedule.curriculum.warmup_epochs}}}};
  json task = {{"kind", to_string(c.task.kind)},
               {"num_classes", c.task.num_classes},
               {"train_size", c.task.train_size},
               {"test_size", c.task.test_size},
               {"data_seed", c.task.data_seed},
               {"num_informative", c.task.needle.num_informative},
               {"num_distractors", c.task.needle.num_distractors},
               {"background_std", c.task.needle.background_std},
               {"signal_noise_std", c.task.needle.signal_noise_std},
               {"max_rects", c.task.segmentation.max_rects},
               {"min_rect", c.task.segmentation.min_rect},
               {"max_rect", c.task.segmentation.max_rect},
               {"texture_std", c.task.segmentation.texture_std},
               {"presence", c.task.multilabel.presence}};
  json train = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"min_lr", c.train.min_lr},
                {"weight_decay", c.train.weight_decay},
                {"warmup_epochs", c.train.warmup_epochs},
                {"droppath", c.train.droppath},
                {"grad_clip", c.train.grad_clip},
                {"seed", c.train.seed},
                {"precision", c.train.precision},
                {"eval_workers", c.train.eval_workers},
                {"init_from", c.train.init_from}};
  json bench = {{"batch_sizes", c.bench.batch_sizes},
                {"warmup", c.bench.warmup},
                {"repetitions", c.bench.repetitions},
                {"precisions", c.bench.precisions},
                {"router_tokens", c.bench.router_tokens},
                {"router_width", c.bench.router_width}};
  return {{"model", model},
          {"schedule", schedule},
          {"task", task},
          {"selector", {{"kind", to_string(c.selector)}, {"invert", c.invert_selector}}},
          {"fusion", {{"kind", to_string(c.fusion)}}},
          {"train", train},
          {"bench", bench}};
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json::json_pointer ptr("/" + [&] {
      std::string p = key;
      for (auto& ch : p)
        if (ch == '.') ch = '/';
      return p;
    }());
    j[ptr] = value;
  }
  return j;
}

std::string config_hash(const json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string version_string() { return std::string(CROPR_VERSION) + "+" + CROPR_GIT_DESCRIBE; }

}  // namespace cropr
