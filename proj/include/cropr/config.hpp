// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON run-config with sections {model, schedule, task, selector, fusion,
// train, bench}. Missing keys take the defaults below. The schedule section
// is expanded against the model (depth, patch count, CLS) when resolved.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropr/cropr_module.hpp"
#include "cropr/schedule.hpp"
#include "cropr/synth.hpp"
#include "cropr/vit.hpp"

namespace cropr {

enum class TaskKind { Needle, Segmentation, MultiLabel };
enum class SelectorMode { Cropr, Random, Variance, AttnCls, AttnAvg };
enum class FusionMode { None, Llf, TokenConcat, CrossAttn, CrossAttnConcat, MhsaConcat, Dtop };

std::string to_string(TaskKind k);
std::string to_string(SelectorMode k);
std::string to_string(FusionMode k);
TaskKind task_kind_from(const std::string& s);
SelectorMode selector_mode_from(const std::string& s);
FusionMode fusion_mode_from(const std::string& s);

struct ScheduleSpec {
  std::string type = "none";  // none | per_block | staged | explicit
  Index r = 0;                // per_block
  std::vector<ScheduleEntry> entries;  // staged | explicit
  bool llf = false;
  bool prefer_div8 = false;
  Curriculum curriculum;
};

struct TaskSpec {
  TaskKind kind = TaskKind::Needle;
  Index num_classes = 4;
  Index train_size = 2048;
  Index test_size = 512;
  std::uint64_t data_seed = 1;
  NeedleConfig needle;
  SegmentationConfig segmentation;
  MultiLabelConfig multilabel;
};

struct TrainSpec {
  Index epochs = 10;
  Index batch_size = 32;
  double lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  Index warmup_epochs = 1;
  double droppath = 0.0;  // max rate, linearly spaced over blocks
  double grad_clip = 1.0;  // global norm, 0 disables
  std::uint64_t seed = 0;
  std::string precision = "f64";
  int eval_workers = 1;
  std::string init_from;  // checkpoint whose matching tensors initialise the model
};

struct BenchSpec {
  std::vector<Index> batch_sizes{1, 8, 32};
  int warmup = 2;
  int repetitions = 10;
  std::vector<std::string> precisions{"f32", "f64"};
  Index router_tokens = 4096;
  Index router_width = 64;
};

struct RunConfig {
  ViTConfig model;
  CroprVariant variant;
  Index cropr_mlp_ratio = 4;
  ScheduleSpec schedule;
  TaskSpec task;
  SelectorMode selector = SelectorMode::Cropr;
  bool invert_selector = false;
  FusionMode fusion = FusionMode::None;
  TrainSpec train;
  BenchSpec bench;

  /// Model config with num_classes and droppath rates filled from the task
  /// and train sections.
  ViTConfig resolved_model() const;
  PruningSchedule resolved_schedule() const;
  /// Task with generator geometry (image side, patch, channels, classes)
  /// taken from the model section.
  TaskSpec resolved_task() const;
  /// Throws ConfigError (or ScheduleError) on inconsistent settings.
  void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
/// Applies "section.key=value" overrides; the value is parsed as JSON when
/// possible, otherwise taken as a string.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);

/// FNV-1a 64 of the canonical (sorted-key, compact) dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);
/// "<version>+<git describe>".
std::string version_string();

}  // namespace cropr
