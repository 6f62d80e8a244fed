// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pruning schedules: where the pruning modules sit, how many tokens each
// removes, and the arithmetic derived from that (keep trajectory, TPR).
//
// Block indices are 1-based and mean "prune after block b". With Last Layer
// Fusion the final block consumes the reinserted tokens, so the last module
// may sit after block L-2; without it, after block L-1.

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cropr/tensor.hpp"

namespace cropr {

struct ScheduleEntry {
  Index block = 1;
  Index r = 0;
  friend bool operator==(const ScheduleEntry&, const ScheduleEntry&) = default;
};

struct Curriculum {
  bool enabled = false;
  Index start_r = 1;
  Index final_r = 1;
  Index warmup_epochs = 1;
  friend bool operator==(const Curriculum&, const Curriculum&) = default;
};

/// One row of the keep trajectory. Token counts are full sequence lengths,
/// CLS included.
struct TrajectoryStep {
  Index block = 0;
  Index effective_r = 0;
  Index tokens_before = 0;
  Index tokens_after = 0;
  Index patches_after = 0;
};

struct PruningSchedule {
  Index depth = 0;
  Index m0 = 0;
  bool cls = false;
  bool llf = false;
  std::vector<ScheduleEntry> entries;
  Curriculum curriculum;
  bool prefer_div8 = false;

  friend bool operator==(const PruningSchedule&, const PruningSchedule&) = default;

  /// Last block after which a module may sit.
  Index max_block() const { return llf ? depth - 2 : depth - 1; }
  /// Patch tokens removed by entry `i`; the first entry removes one extra
  /// when CLS is present so sequence lengths match the CLS-free case.
  Index effective_r(std::size_t i) const;
  Index total_pruned() const;
  Index final_patches() const { return m0 - total_pruned(); }
  Index final_tokens() const { return final_patches() + (cls ? 1 : 0); }
  Index sequence_length() const { return m0 + (cls ? 1 : 0); }
  std::vector<TrajectoryStep> trajectory() const;
  /// Prune count (patch tokens) applied right after `block`, 0 if none.
  Index prune_after(Index block) const;

  /// Throws ScheduleError on any broken invariant.
  void validate() const;
  /// Entry prune counts replaced by curriculum_r(epoch) when the curriculum
  /// is enabled; otherwise a copy.
  PruningSchedule at_epoch(Index epoch) const;
};

PruningSchedule build_per_block(Index depth, Index m0, Index r, bool llf, bool cls);
PruningSchedule build_staged(Index depth, const std::vector<ScheduleEntry>& stages, Index m0, bool llf, bool cls);

/// Pruned patch tokens over m0; CLS is excluded from both.
double tpr(const PruningSchedule& s);
/// tpr() as a whole percentage, rounded half away from zero.
int tpr_percent(const PruningSchedule& s);

/// Linear ramp from start_r at epoch 0 to final_r at epoch warmup-1, rounded
/// to the nearest integer; final_r from then on.
Index curriculum_r(Index epoch, const Curriculum& c);

/// One message per post-prune sequence length that is not a multiple of 8.
/// Empty unless prefer_div8 is set.
std::vector<std::string> validate_div8(const PruningSchedule& s);

nlohmann::json to_json(const PruningSchedule& s);
PruningSchedule schedule_from_json(const nlohmann::json& j);

/// Fixed-width table of the trajectory, one line per entry plus a header.
std::string trajectory_table(const PruningSchedule& s);

}  // namespace cropr
