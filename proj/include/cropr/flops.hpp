// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Analytic cost model of a (pruned) ViT. One multiply-add counts as 2 FLOPs.
// Per block running on M tokens of width D:
//   attention    4 M^2 D           (Q K^T and A V)
//   projections  8 M D^2           (q, k, v, out)
//   mlp          4 r M D^2         (two layers, hidden r D)
// Each pruning module adds a folded router, 2 M D. Softmax, norms and
// activations are not counted.

#pragma once

#include <string>
#include <vector>

#include "cropr/schedule.hpp"
#include "cropr/vit.hpp"

namespace cropr {

struct CostModel {
  Index depth = 0;
  Index width = 0;
  Index heads = 1;
  Index mlp_ratio = 4;
  Index m0 = 0;        // patch tokens
  bool cls = false;
  Index patch_dim = 0; // C * p * p
  Index num_classes = 0;
  bool dense_head = false;  // head on every final token instead of one pooled vector

  static CostModel from(const ViTConfig& config, bool dense_head = false);
};

struct BlockCost {
  Index block = 0;   // 1-based
  Index tokens = 0;  // sequence length the block runs on
  double attention = 0;
  double projections = 0;
  double mlp = 0;
  double router = 0;  // pruning module right after this block
  double total() const { return attention + projections + mlp + router; }
};

struct FlopReport {
  double patch_embed = 0;
  double head = 0;
  std::vector<BlockCost> blocks;
  double total = 0;
  double router_total() const;
};

/// Throws ScheduleError when the schedule does not fit the model.
FlopReport flops(const CostModel& model, const PruningSchedule& schedule);
/// Cost of one block on `tokens` tokens, router excluded.
BlockCost block_cost(const CostModel& model, Index tokens);

}  // namespace cropr
