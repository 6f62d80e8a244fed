// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/flops.hpp"

#include "cropr/errors.hpp"

namespace cropr {

CostModel CostModel::from(const ViTConfig& config, bool dense_head) {
  CostModel m;
  m.depth = config.depth;
  m.width = config.width;
  m.heads = config.heads;
  m.mlp_ratio = config.mlp_ratio;
  m.m0 = config.num_patches();
  m.cls = config.cls_token;
  m.patch_dim = config.channels * config.patch_size * config.patch_size;
  m.num_classes = config.num_classes;
  m.dense_head = dense_head;
  return m;
}

double FlopReport::router_total() const {
  double r = 0;
  for (const auto& b : blocks) r += b.router;
  return r;
}

BlockCost block_cost(const CostModel& model, Index tokens) {
  const double M = static_cast<double>(tokens), D = static_cast<double>(model.width);
  BlockCost c;
  c.tokens = tokens;
  c.attention = 4.0 * M * M * D;
  c.projections = 8.0 * M * D * D;
  c.mlp = 4.0 * static_cast<double>(model.mlp_ratio) * M * D * D;
  return c;
}

FlopReport flops(const CostModel& model, const PruningSchedule& schedule) {
  if (schedule.depth != model.depth || schedule.m0 != model.m0 || schedule.cls != model.cls) {
    throw ScheduleError("schedule does not match the model (depth, m0 or cls)");
  }
  schedule.validate();
  const double D = static_cast<double>(model.width);
  const Index full = model.m0 + (model.cls ? 1 : 0);
  FlopReport r;
  r.patch_embed = 2.0 * static_cast<double>(model.m0 * model.patch_dim) * D;
  Index tokens = full;
  for (Index b = 1; b <= model.depth; ++b) {
    const bool fused_last = schedule.llf && b == model.depth;
    BlockCost c = block_cost(model, fused_last ? full : tokens);
    c.block = b;
    const Index pruned = schedule.prune_after(b);
    if (pruned > 0) {
      c.router = 2.0 * static_cast<double>(tokens) * D;
      tokens -= pruned;
    }
    r.blocks.push_back(c);
  }
  const Index final_tokens = schedule.llf ? full : tokens;
  const double head_rows = model.dense_head ? static_cast<double>(final_tokens - (model.cls ? 1 : 0)) : 1.0;
  r.head = 2.0 * head_rows * D * static_cast<double>(model.num_classes);
  r.total = r.patch_embed + r.head;
  for (const auto& c : r.blocks) r.total += c.total();
  return r;
}

}  // namespace cropr
