// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// A ViT with pruning modules placed per schedule, a token selector, a fusion
// mode and a task head. Parameter names:
//   backbone.*            the ViT
//   cropr.b<k>.*          training-time pruning module after block k
//   router.b<k>.query_sum folded router after block k (inference artifact)
//   fusion.*              extra fusion blocks (cross-attn, mhsa)

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cropr/config.hpp"
#include "cropr/cropr_module.hpp"
#include "cropr/fusion.hpp"
#include "cropr/vit.hpp"

namespace cropr {

enum class Routing {
  Folded,  // single summed query (inference path)
  Full,    // N-query scorer as in training
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;                         // DropPath, random selector, sampling selector
  const TaskTargets* targets = nullptr;       // losses are computed when set; required for training
  const PruningSchedule* schedule = nullptr;  // overrides the model schedule (curriculum)
  Routing routing = Routing::Folded;          // eval-mode scoring of learned routers
  bool keep_fused_tokens = false;             // fill ForwardOutput::pre_head
};

template <typename Scalar>
struct ForwardOutput {
  Tensor<Scalar> logits;  // [B,C] (image tasks) or [B,M0,C] (dense)
  Tensor<Scalar> main_loss;
  std::vector<Tensor<Scalar>> aux_losses;  // one per pruning module, training only
  Tensor<Scalar> loss;                     // main + sum of aux, weight 1 each
  PositionMatrix final_positions;          // keep set at the end of the pruned path
  PositionMatrix stage_map;                // [B,M0]: 0 survived, else the prune block
  TokenBatch<Scalar> pre_head;             // raster-ordered tokens before the head
};

/// Patch labels of a segmentation dataset at patch resolution, [B*M0].
std::vector<int> patch_label_vector(const LabeledImages& data, Index patch_size);

/// Targets of the samples `rows` for the task.
TaskTargets make_targets(const LabeledImages& data, const std::vector<int>& patch_labels, Index num_patches,
                         TaskKind task, const std::vector<Index>& rows);

template <typename Scalar>
class PrunedViT {
 public:
  /// Registers fresh parameters for `config` in `store`.
  PrunedViT(const RunConfig& config, ParameterStore<Scalar>& store, Rng& rng);
  /// Binds to an existing store (training or folded checkpoint).
  PrunedViT(const RunConfig& config, const ParameterStore<Scalar>& store);

  const RunConfig& config() const { return config_; }
  const PruningSchedule& schedule() const { return schedule_; }
  const VisionTransformer<Scalar>& backbone() const { return vit_; }
  bool is_folded() const { return modules_.empty() && !routers_.empty(); }
  const std::map<Index, CroprModuleState<Scalar>>& modules() const { return modules_; }

  ForwardOutput<Scalar> forward(const ImageBatch& images, const ForwardOptions& options) const;

 private:
  void bind(const ParameterStore<Scalar>& store);
  CroprConfig module_config() const;

  RunConfig config_;
  ViTConfig vit_config_;
  PruningSchedule schedule_;
  VisionTransformer<Scalar> vit_;
  std::map<Index, CroprModuleState<Scalar>> modules_;  // keyed by block
  std::map<Index, FoldedRouter<Scalar>> routers_;
  std::optional<CrossAttnFuserParams<Scalar>> cross_attn_;
  std::optional<BlockParams<Scalar>> mhsa_;
};

/// Folded inference artifact: every cropr.* group replaced by its summed
/// query under router.b<k>.query_sum; everything else is shared.
template <typename Scalar>
ParameterStore<Scalar> fold_store(const RunConfig& config, const ParameterStore<Scalar>& store);

}  // namespace cropr
