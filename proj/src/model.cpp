// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/model.hpp"

#include "cropr/selectors.hpp"

namespace cropr {
namespace {

std::string module_prefix(Index block) { return "cropr.b" + std::to_string(block); }
std::string router_name(Index block) { return "router.b" + std::to_string(block) + ".query_sum"; }

AuxTask aux_task_of(TaskKind k) {
  switch (k) {
    case TaskKind::Needle:
      return AuxTask::Classification;
    case TaskKind::Segmentation:
      return AuxTask::Dense;
    case TaskKind::MultiLabel:
      return AuxTask::MultiLabel;
  }
  throw ConfigError("unknown task");
}

}  // namespace

std::vector<int> patch_label_vector(const LabeledImages& data, Index patch_size) {
  std::vector<int> out;
  for (Index b = 0; b < data.size(); ++b) {
    const LabelGrid grid = downsample_labels(data.label_map(b), patch_size);
    out.insert(out.end(), grid.data(), grid.data() + grid.size());
  }
  return out;
}

TaskTargets make_targets(const LabeledImages& data, const std::vector<int>& patch_labels, Index num_patches,
                         TaskKind task, const std::vector<Index>& rows) {
  TaskTargets t;
  switch (task) {
    case TaskKind::Needle:
      for (Index r : rows) t.labels.push_back(data.labels[static_cast<std::size_t>(r)]);
      break;
    case TaskKind::Segmentation:
      for (Index r : rows) {
        const auto begin = patch_labels.begin() + r * num_patches;
        t.patch_labels.insert(t.patch_labels.end(), begin, begin + num_patches);
      }
      break;
    case TaskKind::MultiLabel:
      t.multilabel.resize(static_cast<Index>(rows.size()), data.multilabel.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) t.multilabel.row(static_cast<Index>(i)) = data.multilabel.row(rows[i]);
      break;
  }
  return t;
}

template <typename Scalar>
CroprConfig PrunedViT<Scalar>::module_config() const {
  CroprConfig c;
  c.width = vit_config_.width;
  c.num_queries = config_.task.kind == TaskKind::Segmentation ? vit_config_.num_patches() : 1;
  c.mlp_ratio = config_.cropr_mlp_ratio;
  c.task = aux_task_of(config_.task.kind);
  c.num_classes = vit_config_.num_classes;
  c.variant = config_.variant;
  return c;
}

template <typename Scalar>
PrunedViT<Scalar>::PrunedViT(const RunConfig& config, ParameterStore<Scalar>& store, Rng& rng)
    : config_(config),
      vit_config_(config.resolved_model()),
      schedule_(config.resolved_schedule()),
      vit_(vit_config_, store, rng) {
  config_.validate();
  const Index D = vit_config_.width;
  if (config_.selector == SelectorMode::Cropr) {
    for (const auto& e : schedule_.entries) {
      CroprModuleState<Scalar>::create(module_config(), store, module_prefix(e.block), rng);
    }
  }
  if (config_.fusion == FusionMode::CrossAttn || config_.fusion == FusionMode::CrossAttnConcat) {
    make_cross_attn_fuser(store, "fusion.cross_attn", vit_config_.num_patches(), D, vit_config_.heads,
                          vit_config_.mlp_hidden(), rng);
  }
  if (config_.fusion == FusionMode::MhsaConcat) {
    make_block(store, "fusion.mhsa", D, vit_config_.heads, vit_config_.mlp_hidden(), rng);
  }
  bind(store);
}

template <typename Scalar>
PrunedViT<Scalar>::PrunedViT(const RunConfig& config, const ParameterStore<Scalar>& store)
    : config_(config),
      vit_config_(config.resolved_model()),
      schedule_(config.resolved_schedule()),
      vit_(vit_config_, store) {
  config_.validate();
  bind(store);
}

template <typename Scalar>
void PrunedViT<Scalar>::bind(const ParameterStore<Scalar>& store) {
  modules_.clear();
  routers_.clear();
  if (config_.selector == SelectorMode::Cropr) {
    for (const auto& e : schedule_.entries) {
      if (store.contains(module_prefix(e.block) + ".queries")) {
        modules_.emplace(e.block, CroprModuleState<Scalar>::bind(module_config(), store, module_prefix(e.block)));
      } else if (store.contains(router_name(e.block))) {
        const auto& q = store.get(router_name(e.block));
        if (q.numel() != vit_config_.width) throw ConfigError("folded router width does not match the model");
        routers_.emplace(e.block, FoldedRouter<Scalar>{q.value()});
      } else {
        throw ConfigError("no pruning module or folded router for block " + std::to_string(e.block));
      }
    }
  }
  if (config_.fusion == FusionMode::CrossAttn || config_.fusion == FusionMode::CrossAttnConcat) {
    cross_attn_ = bind_cross_attn_fuser(store, "fusion.cross_attn", vit_config_.heads);
  }
  if (config_.fusion == FusionMode::MhsaConcat) mhsa_ = bind_block(store, "fusion.mhsa", vit_config_.heads);
}

template <typename Scalar>
ForwardOutput<Scalar> PrunedViT<Scalar>::forward(const ImageBatch& images, const ForwardOptions& opt) const {
  const PruningSchedule& sched = opt.schedule ? *opt.schedule : schedule_;
  if (sched.depth != schedule_.depth || sched.llf != schedule_.llf || sched.entries.size() != schedule_.entries.size()) {
    throw ScheduleError("schedule override must keep the module placement of the model");
  }
  if (opt.training && opt.targets == nullptr) throw ContractError("training forward needs targets");
  const bool dense = config_.task.kind == TaskKind::Segmentation;
  const Index L = vit_config_.depth, M0 = vit_config_.num_patches();
  const bool want_aux = opt.training || config_.fusion == FusionMode::Dtop;

  ForwardOutput<Scalar> out;
  auto x = vit_.patch_embed(images);
  const Index B = x.batch();
  Eigen::MatrixXd variance_table;
  if (config_.selector == SelectorMode::Variance) variance_table = variance_score(images, vit_config_.patch_size);

  std::vector<PrunedStage<Scalar>> stages;
  std::vector<StageLogits<Scalar>> stage_logits;
  const Index last_block = sched.llf ? L - 1 : L;
  for (Index b = 1; b <= last_block; ++b) {
    BlockContext ctx{opt.training, vit_config_.droppath_rate(b - 1), opt.rng};
    const Index prune = sched.prune_after(b);
    const bool attn_scores = prune > 0 && (config_.selector == SelectorMode::AttnCls ||
                                           config_.selector == SelectorMode::AttnAvg);
    AttentionCapture<Scalar> capture;  // probabilities are copied out as plain values
    x = vit_.block(x, b - 1, ctx, attn_scores ? &capture : nullptr);
    if (prune == 0) continue;

    const Index keep = x.length() - prune;
    RouteResult<Scalar> route;
    if (config_.selector == SelectorMode::Cropr) {
      const auto module = modules_.find(b);
      const bool have_module = module != modules_.end();
      if (opt.training || (want_aux && have_module)) {
        if (!have_module) throw ConfigError("training needs the unfolded pruning modules");
        const auto& state = module->second;
        if (opt.training) {
          auto step = cropr_forward_train(x, state, prune, *opt.targets, opt.rng);
          route = std::move(step.route);
          if (config_.invert_selector) route = select_topk(x, invert(route.scores), keep);
          out.aux_losses.push_back(step.aux.loss);
          if (dense) stage_logits.push_back({step.aux.logits, route.pruned.positions, b});
        } else {
          NoGradGuard no_grad;
          auto scored = score(x, state);
          RowMat<Scalar> s = config_.invert_selector ? invert(scored.scores) : scored.scores;
          route = select_topk(x, s, keep);
          if (dense) {
            auto z = aggregate(scored.keys, scored.attention, state);
            stage_logits.push_back({aux_logits(z, state), route.pruned.positions, b});
          }
        }
      } else {
        NoGradGuard no_grad;
        RowMat<Scalar> s;
        if (!have_module) {
          s = folded_score(x, routers_.at(b));
        } else if (opt.routing == Routing::Folded && module->second.config.variant.scorer == ScorerKind::Simple) {
          // Folded from the live queries, so training-time evaluation sees current values.
          s = folded_score(x, fold(module->second));
        } else {
          s = score(x, module->second).scores;
        }
        route = select_topk(x, config_.invert_selector ? invert(s) : s, keep);
      }
    } else {
      RowMat<Scalar> s;
      switch (config_.selector) {
        case SelectorMode::Random:
          if (opt.rng == nullptr) throw ContractError("random selector needs an rng");
          s = random_score<Scalar>(B, x.length(), *opt.rng);
          break;
        case SelectorMode::Variance:
          s = scores_at_positions<Scalar>(variance_table, x);
          break;
        case SelectorMode::AttnCls:
        case SelectorMode::AttnAvg:
          s = scores_from_attention(capture,
                                    config_.selector == SelectorMode::AttnCls ? AttnScoreMode::Cls : AttnScoreMode::Avg,
                                    x.cls_present);
          break;
        case SelectorMode::Cropr:
          break;
      }
      route = select_topk(x, config_.invert_selector ? invert(s) : s, keep);
    }
    route.prune_stage = b;
    stages.push_back({route.pruned, b});
    x = route.keep;
  }

  out.final_positions = x.positions;
  out.stage_map = PositionMatrix::Zero(B, M0);
  for (const auto& st : stages)
    for (Index bb = 0; bb < B; ++bb)
      for (Index r = 0; r < st.tokens.length(); ++r) out.stage_map(bb, st.tokens.positions(bb, r)) = st.block;

  // Fusion and head.
  TokenBatch<Scalar> head_in;
  const BlockContext last_ctx{opt.training, 0.0, opt.rng};
  switch (config_.fusion) {
    case FusionMode::None:
      if (dense && !stages.empty()) throw FusionError("dense prediction with pruning needs a fusion mode");
      head_in = x;
      if (opt.keep_fused_tokens) out.pre_head = stages.empty() ? x : fuse_by_position(x, stages, M0).tokens;
      break;
    case FusionMode::Llf:
      head_in = llf_fuse(vit_, x, stages, last_ctx).tokens;
      break;
    case FusionMode::TokenConcat:
      head_in = token_concat_fuse(x, stages, M0).tokens;
      break;
    case FusionMode::CrossAttn:
      head_in = cross_attn_fuse(x, *cross_attn_);
      break;
    case FusionMode::CrossAttnConcat:
      head_in = cross_attn_concat_fuse(x, stages, M0, *cross_attn_).tokens;
      break;
    case FusionMode::MhsaConcat:
      head_in = mhsa_concat_fuse(x, stages, M0, *mhsa_).tokens;
      break;
    case FusionMode::Dtop:
      head_in = x;
      if (opt.keep_fused_tokens) out.pre_head = stages.empty() ? x : fuse_by_position(x, stages, M0).tokens;
      break;
  }
  if (opt.keep_fused_tokens && config_.fusion != FusionMode::None && config_.fusion != FusionMode::Dtop) {
    out.pre_head = head_in;
  }

  if (dense) {
    if (config_.fusion == FusionMode::Dtop) {
      out.logits = dtop_logit_fuse(vit_.token_head(x), x.positions, stage_logits, M0);
    } else {
      out.logits = vit_.dense_head(head_in);
    }
  } else {
    out.logits = vit_.pool_and_head(head_in);
  }

  if (opt.targets != nullptr) {
    const auto& t = *opt.targets;
    switch (config_.task.kind) {
      case TaskKind::Needle:
        out.main_loss = cross_entropy(out.logits, std::span<const int>(t.labels));
        break;
      case TaskKind::Segmentation:
        out.main_loss = cross_entropy(reshape(out.logits, {B * M0, vit_config_.num_classes}),
                                      std::span<const int>(t.patch_labels));
        break;
      case TaskKind::MultiLabel: {
        RowMat<Scalar> m = t.multilabel.cast<Scalar>();
        out.main_loss = binary_cross_entropy_with_logits(out.logits, Tensor<Scalar>::from_matrix(m));
        break;
      }
    }
    out.loss = out.main_loss;
    for (const auto& a : out.aux_losses) out.loss = add(out.loss, a);
  }
  return out;
}

template <typename Scalar>
ParameterStore<Scalar> fold_store(const RunConfig& config, const ParameterStore<Scalar>& store) {
  if (config.variant.scorer != ScorerKind::Simple && config.selector == SelectorMode::Cropr) {
    throw UnsupportedVariantError("only the projection-free scorer folds into a single query");
  }
  PrunedViT<Scalar> model(config, store);
  ParameterStore<Scalar> out;
  for (const auto& [name, t] : store.entries()) {
    if (name.rfind("cropr.", 0) == 0) continue;
    out.add(name, t);
  }
  for (const auto& [block, state] : model.modules()) {
    const auto router = fold(state);
    out.add(router_name(block), Tensor<Scalar>::from({router.query_sum.size()}, router.query_sum));
  }
  return out;
}

template class PrunedViT<float>;
template class PrunedViT<double>;
template ParameterStore<float> fold_store(const RunConfig&, const ParameterStore<float>&);
template ParameterStore<double> fold_store(const RunConfig&, const ParameterStore<double>&);

}  // namespace cropr
