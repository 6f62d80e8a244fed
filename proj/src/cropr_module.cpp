// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/cropr_module.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace cropr {
namespace {

template <typename Scalar>
constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();

template <typename Scalar>
void override_cls(RowMat<Scalar>& scores, const TokenBatch<Scalar>& x) {
  if (x.cls_present && scores.cols() > 0) scores.col(0).setConstant(kInf<Scalar>);
}

void note_buffer(Index elements) {
  auto& stats = ScoringStats::current();
  stats.largest_buffer = std::max(stats.largest_buffer, elements);
}

// Builds the route from per-image ranking keys (higher is kept).
template <typename Scalar>
RouteResult<Scalar> route_by_keys(const TokenBatch<Scalar>& x, const RowMat<Scalar>& keys, Index keep) {
  const Index B = x.batch(), M = x.length();
  if (keep < 1 || keep > M) {
    throw ContractError("keep count " + std::to_string(keep) + " outside [1, " + std::to_string(M) + "]");
  }
  if (keys.rows() != B || keys.cols() != M) throw ShapeError("scores do not match the token batch");
  const Index R = M - keep;
  RouteResult<Scalar> out;
  out.keep_index.resize(B, keep);
  out.prune_index.resize(B, R);
  std::vector<Index> order(static_cast<std::size_t>(M));
  for (Index b = 0; b < B; ++b) {
    for (Index i = 0; i < M; ++i) {
      if (std::isnan(keys(b, i))) throw ContractError("NaN routing score");
    }
    std::iota(order.begin(), order.end(), Index{0});
    auto better = [&](Index i, Index j) {
      if (keys(b, i) != keys(b, j)) return keys(b, i) > keys(b, j);
      return x.positions(b, i) < x.positions(b, j);
    };
    std::partial_sort(order.begin(), order.begin() + keep, order.end(), better);
    std::sort(order.begin(), order.begin() + keep);
    std::sort(order.begin() + keep, order.end());
    for (Index k = 0; k < keep; ++k) out.keep_index(b, k) = order[static_cast<std::size_t>(k)];
    for (Index r = 0; r < R; ++r) out.prune_index(b, r) = order[static_cast<std::size_t>(keep + r)];
  }
  out.keep = select_tokens(x, out.keep_index);
  out.pruned = select_tokens(x, out.prune_index);
  out.keep.cls_present = x.cls_present;
  out.pruned.cls_present = false;
  return out;
}

}  // namespace

ScoringStats& ScoringStats::current() {
  thread_local ScoringStats stats;
  return stats;
}

template <typename Scalar>
CroprModuleState<Scalar> CroprModuleState<Scalar>::create(const CroprConfig& config, ParameterStore<Scalar>& store,
                                                          const std::string& prefix, Rng& rng) {
  if (config.num_queries <= 0) throw ConfigError("a pruning module needs at least one query");
  const Index D = config.width;
  store.add(prefix + ".queries", trunc_normal<Scalar>({config.num_queries, D}, 0.02, rng));
  if (config.variant.scorer == ScorerKind::Mha) {
    make_layer_norm(store, prefix + ".scorer_norm", D);
    make_attention(store, prefix + ".scorer_attn", D, config.variant.mha_heads, rng);
  }
  if (config.variant.aggregator_mlp) {
    make_layer_norm(store, prefix + ".agg_norm", D);
    make_mlp(store, prefix + ".agg_mlp", D, config.mlp_ratio * D, rng);
  }
  make_layer_norm(store, prefix + ".head_norm", D);
  make_linear(store, prefix + ".head", D, config.num_classes, rng);
  return bind(config, store, prefix);
}

template <typename Scalar>
CroprModuleState<Scalar> CroprModuleState<Scalar>::bind(const CroprConfig& config, const ParameterStore<Scalar>& store,
                                                        const std::string& prefix) {
  if (config.num_queries <= 0) throw ConfigError("a pruning module needs at least one query");
  CroprModuleState s;
  s.config = config;
  s.queries = store.get(prefix + ".queries");
  if (s.queries.dim(0) != config.num_queries || s.queries.dim(1) != config.width) {
    throw ConfigError("stored queries do not match the module configuration");
  }
  if (config.variant.scorer == ScorerKind::Mha) {
    s.scorer_norm = bind_layer_norm(store, prefix + ".scorer_norm");
    s.scorer_attn = bind_attention(store, prefix + ".scorer_attn", config.variant.mha_heads);
  }
  if (config.variant.aggregator_mlp) {
    s.agg_norm = bind_layer_norm(store, prefix + ".agg_norm");
    s.agg_mlp = bind_mlp(store, prefix + ".agg_mlp");
  }
  s.head_norm = bind_layer_norm(store, prefix + ".head_norm");
  s.head = bind_linear(store, prefix + ".head");
  return s;
}

template <typename Scalar>
ScoreResult<Scalar> score(const TokenBatch<Scalar>& x, const CroprModuleState<Scalar>& state) {
  const auto& cfg = state.config;
  if (cfg.num_queries <= 0) throw ConfigError("a pruning module needs at least one query");
  if (x.width() != cfg.width) throw ShapeError("token width does not match the pruning module");
  const Index B = x.batch(), M = x.length(), N = cfg.num_queries;
  ScoreResult<Scalar> out;
  out.keys = cfg.variant.stop_gradient ? stop_gradient(x.tokens) : x.tokens;
  auto queries = expand_batch(state.queries, B);
  Index groups = 1;
  if (cfg.variant.scorer == ScorerKind::Simple) {
    out.attention = bmm(queries, out.keys, /*transpose_b=*/true);
  } else {
    const auto& attn = *state.scorer_attn;
    groups = attn.heads;
    auto k = split_heads(apply(apply(out.keys, *state.scorer_norm), attn.key), groups);
    auto q = split_heads(apply(queries, attn.query), groups);
    out.attention = bmm(q, k, /*transpose_b=*/true);
  }
  note_buffer(N * M);
  out.scores = RowMat<Scalar>::Zero(B, M);
  const Scalar* a = out.attention.value().data();
  for (Index b = 0; b < B; ++b) {
    for (Index g = 0; g < groups; ++g) {
      out.scores.row(b) += Eigen::Map<const RowMat<Scalar>>(a + (b * groups + g) * N * M, N, M).colwise().sum();
    }
  }
  override_cls(out.scores, x);
  return out;
}

template <typename Scalar>
RouteResult<Scalar> select_topk(const TokenBatch<Scalar>& x, const RowMat<Scalar>& scores, Index keep) {
  RowMat<Scalar> s = scores;
  override_cls(s, x);
  auto out = route_by_keys(x, s, keep);
  out.scores = std::move(s);
  return out;
}

template <typename Scalar>
RouteResult<Scalar> select_sampling(const TokenBatch<Scalar>& x, const RowMat<Scalar>& scores, Index keep, Rng& rng) {
  // Gumbel-top-k: the first K of a + Gumbel noise are a draw without
  // replacement from softmax(a).
  RowMat<Scalar> s = scores;
  override_cls(s, x);
  RowMat<Scalar> keys = s;
  std::uniform_real_distribution<double> uniform(std::numeric_limits<double>::min(), 1.0);
  for (Index b = 0; b < keys.rows(); ++b) {
    for (Index i = 0; i < keys.cols(); ++i) {
      if (std::isinf(keys(b, i))) continue;
      keys(b, i) += static_cast<Scalar>(-std::log(-std::log(uniform(rng))));
    }
  }
  auto out = route_by_keys(x, keys, keep);
  out.scores = std::move(s);
  return out;
}

template <typename Scalar>
Tensor<Scalar> aggregate(const Tensor<Scalar>& keys, const Tensor<Scalar>& attention,
                         const CroprModuleState<Scalar>& state) {
  const auto& cfg = state.config;
  Tensor<Scalar> pooled;
  if (cfg.variant.scorer == ScorerKind::Simple) {
    const Scalar temp = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(cfg.width)));
    pooled = bmm(softmax(scale(attention, temp), -1), keys);
  } else {
    const auto& attn = *state.scorer_attn;
    const Index dh = cfg.width / attn.heads;
    const Scalar temp = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto v = split_heads(apply(apply(keys, *state.scorer_norm), attn.value), attn.heads);
    pooled = apply(merge_heads(bmm(softmax(scale(attention, temp), -1), v), attn.heads), attn.out);
  }
  if (!cfg.variant.aggregator_mlp) return pooled;
  return add(apply(apply(pooled, *state.agg_norm), *state.agg_mlp), pooled);
}

template <typename Scalar>
Tensor<Scalar> aux_logits(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state) {
  return apply(apply(z, state.head_norm), state.head);
}

template <typename Scalar>
AuxOutput<Scalar> aux_head_classification(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                          std::span<const int> labels) {
  if (z.rank() != 3 || z.dim(1) != 1) throw ShapeError("classification head expects [B,1,D] aggregates");
  AuxOutput<Scalar> out;
  out.logits = reshape(aux_logits(z, state), {z.dim(0), state.config.num_classes});
  out.loss = cross_entropy(out.logits, labels);
  return out;
}

template <typename Scalar>
AuxOutput<Scalar> aux_head_dense(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                 std::span<const int> patch_labels) {
  if (z.rank() != 3) throw ShapeError("dense head expects [B,N,D] aggregates");
  const Index B = z.dim(0), N = z.dim(1), C = state.config.num_classes;
  if (static_cast<Index>(patch_labels.size()) != B * N) {
    throw ContractError("label grid has " + std::to_string(patch_labels.size()) + " cells, expected " +
                        std::to_string(B * N));
  }
  AuxOutput<Scalar> out;
  out.logits = aux_logits(z, state);
  out.loss = cross_entropy(reshape(out.logits, {B * N, C}), patch_labels);
  return out;
}

template <typename Scalar>
AuxOutput<Scalar> aux_head_multilabel(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                      const Eigen::MatrixXd& targets) {
  if (z.rank() != 3 || z.dim(1) != 1) throw ShapeError("multi-label head expects [B,1,D] aggregates");
  const Index B = z.dim(0), C = state.config.num_classes;
  if (targets.rows() != B || targets.cols() != C) throw ShapeError("multi-label targets must be [B,C]");
  AuxOutput<Scalar> out;
  out.logits = reshape(aux_logits(z, state), {B, C});
  RowMat<Scalar> t = targets.cast<Scalar>();
  out.loss = binary_cross_entropy_with_logits(out.logits, Tensor<Scalar>::from_matrix(t));
  return out;
}

template <typename Scalar>
AuxOutput<Scalar> aux_head(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                           const TaskTargets& targets) {
  switch (state.config.task) {
    case AuxTask::Classification:
      return aux_head_classification(z, state, std::span<const int>(targets.labels));
    case AuxTask::Dense:
      return aux_head_dense(z, state, std::span<const int>(targets.patch_labels));
    case AuxTask::MultiLabel:
      return aux_head_multilabel(z, state, targets.multilabel);
  }
  throw ConfigError("unknown auxiliary task");
}

LabelGrid downsample_labels(const LabelGrid& pixel_labels, Index patch) {
  if (patch <= 0 || pixel_labels.rows() % patch != 0 || pixel_labels.cols() % patch != 0) {
    throw ContractError("label map size is not divisible by the patch size");
  }
  const Index h = pixel_labels.rows() / patch, w = pixel_labels.cols() / patch;
  LabelGrid out(h, w);
  std::map<int, Index> counts;
  for (Index py = 0; py < h; ++py) {
    for (Index px = 0; px < w; ++px) {
      counts.clear();
      for (Index dy = 0; dy < patch; ++dy)
        for (Index dx = 0; dx < patch; ++dx) {
          const int label = pixel_labels(py * patch + dy, px * patch + dx);
          if (label != kIgnoreLabel) ++counts[label];
        }
      int best = kIgnoreLabel;
      Index best_count = 0;
      for (const auto& [label, count] : counts) {  // ascending ids: strict > keeps the smaller on ties
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      out(py, px) = best;
    }
  }
  return out;
}

template <typename Scalar>
FoldedRouter<Scalar> fold(const CroprModuleState<Scalar>& state) {
  if (state.config.variant.scorer != ScorerKind::Simple) {
    throw UnsupportedVariantError("only the projection-free scorer folds into a single query");
  }
  FoldedRouter<Scalar> r;
  r.query_sum = state.queries.matrix().colwise().sum().transpose();
  return r;
}

template <typename Scalar>
RowMat<Scalar> folded_score(const TokenBatch<Scalar>& x, const FoldedRouter<Scalar>& router) {
  const Index B = x.batch(), M = x.length(), D = x.width();
  if (router.query_sum.size() != D) throw ShapeError("folded query width does not match tokens");
  RowMat<Scalar> scores(B, M);
  const Scalar* data = x.tokens.value().data();
  for (Index b = 0; b < B; ++b) {
    scores.row(b).noalias() =
        (Eigen::Map<const RowMat<Scalar>>(data + b * M * D, M, D) * router.query_sum).transpose();
  }
  note_buffer(M);
  override_cls(scores, x);
  return scores;
}

template <typename Scalar>
CroprStep<Scalar> cropr_forward_train(const TokenBatch<Scalar>& x, const CroprModuleState<Scalar>& state,
                                      Index prune, const TaskTargets& targets, Rng* rng) {
  const Index prunable = x.patch_count();
  if (prune < 0 || prune >= prunable) {
    throw ScheduleError("cannot prune " + std::to_string(prune) + " of " + std::to_string(prunable) +
                        " prunable tokens");
  }
  auto scored = score(x, state);
  const Index keep = x.length() - prune;
  CroprStep<Scalar> out;
  if (state.config.variant.selector == SelectorKind::Sampling) {
    if (rng == nullptr) throw ContractError("sampling selector needs an rng");
    out.route = select_sampling(x, scored.scores, keep, *rng);
  } else {
    out.route = select_topk(x, scored.scores, keep);
  }
  out.route.attention = scored.attention;
  auto z = aggregate(scored.keys, scored.attention, state);
  out.aux = aux_head(z, state, targets);
  return out;
}

#define CROPR_INSTANTIATE_MODULE(S)                                                                               \
  template struct CroprModuleState<S>;                                                                            \
  template ScoreResult<S> score(const TokenBatch<S>&, const CroprModuleState<S>&);                                \
  template RouteResult<S> select_topk(const TokenBatch<S>&, const RowMat<S>&, Index);                             \
  template RouteResult<S> select_sampling(const TokenBatch<S>&, const RowMat<S>&, Index, Rng&);                   \
  template Tensor<S> aggregate(const Tensor<S>&, const Tensor<S>&, const CroprModuleState<S>&);                   \
  template Tensor<S> aux_logits(const Tensor<S>&, const CroprModuleState<S>&);                                    \
  template AuxOutput<S> aux_head_classification(const Tensor<S>&, const CroprModuleState<S>&,                     \
                                                std::span<const int>);                                            \
  template AuxOutput<S> aux_head_dense(const Tensor<S>&, const CroprModuleState<S>&, std::span<const int>);       \
  template AuxOutput<S> aux_head_multilabel(const Tensor<S>&, const CroprModuleState<S>&, const Eigen::MatrixXd&); \
  template AuxOutput<S> aux_head(const Tensor<S>&, const CroprModuleState<S>&, const TaskTargets&);               \
  template FoldedRouter<S> fold(const CroprModuleState<S>&);                                                      \
  template RowMat<S> folded_score(const TokenBatch<S>&, const FoldedRouter<S>&);                                  \
  template CroprStep<S> cropr_forward_train(const TokenBatch<S>&, const CroprModuleState<S>&, Index,              \
                                            const TaskTargets&, Rng*);

CROPR_INSTANTIATE_MODULE(float)
CROPR_INSTANTIATE_MODULE(double)

#undef CROPR_INSTANTIATE_MODULE

}  // namespace cropr
