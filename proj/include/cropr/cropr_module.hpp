// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cross-attention pruning module: a query-based scorer and a Top-K selector
// (together the router), plus the training-only aggregator and auxiliary
// head that teach the scorer which tokens matter for the task.
//
//   A  = Q K(X)^T                     raw cross-attention logits, [N,M]
//   a  = sum_n A_n                    per-token relevance, [M]
//   X' = softmax(A / sqrt(D)) X       aggregated tokens, [N,D]
//   Z  = MLP(LN(X')) + X'             fed to the auxiliary head
//
// At inference the queries fold into one vector q = sum_n Q_n so that
// a = q K^T needs a single vector-matrix product.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cropr/nn.hpp"
#include "cropr/tokens.hpp"

namespace cropr {

enum class AuxTask { Classification, Dense, MultiLabel };
enum class ScorerKind { Simple, Mha };
enum class SelectorKind { TopK, Sampling };

struct CroprVariant {
  ScorerKind scorer = ScorerKind::Simple;
  SelectorKind selector = SelectorKind::TopK;
  bool aggregator_mlp = true;
  bool stop_gradient = true;
  Index mha_heads = 4;
};

struct CroprConfig {
  Index width = 64;
  Index num_queries = 1;  // 1 for image-level tasks, h*w for dense tasks
  Index mlp_ratio = 4;
  AuxTask task = AuxTask::Classification;
  Index num_classes = 10;
  CroprVariant variant;
};

template <typename Scalar>
struct CroprModuleState {
  CroprConfig config;
  Tensor<Scalar> queries;  // [N,D]
  std::optional<LayerNormParams<Scalar>> agg_norm;
  std::optional<MlpParams<Scalar>> agg_mlp;
  LayerNormParams<Scalar> head_norm;
  LinearParams<Scalar> head;
  // Present only for the MHA scorer.
  std::optional<LayerNormParams<Scalar>> scorer_norm;
  std::optional<AttentionParams<Scalar>> scorer_attn;

  static CroprModuleState create(const CroprConfig& config, ParameterStore<Scalar>& store, const std::string& prefix,
                                 Rng& rng);
  static CroprModuleState bind(const CroprConfig& config, const ParameterStore<Scalar>& store,
                               const std::string& prefix);
};

/// Labels for the auxiliary (and main) heads; only the field matching the
/// task is read.
struct TaskTargets {
  std::vector<int> labels;        // classification, [B]
  std::vector<int> patch_labels;  // dense, [B*h*w] raster order, kIgnoreLabel allowed
  Eigen::MatrixXd multilabel;     // multi-label, [B,C] of 0/1
};

template <typename Scalar>
struct ScoreResult {
  Tensor<Scalar> attention;  // raw logits A: [B,N,M], or [B*H,N,M] for the MHA scorer
  RowMat<Scalar> scores;     // a: [B,M], CLS set to +inf
  Tensor<Scalar> keys;       // scorer input after the optional stop-gradient
};

template <typename Scalar>
struct RouteResult {
  TokenBatch<Scalar> keep;
  TokenBatch<Scalar> pruned;
  PositionMatrix keep_index;   // [B,K] local indices, ascending
  PositionMatrix prune_index;  // [B,R] local indices, ascending
  RowMat<Scalar> scores;       // [B,M] as used for selection
  Tensor<Scalar> attention;    // training mode only
  Index prune_stage = 0;       // block after which the routing ran, 1-based
};

template <typename Scalar>
struct FoldedRouter {
  Vec<Scalar> query_sum;  // [D]
};

/// Largest score-path buffer (elements) since the last reset, on this thread.
struct ScoringStats {
  Index largest_buffer = 0;
  static ScoringStats& current();
  void reset() { largest_buffer = 0; }
};

template <typename Scalar>
ScoreResult<Scalar> score(const TokenBatch<Scalar>& x, const CroprModuleState<Scalar>& state);

/// Keeps the K highest scores per image; ties go to the lower original
/// position. CLS, when present, is always kept.
template <typename Scalar>
RouteResult<Scalar> select_topk(const TokenBatch<Scalar>& x, const RowMat<Scalar>& scores, Index keep);

/// Samples K tokens without replacement with probabilities softmax(a).
template <typename Scalar>
RouteResult<Scalar> select_sampling(const TokenBatch<Scalar>& x, const RowMat<Scalar>& scores, Index keep, Rng& rng);

/// Z [B,N,D] from the scorer keys and logits.
template <typename Scalar>
Tensor<Scalar> aggregate(const Tensor<Scalar>& keys, const Tensor<Scalar>& attention,
                         const CroprModuleState<Scalar>& state);

template <typename Scalar>
struct AuxOutput {
  Tensor<Scalar> logits;  // [B,C] or [B,N,C]
  Tensor<Scalar> loss;    // scalar
};

template <typename Scalar>
Tensor<Scalar> aux_logits(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state);
/// Softmax cross-entropy on [B,1,D] aggregates.
template <typename Scalar>
AuxOutput<Scalar> aux_head_classification(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                          std::span<const int> labels);
/// Per-patch cross-entropy; labels are [B*N] in raster order.
template <typename Scalar>
AuxOutput<Scalar> aux_head_dense(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                 std::span<const int> patch_labels);
/// Sigmoid + binary cross-entropy against [B,C] presence vectors.
template <typename Scalar>
AuxOutput<Scalar> aux_head_multilabel(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                                      const Eigen::MatrixXd& targets);
/// Dispatches on the module's task.
template <typename Scalar>
AuxOutput<Scalar> aux_head(const Tensor<Scalar>& z, const CroprModuleState<Scalar>& state,
                           const TaskTargets& targets);

using LabelGrid = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Majority vote per patch cell, ignoring kIgnoreLabel; ties go to the
/// smaller class id, all-ignored cells stay ignored.
LabelGrid downsample_labels(const LabelGrid& pixel_labels, Index patch);

/// Sums the queries into the single inference-time query. Only the simple
/// scorer folds.
template <typename Scalar>
FoldedRouter<Scalar> fold(const CroprModuleState<Scalar>& state);

/// a = q X^T per image, CLS set to +inf. [B,M].
template <typename Scalar>
RowMat<Scalar> folded_score(const TokenBatch<Scalar>& x, const FoldedRouter<Scalar>& router);

template <typename Scalar>
struct CroprStep {
  RouteResult<Scalar> route;
  AuxOutput<Scalar> aux;
};

/// Scores, routes away `prune` tokens and computes the auxiliary loss, with
/// the attention logits computed once and shared by the aggregator.
template <typename Scalar>
CroprStep<Scalar> cropr_forward_train(const TokenBatch<Scalar>& x, const CroprModuleState<Scalar>& state,
                                      Index prune, const TaskTargets& targets, Rng* rng = nullptr);

}  // namespace cropr
