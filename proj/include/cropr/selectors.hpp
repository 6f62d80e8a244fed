// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training-free token scorers used as comparison baselines. All of them
// produce scores that go through select_topk, so CLS handling and
// tie-breaking are shared with the learned router.

#pragma once

#include "cropr/nn.hpp"
#include "cropr/tokens.hpp"
#include "cropr/vit.hpp"

namespace cropr {

/// I.i.d. uniform scores in [0,1), [B,M].
template <typename Scalar>
RowMat<Scalar> random_score(Index batch, Index length, Rng& rng);

/// Per-patch pixel variance (population), averaged over channels. [B, M0]
/// indexed by raster position. Computed once per image; stages look scores
/// up by position with scores_at_positions.
Eigen::MatrixXd variance_score(const ImageBatch& images, Index patch_size);

/// Scores of the current tokens from a per-position table [B, M0]. CLS
/// rows get +inf.
template <typename Scalar>
RowMat<Scalar> scores_at_positions(const Eigen::MatrixXd& table, const TokenBatch<Scalar>& x);

/// Self-attention readout of block `block_index` (0-based) on its input.
template <typename Scalar>
RowMat<Scalar> attn_topk_score(const VisionTransformer<Scalar>& vit, const TokenBatch<Scalar>& x, Index block_index,
                               AttnScoreMode mode) {
  return vit.self_attention_scores(x, block_index, mode);
}

/// Non-salient selector: negated scores, so Top-K prunes the most relevant
/// tokens. CLS keeps +inf.
template <typename Scalar>
RowMat<Scalar> invert(const RowMat<Scalar>& scores);

}  // namespace cropr
