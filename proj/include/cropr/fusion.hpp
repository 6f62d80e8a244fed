// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reactivation of pruned tokens at the end of the network. Last Layer Fusion
// puts every pruned token back at its raster position before the final
// block; the remaining fusers are the comparison variants.

#pragma once

#include <string>
#include <vector>

#include "cropr/nn.hpp"
#include "cropr/tokens.hpp"
#include "cropr/vit.hpp"

namespace cropr {

/// Tokens removed by one module, captured at prune time.
template <typename Scalar>
struct PrunedStage {
  TokenBatch<Scalar> tokens;
  Index block = 0;  // 1-based block after which they were pruned
};

/// Full-grid sequence in raster order (CLS first) with provenance.
template <typename Scalar>
struct FusedTokens {
  TokenBatch<Scalar> tokens;
  PositionMatrix stage;  // [B,M]: 0 for tokens kept to the end, else the prune block
};

/// Reorders kept and pruned tokens into raster order. Throws FusionError
/// unless every position in [0, num_patches) appears exactly once per image
/// (plus CLS, which must come from `kept`).
template <typename Scalar>
FusedTokens<Scalar> fuse_by_position(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                     Index num_patches);

/// LLF: fuse_by_position on the tokens entering the final block, then that
/// block with DropPath off.
template <typename Scalar>
FusedTokens<Scalar> llf_fuse(const VisionTransformer<Scalar>& vit, const TokenBatch<Scalar>& kept,
                             const std::vector<PrunedStage<Scalar>>& stages, const BlockContext& ctx);

/// Token Concat: fuse_by_position on the output of the final block, no
/// further computation.
template <typename Scalar>
FusedTokens<Scalar> token_concat_fuse(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                      Index num_patches);

/// Cross-attention block with learned grid queries:
///   y = q + Attn(LN_q(q), LN_kv(x)),  out = y + MLP(LN(y)).
template <typename Scalar>
struct CrossAttnFuserParams {
  Tensor<Scalar> queries;  // [h*w, D]
  LayerNormParams<Scalar> norm_q;
  LayerNormParams<Scalar> norm_kv;
  AttentionParams<Scalar> attn;
  LayerNormParams<Scalar> norm2;
  MlpParams<Scalar> mlp;
};

template <typename Scalar>
CrossAttnFuserParams<Scalar> make_cross_attn_fuser(ParameterStore<Scalar>& store, const std::string& prefix,
                                                   Index grid_tokens, Index width, Index heads, Index mlp_hidden,
                                                   Rng& rng);
template <typename Scalar>
CrossAttnFuserParams<Scalar> bind_cross_attn_fuser(const ParameterStore<Scalar>& store, const std::string& prefix,
                                                   Index heads);

/// Grid queries attend into `context`; returns h*w tokens in raster order.
template <typename Scalar>
TokenBatch<Scalar> cross_attn_block(const TokenBatch<Scalar>& context, const CrossAttnFuserParams<Scalar>& p);

/// Cross-Attn: queries read only the kept tokens; pruned tokens are unused.
template <typename Scalar>
TokenBatch<Scalar> cross_attn_fuse(const TokenBatch<Scalar>& kept, const CrossAttnFuserParams<Scalar>& p);

/// Cross-Attn + Concat: queries read the full concatenated sequence.
template <typename Scalar>
FusedTokens<Scalar> cross_attn_concat_fuse(const TokenBatch<Scalar>& kept,
                                           const std::vector<PrunedStage<Scalar>>& stages, Index num_patches,
                                           const CrossAttnFuserParams<Scalar>& p);

/// MHSA + Concat: a separately initialised self-attention block over the
/// full concatenated sequence.
template <typename Scalar>
FusedTokens<Scalar> mhsa_concat_fuse(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                     Index num_patches, const BlockParams<Scalar>& block);

/// Per-stage auxiliary logits for one pruning module: grid logits
/// [B, num_patches, C] and the positions that module pruned.
template <typename Scalar>
struct StageLogits {
  Tensor<Scalar> grid;
  PositionMatrix positions;  // [B,R]
  Index block = 0;
};

/// DToP-style logit fusion: kept tokens take the final head's logits,
/// pruned tokens the logits of their stage's auxiliary head. Returns
/// [B, num_patches, C] in raster order.
template <typename Scalar>
Tensor<Scalar> dtop_logit_fuse(const Tensor<Scalar>& kept_logits, const PositionMatrix& kept_positions,
                               const std::vector<StageLogits<Scalar>>& stages, Index num_patches,
                               PositionMatrix* stage_out = nullptr);

}  // namespace cropr
