// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/fusion.hpp"

#include <string>

namespace cropr {
namespace {

void place(PositionMatrix& slot_of, Index b, Index position, Index source, Index offset) {
  const Index slot = position == kClsPosition ? 0 : position + offset;
  if (slot < 0 || slot >= slot_of.cols() || (position != kClsPosition && position < 0)) {
    throw FusionError("token position " + std::to_string(position) + " outside the patch grid");
  }
  if (slot_of(b, slot) != -1) throw FusionError("position " + std::to_string(position) + " appears twice");
  slot_of(b, slot) = source;
}

void require_complete(const PositionMatrix& slot_of) {
  for (Index b = 0; b < slot_of.rows(); ++b)
    for (Index s = 0; s < slot_of.cols(); ++s)
      if (slot_of(b, s) == -1) throw FusionError("fused sequence is missing a position");
}

}  // namespace

template <typename Scalar>
FusedTokens<Scalar> fuse_by_position(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                     Index num_patches) {
  std::vector<TokenBatch<Scalar>> parts{kept};
  for (const auto& s : stages) {
    if (s.tokens.cls_present) throw FusionError("CLS token cannot be pruned");
    if (s.tokens.length() > 0) parts.push_back(s.tokens);
  }
  for (const auto& p : parts) {
    if (p.batch() != kept.batch() || p.width() != kept.width()) throw FusionError("stage shapes do not match");
  }
  const Index B = kept.batch();
  const Index offset = kept.cls_present ? 1 : 0;
  // Stage tag of every token of the concatenated sequence.
  std::vector<Index> tag(static_cast<std::size_t>(kept.length()), 0);
  for (const auto& s : stages) tag.insert(tag.end(), static_cast<std::size_t>(s.tokens.length()), s.block);

  auto all = parts.size() == 1 ? kept : concat_tokens(parts);
  PositionMatrix slot_of = PositionMatrix::Constant(B, num_patches + offset, -1);
  for (Index b = 0; b < B; ++b) {
    for (Index i = 0; i < all.length(); ++i) {
      const Index pos = all.positions(b, i);
      if (pos == kClsPosition && (!kept.cls_present || i != 0)) throw FusionError("unexpected CLS token");
      place(slot_of, b, pos, i, offset);
    }
  }
  require_complete(slot_of);
  FusedTokens<Scalar> out;
  out.tokens = select_tokens(all, slot_of);
  out.tokens.cls_present = kept.cls_present;
  out.stage.resize(B, slot_of.cols());
  for (Index b = 0; b < B; ++b)
    for (Index s = 0; s < slot_of.cols(); ++s) out.stage(b, s) = tag[static_cast<std::size_t>(slot_of(b, s))];
  return out;
}

template <typename Scalar>
FusedTokens<Scalar> llf_fuse(const VisionTransformer<Scalar>& vit, const TokenBatch<Scalar>& kept,
                             const std::vector<PrunedStage<Scalar>>& stages, const BlockContext& ctx) {
  const auto& cfg = vit.config();
  if (cfg.depth < 1) throw FusionError("last layer fusion needs at least one block");
  auto fused = fuse_by_position(kept, stages, cfg.num_patches());
  BlockContext last = ctx;
  last.droppath_rate = 0.0;
  fused.tokens = vit.block(fused.tokens, cfg.depth - 1, last);
  return fused;
}

template <typename Scalar>
FusedTokens<Scalar> token_concat_fuse(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                      Index num_patches) {
  return fuse_by_position(kept, stages, num_patches);
}

template <typename Scalar>
CrossAttnFuserParams<Scalar> make_cross_attn_fuser(ParameterStore<Scalar>& store, const std::string& prefix,
                                                   Index grid_tokens, Index width, Index heads, Index mlp_hidden,
                                                   Rng& rng) {
  store.add(prefix + ".queries", trunc_normal<Scalar>({grid_tokens, width}, 0.02, rng));
  make_layer_norm(store, prefix + ".norm_q", width);
  make_layer_norm(store, prefix + ".norm_kv", width);
  make_attention(store, prefix + ".attn", width, heads, rng);
  make_layer_norm(store, prefix + ".norm2", width);
  make_mlp(store, prefix + ".mlp", width, mlp_hidden, rng);
  return bind_cross_attn_fuser(store, prefix, heads);
}

template <typename Scalar>
CrossAttnFuserParams<Scalar> bind_cross_attn_fuser(const ParameterStore<Scalar>& store, const std::string& prefix,
                                                   Index heads) {
  CrossAttnFuserParams<Scalar> p;
  p.queries = store.get(prefix + ".queries");
  p.norm_q = bind_layer_norm(store, prefix + ".norm_q");
  p.norm_kv = bind_layer_norm(store, prefix + ".norm_kv");
  p.attn = bind_attention(store, prefix + ".attn", heads);
  p.norm2 = bind_layer_norm(store, prefix + ".norm2");
  p.mlp = bind_mlp(store, prefix + ".mlp");
  return p;
}

template <typename Scalar>
TokenBatch<Scalar> cross_attn_block(const TokenBatch<Scalar>& context, const CrossAttnFuserParams<Scalar>& p) {
  const Index B = context.batch(), G = p.queries.dim(0);
  auto q = expand_batch(p.queries, B);
  auto y = add(q, attention(apply(q, p.norm_q), apply(context.tokens, p.norm_kv), p.attn));
  TokenBatch<Scalar> out;
  out.tokens = add(y, apply(apply(y, p.norm2), p.mlp));
  out.positions.resize(B, G);
  for (Index b = 0; b < B; ++b)
    for (Index g = 0; g < G; ++g) out.positions(b, g) = g;
  out.cls_present = false;
  return out;
}

template <typename Scalar>
TokenBatch<Scalar> cross_attn_fuse(const TokenBatch<Scalar>& kept, const CrossAttnFuserParams<Scalar>& p) {
  return cross_attn_block(kept, p);
}

template <typename Scalar>
FusedTokens<Scalar> cross_attn_concat_fuse(const TokenBatch<Scalar>& kept,
                                           const std::vector<PrunedStage<Scalar>>& stages, Index num_patches,
                                           const CrossAttnFuserParams<Scalar>& p) {
  auto fused = fuse_by_position(kept, stages, num_patches);
  fused.tokens = cross_attn_block(fused.tokens, p);
  if (kept.cls_present) fused.stage = fused.stage.rightCols(fused.stage.cols() - 1).eval();
  return fused;
}

template <typename Scalar>
FusedTokens<Scalar> mhsa_concat_fuse(const TokenBatch<Scalar>& kept, const std::vector<PrunedStage<Scalar>>& stages,
                                     Index num_patches, const BlockParams<Scalar>& block) {
  auto fused = fuse_by_position(kept, stages, num_patches);
  fused.tokens.tokens = block_forward(fused.tokens.tokens, block, BlockContext{});
  return fused;
}

template <typename Scalar>
Tensor<Scalar> dtop_logit_fuse(const Tensor<Scalar>& kept_logits, const PositionMatrix& kept_positions,
                               const std::vector<StageLogits<Scalar>>& stages, Index num_patches,
                               PositionMatrix* stage_out) {
  if (kept_logits.rank() != 3) throw ShapeError("kept logits must be [B,K,C]");
  const Index B = kept_logits.dim(0), K = kept_logits.dim(1), C = kept_logits.dim(2);
  if (kept_positions.rows() != B || kept_positions.cols() != K) throw ShapeError("kept positions must be [B,K]");
  // Rows of the concatenation [kept logits; stage grids] feeding each cell.
  std::vector<Tensor<Scalar>> sources{reshape(kept_logits, {B * K, C})};
  std::vector<Index> base{0};
  Index total = B * K;
  for (const auto& s : stages) {
    if (s.grid.rank() != 3 || s.grid.dim(0) != B || s.grid.dim(1) != num_patches || s.grid.dim(2) != C) {
      throw ShapeError("stage logits must be [B, num_patches, C]");
    }
    sources.push_back(reshape(s.grid, {B * num_patches, C}));
    base.push_back(total);
    total += B * num_patches;
  }
  PositionMatrix source_of = PositionMatrix::Constant(B, num_patches, -1);
  PositionMatrix stage = PositionMatrix::Zero(B, num_patches);
  for (Index b = 0; b < B; ++b) {
    for (Index k = 0; k < K; ++k) {
      const Index pos = kept_positions(b, k);
      if (pos == kClsPosition) continue;
      place(source_of, b, pos, b * K + k, 0);
    }
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      if (st.positions.rows() != B) throw ShapeError("stage positions must be [B,R]");
      for (Index r = 0; r < st.positions.cols(); ++r) {
        const Index pos = st.positions(b, r);
        if (pos == kClsPosition) throw FusionError("CLS token cannot be pruned");
        place(source_of, b, pos, base[s + 1] + b * num_patches + pos, 0);
        stage(b, pos) = st.block;
      }
    }
  }
  require_complete(source_of);
  if (stage_out != nullptr) *stage_out = stage;
  std::vector<Index> rows(source_of.data(), source_of.data() + source_of.size());
  auto all = sources.size() == 1 ? sources.front() : concat(sources, 0);
  return reshape(gather_rows(all, std::span<const Index>(rows)), {B, num_patches, C});
}

#define CROPR_INSTANTIATE_FUSION(S)                                                                                  \
  template FusedTokens<S> fuse_by_position(const TokenBatch<S>&, const std::vector<PrunedStage<S>>&, Index);         \
  template FusedTokens<S> llf_fuse(const VisionTransformer<S>&, const TokenBatch<S>&,                                \
                                   const std::vector<PrunedStage<S>>&, const BlockContext&);                         \
  template FusedTokens<S> token_concat_fuse(const TokenBatch<S>&, const std::vector<PrunedStage<S>>&, Index);        \
  template CrossAttnFuserParams<S> make_cross_attn_fuser(ParameterStore<S>&, const std::string&, Index, Index, Index, \
                                                         Index, Rng&);                                               \
  template CrossAttnFuserParams<S> bind_cross_attn_fuser(const ParameterStore<S>&, const std::string&, Index);       \
  template TokenBatch<S> cross_attn_block(const TokenBatch<S>&, const CrossAttnFuserParams<S>&);                     \
  template TokenBatch<S> cross_attn_fuse(const TokenBatch<S>&, const CrossAttnFuserParams<S>&);                      \
  template FusedTokens<S> cross_attn_concat_fuse(const TokenBatch<S>&, const std::vector<PrunedStage<S>>&, Index,    \
                                                 const CrossAttnFuserParams<S>&);                                    \
  template FusedTokens<S> mhsa_concat_fuse(const TokenBatch<S>&, const std::vector<PrunedStage<S>>&, Index,          \
                                           const BlockParams<S>&);                                                   \
  template Tensor<S> dtop_logit_fuse(const Tensor<S>&, const PositionMatrix&, const std::vector<StageLogits<S>>&,    \
                                     Index, PositionMatrix*);

CROPR_INSTANTIATE_FUSION(float)
CROPR_INSTANTIATE_FUSION(double)

#undef CROPR_INSTANTIATE_FUSION

}  // namespace cropr
