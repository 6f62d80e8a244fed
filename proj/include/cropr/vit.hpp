// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy Vision Transformer backbone: patch embedding with learned absolute
// positions, optional CLS token, pre-norm blocks and pooling heads.

#pragma once

#include <string>
#include <vector>

#include "cropr/nn.hpp"
#include "cropr/tokens.hpp"

namespace cropr {

enum class Pooling { Avg, Cls };
enum class AttnScoreMode { Cls, Avg };

struct ViTConfig {
  Index image_side = 64;
  Index patch_size = 8;
  Index channels = 3;
  Index depth = 8;
  Index width = 64;
  Index heads = 4;
  Index mlp_ratio = 4;
  std::vector<double> droppath_rates;  // per block; empty means all zero
  Pooling pooling = Pooling::Avg;
  bool cls_token = false;
  Index num_classes = 10;

  Index grid_side() const { return image_side / patch_size; }
  Index num_patches() const { return grid_side() * grid_side(); }
  Index mlp_hidden() const { return mlp_ratio * width; }
  double droppath_rate(Index block) const {
    return droppath_rates.empty() ? 0.0 : droppath_rates[static_cast<std::size_t>(block)];
  }
  /// Throws ConfigError on inconsistent settings.
  void validate() const;

  /// Rates spaced linearly from 0 at the first block to `max_rate` at the last.
  static std::vector<double> linear_droppath(Index depth, double max_rate);
};

template <typename Scalar>
class VisionTransformer {
 public:
  /// Registers freshly initialised parameters under "backbone.".
  VisionTransformer(const ViTConfig& config, ParameterStore<Scalar>& store, Rng& rng);
  /// Binds to parameters already present in `store`.
  VisionTransformer(const ViTConfig& config, const ParameterStore<Scalar>& store);

  const ViTConfig& config() const { return config_; }

  /// Patch tokens in raster order plus the learned positional embedding,
  /// preceded by CLS when configured.
  TokenBatch<Scalar> patch_embed(const ImageBatch& images) const;

  /// Block `index` (0-based). Positions pass through unchanged.
  TokenBatch<Scalar> block(const TokenBatch<Scalar>& x, Index index, const BlockContext& ctx,
                           AttentionCapture<Scalar>* capture = nullptr) const;
  const BlockParams<Scalar>& block_params(Index index) const { return blocks_[static_cast<std::size_t>(index)]; }

  /// Training-free relevance readout of block `index` attention on `x`
  /// (the block's input). Result is [B,M].
  RowMat<Scalar> self_attention_scores(const TokenBatch<Scalar>& x, Index index, AttnScoreMode mode) const;

  /// Pooled token (avg over patches, or CLS) -> LN -> linear. [B,C].
  Tensor<Scalar> pool_and_head(const TokenBatch<Scalar>& x) const;
  /// LN -> linear per token, rows placed by position. Requires every
  /// grid position exactly once. [B, num_patches, C].
  Tensor<Scalar> dense_head(const TokenBatch<Scalar>& x) const;
  /// LN -> linear per token in sequence order, [B,M,C].
  Tensor<Scalar> token_head(const TokenBatch<Scalar>& x) const;
  const LayerNormParams<Scalar>& head_norm() const { return head_norm_; }
  const LinearParams<Scalar>& head() const { return head_; }

 private:
  void bind(const ParameterStore<Scalar>& store);

  ViTConfig config_;
  LinearParams<Scalar> embed_;
  Tensor<Scalar> pos_embed_;  // [M0,D]
  Tensor<Scalar> cls_;        // [1,D]
  std::vector<BlockParams<Scalar>> blocks_;
  LayerNormParams<Scalar> head_norm_;
  LinearParams<Scalar> head_;
};

/// Turns captured head-averaged attention into per-token scores: the CLS row
/// (CLS mode) or the column means over queries (avg mode).
template <typename Scalar>
RowMat<Scalar> scores_from_attention(const AttentionCapture<Scalar>& capture, AttnScoreMode mode, bool cls_present);

/// Flattened patches, [B*M0, C*p*p], channel-major inside each patch.
Eigen::MatrixXd extract_patches(const ImageBatch& images, Index patch_size);

}  // namespace cropr
