// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "cropr/tensor.hpp"

namespace cropr {

/// Position carried by the CLS token; patch positions are raster indices.
inline constexpr Index kClsPosition = -1;

using PositionMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pixels of B images, [B,C,H,W] row-major.
struct ImageBatch {
  Index batch = 0;
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  Eigen::VectorXd pixels;

  static ImageBatch zeros(Index batch, Index channels, Index height, Index width);
  double& at(Index b, Index c, Index y, Index x) { return pixels[((b * channels + c) * height + y) * width + x]; }
  double at(Index b, Index c, Index y, Index x) const {
    return pixels[((b * channels + c) * height + y) * width + x];
  }
  /// Images [begin, begin+count).
  ImageBatch slice(Index begin, Index count) const;
  /// Images in the order of `rows`.
  ImageBatch gather(const std::vector<Index>& rows) const;
};

/// Per-image token sequences with the original raster position of every
/// token. Positions travel with their tokens through every routing step;
/// when present, the CLS token sits at index 0.
template <typename Scalar>
struct TokenBatch {
  Tensor<Scalar> tokens;     // [B,M,D]
  PositionMatrix positions;  // [B,M]
  bool cls_present = false;

  Index batch() const { return tokens.dim(0); }
  Index length() const { return tokens.dim(1); }
  Index width() const { return tokens.dim(2); }
  /// Tokens that are not CLS.
  Index patch_count() const { return length() - (cls_present ? 1 : 0); }
};

/// Keeps, per image b, the tokens at local indices rows(b, :), in that order.
template <typename Scalar>
TokenBatch<Scalar> select_tokens(const TokenBatch<Scalar>& x, const PositionMatrix& local_indices);

/// Joins sequences image by image along the token axis.
template <typename Scalar>
TokenBatch<Scalar> concat_tokens(const std::vector<TokenBatch<Scalar>>& parts);

/// Throws ContractError when positions repeat within an image or fall outside
/// [0, num_patches), or when CLS is flagged but not at index 0.
template <typename Scalar>
void check_positions(const TokenBatch<Scalar>& x, Index num_patches);

}  // namespace cropr
