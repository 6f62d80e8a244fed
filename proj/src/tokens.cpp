// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/tokens.hpp"

#include <string>

#include "cropr/ops.hpp"

namespace cropr {

ImageBatch ImageBatch::zeros(Index batch, Index channels, Index height, Index width) {
  ImageBatch img;
  img.batch = batch;
  img.channels = channels;
  img.height = height;
  img.width = width;
  img.pixels = Eigen::VectorXd::Zero(batch * channels * height * width);
  return img;
}

ImageBatch ImageBatch::slice(Index begin, Index count) const {
  if (begin < 0 || count < 0 || begin + count > batch) throw IndexError("ImageBatch::slice out of range");
  ImageBatch out = zeros(count, channels, height, width);
  const Index per = channels * height * width;
  out.pixels = pixels.segment(begin * per, count * per);
  return out;
}

ImageBatch ImageBatch::gather(const std::vector<Index>& rows) const {
  const Index per = channels * height * width;
  ImageBatch out = zeros(static_cast<Index>(rows.size()), channels, height, width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= batch) throw IndexError("ImageBatch::gather out of range");
    out.pixels.segment(static_cast<Index>(i) * per, per) = pixels.segment(rows[i] * per, per);
  }
  return out;
}

template <typename Scalar>
TokenBatch<Scalar> select_tokens(const TokenBatch<Scalar>& x, const PositionMatrix& local_indices) {
  const Index B = x.batch(), M = x.length(), D = x.width();
  if (local_indices.rows() != B) throw ShapeError("select_tokens: index rows do not match batch");
  const Index K = local_indices.cols();
  std::vector<Index> rows(static_cast<std::size_t>(B * K));
  PositionMatrix positions(B, K);
  for (Index b = 0; b < B; ++b) {
    for (Index k = 0; k < K; ++k) {
      const Index i = local_indices(b, k);
      if (i < 0 || i >= M) throw IndexError("select_tokens: token index " + std::to_string(i) + " out of range");
      rows[static_cast<std::size_t>(b * K + k)] = b * M + i;
      positions(b, k) = x.positions(b, i);
    }
  }
  auto flat = reshape(x.tokens, {B * M, D});
  TokenBatch<Scalar> out;
  out.tokens = reshape(gather_rows(flat, std::span<const Index>(rows)), {B, K, D});
  out.positions = std::move(positions);
  out.cls_present = x.cls_present && K > 0 && out.positions(0, 0) == kClsPosition;
  return out;
}

template <typename Scalar>
TokenBatch<Scalar> concat_tokens(const std::vector<TokenBatch<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_tokens: nothing to join");
  std::vector<Tensor<Scalar>> tensors;
  Index total = 0;
  for (const auto& p : parts) {
    if (p.batch() != parts.front().batch()) throw ShapeError("concat_tokens: batch sizes differ");
    tensors.push_back(p.tokens);
    total += p.length();
  }
  TokenBatch<Scalar> out;
  out.tokens = concat(tensors, 1);
  out.positions.resize(parts.front().batch(), total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.positions.middleCols(offset, p.length()) = p.positions;
    offset += p.length();
  }
  out.cls_present = total > 0 && out.positions(0, 0) == kClsPosition;
  return out;
}

template <typename Scalar>
void check_positions(const TokenBatch<Scalar>& x, Index num_patches) {
  for (Index b = 0; b < x.positions.rows(); ++b) {
    std::vector<bool> seen(static_cast<std::size_t>(num_patches), false);
    bool cls_seen = false;
    for (Index i = 0; i < x.positions.cols(); ++i) {
      const Index p = x.positions(b, i);
      if (p == kClsPosition) {
        if (cls_seen || i != 0 || !x.cls_present) throw ContractError("CLS token must appear once, at index 0");
        cls_seen = true;
        continue;
      }
      if (p < 0 || p >= num_patches) throw ContractError("token position " + std::to_string(p) + " out of range");
      if (seen[static_cast<std::size_t>(p)]) throw ContractError("duplicate token position " + std::to_string(p));
      seen[static_cast<std::size_t>(p)] = true;
    }
  }
}

#define CROPR_INSTANTIATE_TOKENS(S)                                                        \
  template TokenBatch<S> select_tokens(const TokenBatch<S>&, const PositionMatrix&);       \
  template TokenBatch<S> concat_tokens(const std::vector<TokenBatch<S>>&);                 \
  template void check_positions(const TokenBatch<S>&, Index);

CROPR_INSTANTIATE_TOKENS(float)
CROPR_INSTANTIATE_TOKENS(double)

#undef CROPR_INSTANTIATE_TOKENS

}  // namespace cropr
