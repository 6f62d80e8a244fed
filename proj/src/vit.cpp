// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/vit.hpp"

#include <string>

namespace cropr {

void ViTConfig::validate() const {
  if (patch_size <= 0 || image_side <= 0 || image_side % patch_size != 0) {
    throw ConfigError("image side " + std::to_string(image_side) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (channels <= 0 || width <= 0 || heads <= 0 || width % heads != 0) {
    throw ConfigError("width must be positive and divisible by heads");
  }
  if (depth < 0 || mlp_ratio <= 0 || num_classes <= 0) throw ConfigError("invalid depth, mlp_ratio or num_classes");
  if (!droppath_rates.empty()) {
    if (static_cast<Index>(droppath_rates.size()) != depth) throw ConfigError("droppath_rates length must equal depth");
    for (double r : droppath_rates) {
      if (r < 0.0 || r >= 1.0) throw ConfigError("droppath rates must lie in [0, 1)");
    }
  }
  if (pooling == Pooling::Cls && !cls_token) throw ConfigError("CLS pooling requires a CLS token");
}

std::vector<double> ViTConfig::linear_droppath(Index depth, double max_rate) {
  std::vector<double> rates(static_cast<std::size_t>(depth), 0.0);
  for (Index i = 0; i < depth && depth > 1; ++i) {
    rates[static_cast<std::size_t>(i)] = max_rate * static_cast<double>(i) / static_cast<double>(depth - 1);
  }
  if (depth == 1) rates[0] = max_rate;
  return rates;
}

Eigen::MatrixXd extract_patches(const ImageBatch& images, Index patch_size) {
  if (images.height % patch_size != 0 || images.width % patch_size != 0) {
    throw ConfigError("image size is not divisible by the patch size");
  }
  const Index gh = images.height / patch_size, gw = images.width / patch_size;
  const Index per = images.channels * patch_size * patch_size;
  Eigen::MatrixXd out(images.batch * gh * gw, per);
  for (Index b = 0; b < images.batch; ++b)
    for (Index py = 0; py < gh; ++py)
      for (Index px = 0; px < gw; ++px) {
        const Index row = (b * gh + py) * gw + px;
        Index col = 0;
        for (Index c = 0; c < images.channels; ++c)
          for (Index dy = 0; dy < patch_size; ++dy)
            for (Index dx = 0; dx < patch_size; ++dx)
              out(row, col++) = images.at(b, c, py * patch_size + dy, px * patch_size + dx);
      }
  return out;
}

template <typename Scalar>
VisionTransformer<Scalar>::VisionTransformer(const ViTConfig& config, ParameterStore<Scalar>& store, Rng& rng)
    : config_(config) {
  config_.validate();
  const Index D = config_.width;
  const Index patch_dim = config_.channels * config_.patch_size * config_.patch_size;
  make_linear(store, "backbone.patch_embed", patch_dim, D, rng);
  store.add("backbone.pos_embed", trunc_normal<Scalar>({config_.num_patches(), D}, 0.02, rng));
  if (config_.cls_token) store.add("backbone.cls_token", trunc_normal<Scalar>({1, D}, 0.02, rng));
  for (Index i = 0; i < config_.depth; ++i) {
    make_block(store, "backbone.blocks." + std::to_string(i), D, config_.heads, config_.mlp_hidden(), rng);
  }
  make_layer_norm(store, "backbone.head_norm", D);
  make_linear(store, "backbone.head", D, config_.num_classes, rng);
  bind(store);
}

template <typename Scalar>
VisionTransformer<Scalar>::VisionTransformer(const ViTConfig& config, const ParameterStore<Scalar>& store)
    : config_(config) {
  config_.validate();
  bind(store);
}

template <typename Scalar>
void VisionTransformer<Scalar>::bind(const ParameterStore<Scalar>& store) {
  embed_ = bind_linear(store, "backbone.patch_embed");
  pos_embed_ = store.get("backbone.pos_embed");
  if (config_.cls_token) cls_ = store.get("backbone.cls_token");
  blocks_.clear();
  for (Index i = 0; i < config_.depth; ++i) {
    blocks_.push_back(bind_block(store, "backbone.blocks." + std::to_string(i), config_.heads));
  }
  head_norm_ = bind_layer_norm(store, "backbone.head_norm");
  head_ = bind_linear(store, "backbone.head");
}

template <typename Scalar>
TokenBatch<Scalar> VisionTransformer<Scalar>::patch_embed(const ImageBatch& images) const {
  if (images.channels != config_.channels || images.height != config_.image_side ||
      images.width != config_.image_side) {
    throw ConfigError("image batch does not match the model configuration");
  }
  const Index B = images.batch, M0 = config_.num_patches(), D = config_.width;
  Eigen::MatrixXd patches = extract_patches(images, config_.patch_size);
  RowMat<Scalar> p = patches.cast<Scalar>();
  auto x = apply(Tensor<Scalar>::from_matrix(p), embed_);
  x = add(reshape(x, {B, M0, D}), expand_batch(pos_embed_, B));
  TokenBatch<Scalar> out;
  out.positions.resize(B, M0 + (config_.cls_token ? 1 : 0));
  const Index offset = config_.cls_token ? 1 : 0;
  for (Index b = 0; b < B; ++b) {
    if (config_.cls_token) out.positions(b, 0) = kClsPosition;
    for (Index i = 0; i < M0; ++i) out.positions(b, offset + i) = i;
  }
  if (config_.cls_token) {
    x = concat(std::vector<Tensor<Scalar>>{expand_batch(cls_, B), x}, 1);
  }
  out.tokens = x;
  out.cls_present = config_.cls_token;
  return out;
}

template <typename Scalar>
TokenBatch<Scalar> VisionTransformer<Scalar>::block(const TokenBatch<Scalar>& x, Index index, const BlockContext& ctx,
                                                    AttentionCapture<Scalar>* capture) const {
  if (index < 0 || index >= config_.depth) throw IndexError("block index out of range");
  TokenBatch<Scalar> out = x;
  out.tokens = block_forward(x.tokens, blocks_[static_cast<std::size_t>(index)], ctx, capture);
  return out;
}

template <typename Scalar>
RowMat<Scalar> scores_from_attention(const AttentionCapture<Scalar>& capture, AttnScoreMode mode, bool cls_present) {
  if (mode == AttnScoreMode::Cls && !cls_present) {
    throw ContractError("CLS attention scores requested without a CLS token");
  }
  const Index B = static_cast<Index>(capture.probs.size());
  const Index M = B ? capture.probs.front().cols() : 0;
  RowMat<Scalar> scores(B, M);
  for (Index b = 0; b < B; ++b) {
    const auto& P = capture.probs[static_cast<std::size_t>(b)];
    if (mode == AttnScoreMode::Cls) {
      scores.row(b) = P.row(0);
    } else {
      scores.row(b) = P.colwise().mean();
    }
  }
  return scores;
}

template <typename Scalar>
RowMat<Scalar> VisionTransformer<Scalar>::self_attention_scores(const TokenBatch<Scalar>& x, Index index,
                                                                AttnScoreMode mode) const {
  if (mode == AttnScoreMode::Cls && !x.cls_present) {
    throw ContractError("CLS attention scores requested without a CLS token");
  }
  NoGradGuard no_grad;
  AttentionCapture<Scalar> capture;
  const auto& p = blocks_[static_cast<std::size_t>(index)];
  auto h = apply(x.tokens, p.norm1);
  attention(h, h, p.attn, &capture);
  return scores_from_attention(capture, mode, x.cls_present);
}

template <typename Scalar>
Tensor<Scalar> VisionTransformer<Scalar>::pool_and_head(const TokenBatch<Scalar>& x) const {
  const Index B = x.batch(), M = x.length(), D = x.width();
  Tensor<Scalar> pooled;
  if (config_.pooling == Pooling::Cls) {
    if (!x.cls_present) throw ContractError("CLS pooling without a CLS token");
    std::vector<Index> rows(static_cast<std::size_t>(B));
    for (Index b = 0; b < B; ++b) rows[static_cast<std::size_t>(b)] = b * M;
    pooled = gather_rows(reshape(x.tokens, {B * M, D}), std::span<const Index>(rows));
  } else if (x.cls_present) {
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(B * (M - 1)));
    for (Index b = 0; b < B; ++b)
      for (Index i = 1; i < M; ++i) rows.push_back(b * M + i);
    auto patches = reshape(gather_rows(reshape(x.tokens, {B * M, D}), std::span<const Index>(rows)), {B, M - 1, D});
    pooled = mean(patches, 1);
  } else {
    pooled = mean(x.tokens, 1);
  }
  return apply(apply(pooled, head_norm_), head_);
}

template <typename Scalar>
Tensor<Scalar> VisionTransformer<Scalar>::dense_head(const TokenBatch<Scalar>& x) const {
  const Index B = x.batch(), M = x.length(), D = x.width(), M0 = config_.num_patches();
  check_positions(x, M0);
  if (x.patch_count() != M0) throw ContractError("dense head needs every grid position");
  std::vector<Index> rows(static_cast<std::size_t>(B * M0));
  const Index offset = x.cls_present ? 1 : 0;
  for (Index b = 0; b < B; ++b)
    for (Index i = offset; i < M; ++i) rows[static_cast<std::size_t>(b * M0 + x.positions(b, i))] = b * M + i;
  auto ordered = reshape(gather_rows(reshape(x.tokens, {B * M, D}), std::span<const Index>(rows)), {B, M0, D});
  return apply(apply(ordered, head_norm_), head_);
}

template <typename Scalar>
Tensor<Scalar> VisionTransformer<Scalar>::token_head(const TokenBatch<Scalar>& x) const {
  return apply(apply(x.tokens, head_norm_), head_);
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template RowMat<float> scores_from_attention(const AttentionCapture<float>&, AttnScoreMode, bool);
template RowMat<double> scores_from_attention(const AttentionCapture<double>&, AttnScoreMode, bool);

}  // namespace cropr
