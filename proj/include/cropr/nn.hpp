// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Parameter bookkeeping and the transformer building blocks shared by the
// backbone, the pruning modules and the fusion blocks.

#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cropr/ops.hpp"

namespace cropr {

using Rng = std::mt19937_64;

/// Named, ordered set of trainable leaves. Copies share the tensors.
template <typename Scalar>
class ParameterStore {
 public:
  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> tensor);
  const Tensor<Scalar>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total number of scalars.
  Index parameter_count() const;
  /// Scalars under names beginning with `prefix`.
  Index parameter_count(const std::string& prefix) const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Normal(0, std) resampled outside two standard deviations.
template <typename Scalar>
Tensor<Scalar> trunc_normal(Shape shape, double std, Rng& rng);

template <typename Scalar>
struct LayerNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;  // [in, out]
  Tensor<Scalar> bias;    // [out]
};

template <typename Scalar>
struct MlpParams {
  LinearParams<Scalar> fc1;
  LinearParams<Scalar> fc2;
};

template <typename Scalar>
struct AttentionParams {
  LinearParams<Scalar> query;
  LinearParams<Scalar> key;
  LinearParams<Scalar> value;
  LinearParams<Scalar> out;
  Index heads = 1;
};

/// Pre-norm transformer block.
template <typename Scalar>
struct BlockParams {
  LayerNormParams<Scalar> norm1;
  AttentionParams<Scalar> attn;
  LayerNormParams<Scalar> norm2;
  MlpParams<Scalar> mlp;
};

template <typename Scalar>
LayerNormParams<Scalar> make_layer_norm(ParameterStore<Scalar>& store, const std::string& prefix, Index width);
template <typename Scalar>
LinearParams<Scalar> make_linear(ParameterStore<Scalar>& store, const std::string& prefix, Index in, Index out,
                                 Rng& rng, bool zero_weight = false);
template <typename Scalar>
MlpParams<Scalar> make_mlp(ParameterStore<Scalar>& store, const std::string& prefix, Index width, Index hidden,
                           Rng& rng);
template <typename Scalar>
AttentionParams<Scalar> make_attention(ParameterStore<Scalar>& store, const std::string& prefix, Index width,
                                       Index heads, Rng& rng);
template <typename Scalar>
BlockParams<Scalar> make_block(ParameterStore<Scalar>& store, const std::string& prefix, Index width, Index heads,
                               Index mlp_hidden, Rng& rng);

/// Binds already-registered tensors (e.g. after loading a checkpoint).
template <typename Scalar>
LayerNormParams<Scalar> bind_layer_norm(const ParameterStore<Scalar>& store, const std::string& prefix);
template <typename Scalar>
LinearParams<Scalar> bind_linear(const ParameterStore<Scalar>& store, const std::string& prefix);
template <typename Scalar>
MlpParams<Scalar> bind_mlp(const ParameterStore<Scalar>& store, const std::string& prefix);
template <typename Scalar>
AttentionParams<Scalar> bind_attention(const ParameterStore<Scalar>& store, const std::string& prefix, Index heads);
template <typename Scalar>
BlockParams<Scalar> bind_block(const ParameterStore<Scalar>& store, const std::string& prefix, Index heads);

template <typename Scalar>
Tensor<Scalar> apply(const Tensor<Scalar>& x, const LayerNormParams<Scalar>& p) {
  return layer_norm(x, p.gamma, p.beta);
}
template <typename Scalar>
Tensor<Scalar> apply(const Tensor<Scalar>& x, const LinearParams<Scalar>& p) {
  return linear(x, p.weight, p.bias);
}
/// fc2(gelu(fc1(x))).
template <typename Scalar>
Tensor<Scalar> apply(const Tensor<Scalar>& x, const MlpParams<Scalar>& p) {
  return apply(gelu(apply(x, p.fc1)), p.fc2);
}

/// Head-averaged attention probabilities, one [Mq, Mk] matrix per image.
template <typename Scalar>
struct AttentionCapture {
  std::vector<RowMat<Scalar>> probs;
};

/// Multi-head attention of `queries` [B,Mq,D] into `context` [B,Mk,D].
template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& queries, const Tensor<Scalar>& context,
                         const AttentionParams<Scalar>& p, AttentionCapture<Scalar>* capture = nullptr);

struct BlockContext {
  bool training = false;
  double droppath_rate = 0.0;
  Rng* rng = nullptr;
};

/// x + DropPath(MHSA(LN(x))), then x + DropPath(MLP(LN(x))).
template <typename Scalar>
Tensor<Scalar> block_forward(const Tensor<Scalar>& x, const BlockParams<Scalar>& p, const BlockContext& ctx,
                             AttentionCapture<Scalar>* capture = nullptr);

}  // namespace cropr
