// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<Scalar>. Shapes must match exactly;
// the only broadcast is the bias vector of `linear`/`add_bias`.

#pragma once

#include <random>
#include <span>
#include <vector>

#include "cropr/tensor.hpp"

namespace cropr {

// Products.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
// [B,m,k] x [B,k,n] -> [B,m,n]; with transpose_b, b is [B,n,k].
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false);

// Elementwise.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
/// tanh approximation.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x);

// Reductions. `axis` may be negative.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, Index axis);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, Index axis);
template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x);

// Layout.
/// Swaps the last two axes.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);
/// Rows along axis 0, in the order given.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> rows);
/// Places row k of `x` at row rows[k] of a zero tensor with `num_rows` rows.
template <typename Scalar>
Tensor<Scalar> scatter_rows(const Tensor<Scalar>& x, std::span<const Index> rows, Index num_rows);
/// [N,...] -> [B,N,...]; the backward pass sums over the copies.
template <typename Scalar>
Tensor<Scalar> expand_batch(const Tensor<Scalar>& x, Index batch);
/// [B,M,D] -> [B*H,M,D/H].
template <typename Scalar>
Tensor<Scalar> split_heads(const Tensor<Scalar>& x, Index heads);
/// [B*H,M,Dh] -> [B,M,H*Dh].
template <typename Scalar>
Tensor<Scalar> merge_heads(const Tensor<Scalar>& x, Index heads);

// Normalisation and layers.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis);
/// Normalises over the last axis.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-6));
/// x[...,in] * weight[in,out] + bias[out]. `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias);

// Losses, mean-reduced.
inline constexpr int kIgnoreLabel = -1;
/// logits [B,C]; labels equal to kIgnoreLabel are skipped. All-ignored -> 0.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels);
/// Mean over every logit; targets are constants of the same shape.
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy_with_logits(const Tensor<Scalar>& logits,
                                                const Tensor<Scalar>& targets);

/// Forward identity; nothing flows back through the result.
template <typename Scalar>
Tensor<Scalar> stop_gradient(const Tensor<Scalar>& x);

/// Stochastic depth on the residual branch `x` ([B,...]): each sample is
/// zeroed with probability `rate` and survivors scaled by 1/(1-rate).
template <typename Scalar>
Tensor<Scalar> droppath(const Tensor<Scalar>& x, double rate, bool training, std::mt19937_64& rng);

}  // namespace cropr
