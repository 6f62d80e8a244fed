// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cropr/nn.hpp"

namespace cropr {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled weight decay Adam. Decay skips vectors (biases, norm
/// parameters) and the positional embedding and CLS token.
template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParameterStore<Scalar>& store, AdamWConfig config);
  /// One update with learning rate `lr`; parameters without a gradient are
  /// left untouched.
  void step(double lr);
  Index steps() const { return t_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  std::vector<bool> decay_;
  std::vector<Vec<double>> m_, v_;
  AdamWConfig config_;
  Index t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const ParameterStore<Scalar>& store, double max_norm);

/// Linear warmup then cosine decay to `min_lr`, evaluated per step.
double cosine_lr(double base_lr, double min_lr, Index step, Index warmup_steps, Index total_steps);

}  // namespace cropr
