// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/selectors.hpp"

#include <cmath>
#include <limits>

namespace cropr {

template <typename Scalar>
RowMat<Scalar> random_score(Index batch, Index length, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  RowMat<Scalar> s(batch, length);
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < length; ++i) s(b, i) = static_cast<Scalar>(uniform(rng));
  return s;
}

Eigen::MatrixXd variance_score(const ImageBatch& images, Index patch_size) {
  const Eigen::MatrixXd patches = extract_patches(images, patch_size);  // channel-major inside a patch
  const Index per_channel = patch_size * patch_size;
  const Index m0 = patches.rows() / std::max<Index>(images.batch, 1);
  Eigen::MatrixXd out(images.batch, m0);
  for (Index row = 0; row < patches.rows(); ++row) {
    double total = 0.0;
    for (Index c = 0; c < images.channels; ++c) {
      const auto seg = patches.row(row).segment(c * per_channel, per_channel).array();
      total += (seg - seg.mean()).square().mean();
    }
    out(row / m0, row % m0) = total / static_cast<double>(images.channels);
  }
  return out;
}

template <typename Scalar>
RowMat<Scalar> scores_at_positions(const Eigen::MatrixXd& table, const TokenBatch<Scalar>& x) {
  const Index B = x.batch(), M = x.length();
  if (table.rows() != B) throw ShapeError("score table rows do not match the batch");
  RowMat<Scalar> s(B, M);
  for (Index b = 0; b < B; ++b) {
    for (Index i = 0; i < M; ++i) {
      const Index p = x.positions(b, i);
      if (p == kClsPosition) {
        s(b, i) = std::numeric_limits<Scalar>::infinity();
      } else {
        if (p < 0 || p >= table.cols()) throw IndexError("token position outside the score table");
        s(b, i) = static_cast<Scalar>(table(b, p));
      }
    }
  }
  return s;
}

template <typename Scalar>
RowMat<Scalar> invert(const RowMat<Scalar>& scores) {
  RowMat<Scalar> out = -scores;
  for (Index i = 0; i < out.size(); ++i) {
    if (std::isinf(scores.data()[i]) && scores.data()[i] > 0) out.data()[i] = scores.data()[i];
  }
  return out;
}

#define CROPR_INSTANTIATE_SELECTORS(S)                                                  \
  template RowMat<S> random_score<S>(Index, Index, Rng&);                               \
  template RowMat<S> scores_at_positions(const Eigen::MatrixXd&, const TokenBatch<S>&); \
  template RowMat<S> invert(const RowMat<S>&);

CROPR_INSTANTIATE_SELECTORS(float)
CROPR_INSTANTIATE_SELECTORS(double)

#undef CROPR_INSTANTIATE_SELECTORS

}  // namespace cropr
