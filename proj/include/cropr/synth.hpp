// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic datasets whose token-level relevance is known exactly. Every
// generator is a pure function of its seed.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cropr/cropr_module.hpp"
#include "cropr/tokens.hpp"

namespace cropr {

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Needle task: each image hides `num_informative` copies of its class
/// template among `num_distractors` patches of fresh +-1 noise with the same
/// marginal statistics, on a low-variance background. Only the template
/// identity carries the label.
struct NeedleConfig {
  Index num_classes = 4;
  Index num_informative = 2;
  Index num_distractors = 30;
  Index image_side = 64;
  Index patch_size = 8;
  Index channels = 3;
  double background_std = 0.1;
  double signal_noise_std = 0.1;
  std::uint64_t template_seed = 1234;

  Index grid_side() const { return image_side / patch_size; }
  Index num_patches() const { return grid_side() * grid_side(); }
  Index patch_dim() const { return channels * patch_size * patch_size; }
  void validate() const;
};

struct LabeledImages {
  ImageBatch images;
  std::vector<int> labels;  // [B] class labels (needle)
  MaskMatrix relevance;     // [B, M0] informative patches
  LabelGrid pixel_labels;   // [B*H, W] stacked label maps (segmentation)
  Eigen::MatrixXd multilabel;  // [B, C] presence (multi-label)
  Index size() const { return images.batch; }
  /// Samples [begin, begin+count).
  LabeledImages slice(Index begin, Index count) const;
  LabeledImages gather(const std::vector<Index>& rows) const;
  /// Pixel label map of image b.
  LabelGrid label_map(Index b) const;
};

/// Class templates, [num_classes, C*p*p] of +-1, channel-major per patch.
Eigen::MatrixXd needle_templates(const NeedleConfig& cfg);
LabeledImages gen_needle_classification(const NeedleConfig& cfg, Index count, std::uint64_t seed);

/// Writes patch `pos` of image b from a flattened channel-major patch.
void stamp_patch(ImageBatch& images, Index b, Index pos, Index patch_size, const Eigen::VectorXd& values);

/// Toy segmentation: axis-aligned rectangles, one colour per class, on a
/// textured background (class 0).
struct SegmentationConfig {
  Index num_classes = 4;  // background included
  Index image_side = 64;
  Index channels = 3;
  Index max_rects = 3;
  Index min_rect = 8;
  Index max_rect = 28;
  double texture_std = 0.3;
  std::uint64_t palette_seed = 99;
  void validate() const;
};
/// Class colours, [num_classes, channels].
Eigen::MatrixXd segmentation_palette(const SegmentationConfig& cfg);
LabeledImages gen_toy_segmentation(const SegmentationConfig& cfg, Index count, std::uint64_t seed);

/// Multi-label: each class pattern is stamped into one patch with
/// probability 0.5; the target bit is set iff it was stamped.
struct MultiLabelConfig {
  Index num_classes = 4;
  Index image_side = 64;
  Index patch_size = 8;
  Index channels = 3;
  double background_std = 0.1;
  std::uint64_t template_seed = 4321;
  double presence = 0.5;
};
Eigen::MatrixXd multilabel_templates(const MultiLabelConfig& cfg);
LabeledImages gen_multilabel(const MultiLabelConfig& cfg, Index count, std::uint64_t seed);

/// Informative patches still present in the final keep set, over all
/// informative patches (micro-average). `final_positions` is [B,K].
double retention_recall(const PositionMatrix& final_positions, const MaskMatrix& relevance);

/// Dataset export. Layout is documented in docs/formats.md.
void write_dataset(std::ostream& os, const LabeledImages& data, const std::string& kind, Index num_classes,
                   Index patch_size, const std::string& meta_json);
LabeledImages read_dataset(std::istream& is, std::string* kind = nullptr);

}  // namespace cropr
