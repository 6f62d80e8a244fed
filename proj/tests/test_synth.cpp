// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data: relevance masks, Bayes-recoverability oracles, recall,
// and the on-disk format.

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "cropr/cropr_module.hpp"
#include "cropr/selectors.hpp"
#include "cropr/synth.hpp"

using namespace cropr;

namespace {

Eigen::VectorXd read_patch(const ImageBatch& im, Index b, Index pos, Index p) {
  const Index g = im.width / p, py = pos / g, px = pos % g;
  Eigen::VectorXd v(im.channels * p * p);
  Index k = 0;
  for (Index c = 0; c < im.channels; ++c)
    for (Index y = 0; y < p; ++y)
      for (Index x = 0; x < p; ++x) v[k++] = im.at(b, c, py * p + y, px * p + x);
  return v;
}

NeedleConfig needle() {
  NeedleConfig c;
  c.num_classes = 16;
  c.num_informative = 2;
  c.num_distractors = 29;
  c.signal_noise_std = 0.3;
  return c;
}

}  // namespace

TEST_CASE("needle masks and reproducibility") {
  auto cfg = needle();
  auto d = gen_needle_classification(cfg, 64, 7);
  for (Index b = 0; b < 64; ++b) CHECK(d.relevance.row(b).cast<Index>().sum() == cfg.num_informative);
  auto again = gen_needle_classification(cfg, 64, 7);
  CHECK(d.images.pixels == again.images.pixels);
  CHECK(d.labels == again.labels);
  CHECK(gen_needle_classification(cfg, 64, 8).images.pixels != d.images.pixels);
  for (int l : d.labels) CHECK((l >= 0 && l < cfg.num_classes));
}

TEST_CASE("mask-restricted nearest-centroid oracle recovers the label") {
  auto cfg = needle();
  const Index P = cfg.patch_size;
  auto train = gen_needle_classification(cfg, 800, 1);
  auto test = gen_needle_classification(cfg, 400, 2);
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(cfg.num_classes, cfg.patch_dim());
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(cfg.num_classes);
  for (Index b = 0; b < train.size(); ++b)
    for (Index p = 0; p < cfg.num_patches(); ++p)
      if (train.relevance(b, p)) {
        centroids.row(train.labels[b]) += read_patch(train.images, b, p, P).transpose();
        counts[train.labels[b]] += 1;
      }
  for (Index k = 0; k < cfg.num_classes; ++k) centroids.row(k) /= std::max(1.0, counts[k]);

  auto classify = [&](const LabeledImages& d, Index b) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.patch_dim());
    for (Index p = 0; p < cfg.num_patches(); ++p)
      if (d.relevance(b, p)) mean += read_patch(d.images, b, p, P);
    Index best = 0;
    (centroids.rowwise() - mean.transpose()).rowwise().squaredNorm().minCoeff(&best);
    return static_cast<int>(best);
  };
  int correct = 0;
  for (Index b = 0; b < test.size(); ++b) correct += classify(test, b) == test.labels[b];
  CHECK(correct / static_cast<double>(test.size()) >= 0.99);

  // Shuffling the non-informative patches leaves the oracle's answer alone.
  Rng rng(3);
  auto shuffled = test.slice(0, 50);
  for (Index b = 0; b < shuffled.size(); ++b) {
    std::vector<Index> noise;
    for (Index p = 0; p < cfg.num_patches(); ++p)
      if (!shuffled.relevance(b, p)) noise.push_back(p);
    auto moved = noise;
    std::shuffle(moved.begin(), moved.end(), rng);
    std::vector<Eigen::VectorXd> saved;
    for (Index p : noise) saved.push_back(read_patch(shuffled.images, b, p, P));
    for (std::size_t i = 0; i < noise.size(); ++i) stamp_patch(shuffled.images, b, moved[i], P, saved[i]);
    CHECK(classify(shuffled, b) == classify(test, b));
  }
}

TEST_CASE("toy segmentation geometry") {
  SegmentationConfig cfg;
  cfg.max_rects = 0;
  auto bg = gen_toy_segmentation(cfg, 4, 1);
  CHECK((bg.pixel_labels.array() == 0).all());

  cfg.max_rects = 1;
  cfg.min_rect = cfg.max_rect = 10;
  auto one = gen_toy_segmentation(cfg, 20, 2);
  for (Index b = 0; b < 20; ++b) {
    auto map = one.label_map(b);
    CHECK((map.array() != 0).count() == 100);
  }
  // Pixel colours come from the labelled class.
  cfg.texture_std = 0.0;
  auto clean = gen_toy_segmentation(cfg, 5, 3);
  auto palette = segmentation_palette(cfg);
  for (Index b = 0; b < 5; ++b) {
    auto map = clean.label_map(b);
    for (Index y = 0; y < 64; y += 7)
      for (Index x = 0; x < 64; x += 5) CHECK(clean.images.at(b, 1, y, x) == palette(map(y, x), 1));
  }
}

TEST_CASE("multi-label targets and a template-correlation oracle") {
  MultiLabelConfig cfg;
  cfg.presence = 0.0;
  CHECK(gen_multilabel(cfg, 5, 1).multilabel.isZero());
  cfg.presence = 1.0;
  CHECK((gen_multilabel(cfg, 5, 1).multilabel.array() == 1.0).all());

  cfg.presence = 0.5;
  auto d = gen_multilabel(cfg, 300, 2);
  auto tmpl = multilabel_templates(cfg);
  const Index grid = (cfg.image_side / cfg.patch_size) * (cfg.image_side / cfg.patch_size);
  for (Index k = 0; k < cfg.num_classes; ++k) {
    std::vector<std::pair<double, int>> scored;
    for (Index b = 0; b < d.size(); ++b) {
      double best = -1e300;
      for (Index p = 0; p < grid; ++p) best = std::max(best, tmpl.row(k).dot(read_patch(d.images, b, p, cfg.patch_size)));
      scored.push_back({best, static_cast<int>(d.multilabel(b, k))});
    }
    // AUC by pair counting.
    double pos = 0, neg = 0, wins = 0;
    for (auto& a : scored)
      for (auto& b : scored)
        if (a.second == 1 && b.second == 0) wins += a.first > b.first ? 1.0 : (a.first == b.first ? 0.5 : 0.0);
    for (auto& a : scored) (a.second ? pos : neg) += 1;
    CHECK(wins / (pos * neg) >= 0.99);
  }
}

TEST_CASE("retention recall") {
  MaskMatrix mask = MaskMatrix::Zero(2, 6);
  mask(0, 1) = mask(0, 4) = mask(1, 0) = 1;
  PositionMatrix all(2, 6);
  all << 0, 1, 2, 3, 4, 5, 5, 4, 3, 2, 1, 0;
  CHECK(retention_recall(all, mask) == 1.0);
  PositionMatrix cls_only = PositionMatrix::Constant(2, 1, kClsPosition);
  CHECK(retention_recall(cls_only, mask) == 0.0);
  PositionMatrix some(2, 2);
  some << 1, 2, 3, 5;
  CHECK(retention_recall(some, mask) == doctest::Approx(1.0 / 3));

  // Random selector: recall tracks the keep ratio.
  auto cfg = needle();
  auto d = gen_needle_classification(cfg, 200, 4);
  TokenBatch<double> x;
  x.tokens = TensorD::zeros({200, cfg.num_patches(), 1});
  x.positions.resize(200, cfg.num_patches());
  for (Index b = 0; b < 200; ++b)
    for (Index p = 0; p < cfg.num_patches(); ++p) x.positions(b, p) = p;
  Rng rng(5);
  const Index keep = 16;
  auto r = select_topk(x, random_score<double>(200, cfg.num_patches(), rng), keep);
  CHECK(std::abs(retention_recall(r.keep.positions, d.relevance) - keep / 64.0) <= 0.05);
}

TEST_CASE("dataset round trip") {
  auto d = gen_needle_classification(needle(), 6, 9);
  std::stringstream ss;
  write_dataset(ss, d, "needle", 16, 8, R"({"seed": 9})");
  std::string kind;
  auto back = read_dataset(ss, &kind);
  CHECK(kind == "needle");
  CHECK(back.images.pixels == d.images.pixels);
  CHECK(back.labels == d.labels);
  CHECK(back.relevance == d.relevance);

  auto seg = gen_toy_segmentation(SegmentationConfig{}, 3, 1);
  std::stringstream s2;
  write_dataset(s2, seg, "segmentation", 4, 8, "");
  auto seg_back = read_dataset(s2);
  CHECK(seg_back.pixel_labels == seg.pixel_labels);

  std::stringstream bad("NOTADATASET\n");
  CHECK_THROWS(read_dataset(bad));
}
