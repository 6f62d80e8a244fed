// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/synth.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

#include <json.hpp>

namespace cropr {
namespace {

static_assert(std::endian::native == std::endian::little, "raw dumps assume a little-endian host");

Eigen::MatrixXd sign_matrix(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  Eigen::MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = coin(rng) ? 1.0 : -1.0;
  return m;
}

void fill_noise(ImageBatch& images, Index b, double stddev, Rng& rng) {
  std::normal_distribution<double> noise(0.0, stddev);
  const Index per = images.channels * images.height * images.width;
  for (Index i = 0; i < per; ++i) images.pixels[b * per + i] = noise(rng);
}

std::vector<Index> distinct_positions(Index total, Index count, Rng& rng) {
  std::vector<Index> all(static_cast<std::size_t>(total));
  std::iota(all.begin(), all.end(), Index{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(count));
  return all;
}

template <typename T>
void write_raw(std::ostream& os, const T* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}
template <typename T>
void read_raw(std::istream& is, T* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw FormatError("dataset file is truncated");
}

}  // namespace

void NeedleConfig::validate() const {
  if (patch_size <= 0 || image_side % patch_size != 0) throw ConfigError("needle image side must divide into patches");
  if (num_classes < 2) throw ConfigError("needle task needs at least two classes");
  if (num_informative < 1) throw ConfigError("needle task needs at least one informative patch");
  if (num_distractors < 0 || num_informative + num_distractors > num_patches()) {
    throw ConfigError("too many informative and distractor patches for the grid");
  }
}

void SegmentationConfig::validate() const {
  if (num_classes < 2) throw ConfigError("segmentation needs background plus one class");
  if (min_rect < 1 || max_rect < min_rect || max_rect > image_side) throw ConfigError("bad rectangle size range");
}

LabeledImages LabeledImages::slice(Index begin, Index count) const {
  std::vector<Index> rows(static_cast<std::size_t>(count));
  std::iota(rows.begin(), rows.end(), begin);
  return gather(rows);
}

LabeledImages LabeledImages::gather(const std::vector<Index>& rows) const {
  LabeledImages out;
  out.images = images.gather(rows);
  const Index n = static_cast<Index>(rows.size());
  if (!labels.empty()) {
    for (Index r : rows) out.labels.push_back(labels[static_cast<std::size_t>(r)]);
  }
  if (relevance.size() > 0) {
    out.relevance.resize(n, relevance.cols());
    for (Index i = 0; i < n; ++i) out.relevance.row(i) = relevance.row(rows[static_cast<std::size_t>(i)]);
  }
  if (pixel_labels.size() > 0) {
    const Index H = images.height;
    out.pixel_labels.resize(n * H, pixel_labels.cols());
    for (Index i = 0; i < n; ++i)
      out.pixel_labels.middleRows(i * H, H) = pixel_labels.middleRows(rows[static_cast<std::size_t>(i)] * H, H);
  }
  if (multilabel.size() > 0) {
    out.multilabel.resize(n, multilabel.cols());
    for (Index i = 0; i < n; ++i) out.multilabel.row(i) = multilabel.row(rows[static_cast<std::size_t>(i)]);
  }
  return out;
}

LabelGrid LabeledImages::label_map(Index b) const {
  if (pixel_labels.size() == 0) throw ContractError("dataset has no pixel labels");
  return pixel_labels.middleRows(b * images.height, images.height);
}

Eigen::MatrixXd needle_templates(const NeedleConfig& cfg) {
  return sign_matrix(cfg.num_classes, cfg.patch_dim(), cfg.template_seed);
}

void stamp_patch(ImageBatch& images, Index b, Index pos, Index patch_size, const Eigen::VectorXd& values) {
  const Index gw = images.width / patch_size;
  const Index py = pos / gw, px = pos % gw;
  Index k = 0;
  for (Index c = 0; c < images.channels; ++c)
    for (Index dy = 0; dy < patch_size; ++dy)
      for (Index dx = 0; dx < patch_size; ++dx) images.at(b, c, py * patch_size + dy, px * patch_size + dx) = values[k++];
}

LabeledImages gen_needle_classification(const NeedleConfig& cfg, Index count, std::uint64_t seed) {
  cfg.validate();
  const Eigen::MatrixXd templates = needle_templates(cfg);
  Rng rng(seed);
  std::uniform_int_distribution<int> pick_class(0, static_cast<int>(cfg.num_classes) - 1);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, cfg.signal_noise_std);
  LabeledImages out;
  out.images = ImageBatch::zeros(count, cfg.channels, cfg.image_side, cfg.image_side);
  out.relevance = MaskMatrix::Zero(count, cfg.num_patches());
  const Index P = cfg.patch_dim();
  Eigen::VectorXd values(P);
  for (Index b = 0; b < count; ++b) {
    const int label = pick_class(rng);
    out.labels.push_back(label);
    fill_noise(out.images, b, cfg.background_std, rng);
    const auto where = distinct_positions(cfg.num_patches(), cfg.num_informative + cfg.num_distractors, rng);
    for (Index k = 0; k < static_cast<Index>(where.size()); ++k) {
      const bool informative = k < cfg.num_informative;
      for (Index i = 0; i < P; ++i) {
        const double base = informative ? templates(label, i) : (coin(rng) ? 1.0 : -1.0);
        values[i] = base + noise(rng);
      }
      stamp_patch(out.images, b, where[static_cast<std::size_t>(k)], cfg.patch_size, values);
      if (informative) out.relevance(b, where[static_cast<std::size_t>(k)]) = 1;
    }
  }
  return out;
}

Eigen::MatrixXd segmentation_palette(const SegmentationConfig& cfg) {
  Rng rng(cfg.palette_seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd palette(cfg.num_classes, cfg.channels);
  palette.row(0).setZero();
  for (Index k = 1; k < cfg.num_classes; ++k)
    for (Index c = 0; c < cfg.channels; ++c) palette(k, c) = u(rng);
  return palette;
}

LabeledImages gen_toy_segmentation(const SegmentationConfig& cfg, Index count, std::uint64_t seed) {
  cfg.validate();
  const Eigen::MatrixXd palette = segmentation_palette(cfg);
  Rng rng(seed);
  const Index S = cfg.image_side;
  std::uniform_int_distribution<Index> n_rects(cfg.max_rects > 0 ? 1 : 0, cfg.max_rects);
  std::uniform_int_distribution<Index> pick_class(1, cfg.num_classes - 1);
  std::uniform_int_distribution<Index> side(cfg.min_rect, cfg.max_rect);
  std::normal_distribution<double> noise(0.0, cfg.texture_std);
  LabeledImages out;
  out.images = ImageBatch::zeros(count, cfg.channels, S, S);
  out.pixel_labels = LabelGrid::Zero(count * S, S);
  for (Index b = 0; b < count; ++b) {
    const Index rects = n_rects(rng);
    for (Index r = 0; r < rects; ++r) {
      const Index k = pick_class(rng), h = side(rng), w = side(rng);
      const Index y0 = std::uniform_int_distribution<Index>(0, S - h)(rng);
      const Index x0 = std::uniform_int_distribution<Index>(0, S - w)(rng);
      out.pixel_labels.block(b * S + y0, x0, h, w).setConstant(static_cast<int>(k));
    }
    for (Index c = 0; c < cfg.channels; ++c)
      for (Index y = 0; y < S; ++y)
        for (Index x = 0; x < S; ++x) out.images.at(b, c, y, x) = palette(out.pixel_labels(b * S + y, x), c) + noise(rng);
  }
  return out;
}

Eigen::MatrixXd multilabel_templates(const MultiLabelConfig& cfg) {
  return sign_matrix(cfg.num_classes, cfg.channels * cfg.patch_size * cfg.patch_size, cfg.template_seed);
}

LabeledImages gen_multilabel(const MultiLabelConfig& cfg, Index count, std::uint64_t seed) {
  if (cfg.image_side % cfg.patch_size != 0) throw ConfigError("image side must divide into patches");
  const Index grid = (cfg.image_side / cfg.patch_size) * (cfg.image_side / cfg.patch_size);
  if (cfg.num_classes > grid) throw ConfigError("more classes than patches");
  const Eigen::MatrixXd templates = multilabel_templates(cfg);
  Rng rng(seed);
  std::bernoulli_distribution present(cfg.presence);
  LabeledImages out;
  out.images = ImageBatch::zeros(count, cfg.channels, cfg.image_side, cfg.image_side);
  out.multilabel = Eigen::MatrixXd::Zero(count, cfg.num_classes);
  out.relevance = MaskMatrix::Zero(count, grid);
  for (Index b = 0; b < count; ++b) {
    fill_noise(out.images, b, cfg.background_std, rng);
    const auto where = distinct_positions(grid, cfg.num_classes, rng);
    for (Index k = 0; k < cfg.num_classes; ++k) {
      if (!present(rng)) continue;
      const Index pos = where[static_cast<std::size_t>(k)];
      stamp_patch(out.images, b, pos, cfg.patch_size, templates.row(k).transpose());
      out.multilabel(b, k) = 1.0;
      out.relevance(b, pos) = 1;
    }
  }
  return out;
}

double retention_recall(const PositionMatrix& final_positions, const MaskMatrix& relevance) {
  if (final_positions.rows() != relevance.rows()) throw ShapeError("keep set and relevance batch differ");
  Index total = 0, kept = 0;
  for (Index b = 0; b < relevance.rows(); ++b) {
    for (Index p = 0; p < relevance.cols(); ++p) total += relevance(b, p);
    for (Index k = 0; k < final_positions.cols(); ++k) {
      const Index p = final_positions(b, k);
      if (p >= 0 && p < relevance.cols()) kept += relevance(b, p);
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total);
}

void write_dataset(std::ostream& os, const LabeledImages& data, const std::string& kind, Index num_classes,
                   Index patch_size, const std::string& meta_json) {
  const auto& im = data.images;
  nlohmann::json header = {{"kind", kind},
                           {"count", im.batch},
                           {"channels", im.channels},
                           {"height", im.height},
                           {"width", im.width},
                           {"patch", patch_size},
                           {"num_classes", num_classes},
                           {"meta", meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json)}};
  os << "CROPRDS1\n" << header.dump() << '\n';
  const Index per = im.channels * im.height * im.width;
  const Index m0 = (im.height / patch_size) * (im.width / patch_size);
  for (Index b = 0; b < im.batch; ++b) {
    write_raw(os, im.pixels.data() + b * per, static_cast<std::size_t>(per));
    if (kind == "needle") {
      const auto label = static_cast<std::int32_t>(data.labels[static_cast<std::size_t>(b)]);
      write_raw(os, &label, 1);
      MaskMatrix row = data.relevance.row(b);
      write_raw(os, row.data(), static_cast<std::size_t>(m0));
    } else if (kind == "segmentation") {
      Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> map =
          data.label_map(b).cast<std::int32_t>();
      write_raw(os, map.data(), static_cast<std::size_t>(map.size()));
    } else if (kind == "multilabel") {
      for (Index k = 0; k < num_classes; ++k) {
        const auto bit = static_cast<std::uint8_t>(data.multilabel(b, k) > 0.5 ? 1 : 0);
        write_raw(os, &bit, 1);
      }
    } else {
      throw ConfigError("unknown dataset kind '" + kind + "'");
    }
  }
}

LabeledImages read_dataset(std::istream& is, std::string* kind_out) {
  std::string magic, line;
  std::getline(is, magic);
  if (magic != "CROPRDS1") throw FormatError("not a dataset file");
  std::getline(is, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset header: ") + e.what());
  }
  const std::string kind = h.at("kind");
  const Index count = h.at("count"), C = h.at("channels"), H = h.at("height"), W = h.at("width");
  const Index patch = h.at("patch"), num_classes = h.at("num_classes");
  LabeledImages out;
  out.images = ImageBatch::zeros(count, C, H, W);
  const Index per = C * H * W, m0 = (H / patch) * (W / patch);
  if (kind == "needle") out.relevance = MaskMatrix::Zero(count, m0);
  if (kind == "segmentation") out.pixel_labels = LabelGrid::Zero(count * H, W);
  if (kind == "multilabel") out.multilabel = Eigen::MatrixXd::Zero(count, num_classes);
  for (Index b = 0; b < count; ++b) {
    read_raw(is, out.images.pixels.data() + b * per, static_cast<std::size_t>(per));
    if (kind == "needle") {
      std::int32_t label = 0;
      read_raw(is, &label, 1);
      out.labels.push_back(label);
      MaskMatrix row(1, m0);
      read_raw(is, row.data(), static_cast<std::size_t>(m0));
      out.relevance.row(b) = row;
    } else if (kind == "segmentation") {
      Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> map(H, W);
      read_raw(is, map.data(), static_cast<std::size_t>(H * W));
      out.pixel_labels.middleRows(b * H, H) = map.cast<int>();
    } else if (kind == "multilabel") {
      for (Index k = 0; k < num_classes; ++k) {
        std::uint8_t bit = 0;
        read_raw(is, &bit, 1);
        out.multilabel(b, k) = bit;
      }
    } else {
      throw FormatError("unknown dataset kind '" + kind + "'");
    }
  }
  if (kind_out != nullptr) *kind_out = kind;
  return out;
}

}  // namespace cropr
