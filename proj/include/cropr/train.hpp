// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training and evaluation loops over the synthetic tasks.

#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "cropr/model.hpp"
#include "cropr/optim.hpp"

namespace cropr {

struct Datasets {
  LabeledImages train;
  LabeledImages test;
  std::vector<int> train_patch_labels;  // segmentation only
  std::vector<int> test_patch_labels;
};

/// Generates `count` samples of the configured task from `seed`.
LabeledImages generate_task(const TaskSpec& task, Index count, std::uint64_t seed);
/// Train set from data_seed, test set from data_seed + 1000003.
Datasets make_datasets(const RunConfig& config);

/// Per-batch statistics that combine across batches and workers.
struct MetricAccumulator {
  TaskKind task = TaskKind::Needle;
  Index num_classes = 0;
  Index samples = 0;
  double loss_sum = 0;  // sum of per-batch mean loss times batch size
  Index correct = 0;    // needle: images; multilabel: label bits
  Index total = 0;
  Eigen::MatrixXd confusion;  // segmentation, [C,C] true x predicted
  Index relevant = 0;         // informative patches seen
  Index retained = 0;         // of which survived to the final keep set

  MetricAccumulator() = default;
  MetricAccumulator(TaskKind task, Index num_classes);
  void merge(const MetricAccumulator& other);
  /// Accuracy (needle), mIoU (segmentation) or per-label accuracy
  /// (multi-label).
  double metric() const;
  double mean_loss() const { return samples ? loss_sum / static_cast<double>(samples) : 0.0; }
  /// -1 when the dataset carries no relevance masks.
  double recall() const { return relevant ? static_cast<double>(retained) / static_cast<double>(relevant) : -1.0; }
};

/// Adds the predictions of one batch. `logits` is [B,C] or [B,M0,C].
template <typename Scalar>
void accumulate(MetricAccumulator& acc, const ForwardOutput<Scalar>& out, const TaskTargets& targets,
                const MaskMatrix* relevance);

struct EvalOptions {
  Index batch_size = 64;
  int workers = 1;
  Routing routing = Routing::Folded;
  std::uint64_t seed = 0;  // random selector; batch i uses seed + i
};

template <typename Scalar>
MetricAccumulator evaluate(const PrunedViT<Scalar>& model, const LabeledImages& data,
                           const std::vector<int>& patch_labels, const EvalOptions& options);

struct EpochRecord {
  Index epoch = 0;
  double lr = 0;
  Index r = 0;  // curriculum R of this epoch (first entry before the CLS adjustment), 0 without pruning
  double main_loss = 0;
  std::vector<double> aux_losses;  // per module
  double train_metric = 0;
  double test_metric = 0;
  double test_recall = -1;
  double seconds = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `model` (whose parameters live in `store`) per the train section.
template <typename Scalar>
std::vector<EpochRecord> train(const RunConfig& config, const PrunedViT<Scalar>& model, ParameterStore<Scalar>& store,
                               const Datasets& data, const EpochCallback& on_epoch = {});

/// Metrics CSV, one row per epoch; aux losses joined with ';'.
inline constexpr const char* kMetricsCsvHeader =
    "epoch,lr,r,main_loss,aux_losses,train_metric,test_metric,test_recall,seconds";
void write_metrics_row(std::ostream& os, const EpochRecord& r);

}  // namespace cropr
