// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/train.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>
#include <thread>

namespace cropr {
namespace {

std::vector<Index> range_rows(Index begin, Index end) {
  std::vector<Index> rows(static_cast<std::size_t>(end - begin));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

}  // namespace

LabeledImages generate_task(const TaskSpec& task, Index count, std::uint64_t seed) {
  switch (task.kind) {
    case TaskKind::Needle:
      return gen_needle_classification(task.needle, count, seed);
    case TaskKind::Segmentation:
      return gen_toy_segmentation(task.segmentation, count, seed);
    case TaskKind::MultiLabel:
      return gen_multilabel(task.multilabel, count, seed);
  }
  throw ConfigError("unknown task");
}

Datasets make_datasets(const RunConfig& config) {
  const TaskSpec task = config.resolved_task();
  Datasets d;
  d.train = generate_task(task, task.train_size, task.data_seed);
  d.test = generate_task(task, task.test_size, task.data_seed + 1000003);
  if (task.kind == TaskKind::Segmentation) {
    d.train_patch_labels = patch_label_vector(d.train, config.model.patch_size);
    d.test_patch_labels = patch_label_vector(d.test, config.model.patch_size);
  }
  return d;
}

MetricAccumulator::MetricAccumulator(TaskKind t, Index c) : task(t), num_classes(c) {
  if (task == TaskKind::Segmentation) confusion = Eigen::MatrixXd::Zero(c, c);
}

void MetricAccumulator::merge(const MetricAccumulator& o) {
  samples += o.samples;
  loss_sum += o.loss_sum;
  correct += o.correct;
  total += o.total;
  if (o.confusion.size() > 0) confusion += o.confusion;
  relevant += o.relevant;
  retained += o.retained;
}

double MetricAccumulator::metric() const {
  if (task == TaskKind::Segmentation) {
    double sum = 0;
    Index classes = 0;
    for (Index k = 0; k < num_classes; ++k) {
      const double inter = confusion(k, k);
      const double uni = confusion.row(k).sum() + confusion.col(k).sum() - inter;
      if (uni > 0) {
        sum += inter / uni;
        ++classes;
      }
    }
    return classes ? sum / static_cast<double>(classes) : 0.0;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

template <typename Scalar>
void accumulate(MetricAccumulator& acc, const ForwardOutput<Scalar>& out, const TaskTargets& targets,
                const MaskMatrix* relevance) {
  const auto logits = out.logits.matrix();  // [B,C] or [B*M0,C]
  const Index B = out.logits.dim(0);
  acc.samples += B;
  if (out.main_loss.defined()) acc.loss_sum += static_cast<double>(out.main_loss.item()) * static_cast<double>(B);
  switch (acc.task) {
    case TaskKind::Needle:
      for (Index b = 0; b < B; ++b) {
        Index arg = 0;
        logits.row(b).maxCoeff(&arg);
        acc.correct += arg == targets.labels[static_cast<std::size_t>(b)];
        ++acc.total;
      }
      break;
    case TaskKind::Segmentation:
      for (Index r = 0; r < logits.rows(); ++r) {
        const int label = targets.patch_labels[static_cast<std::size_t>(r)];
        if (label == kIgnoreLabel) continue;
        Index arg = 0;
        logits.row(r).maxCoeff(&arg);
        acc.confusion(label, arg) += 1.0;
      }
      break;
    case TaskKind::MultiLabel:
      for (Index b = 0; b < B; ++b)
        for (Index k = 0; k < logits.cols(); ++k) {
          acc.correct += (logits(b, k) > 0) == (targets.multilabel(b, k) > 0.5);
          ++acc.total;
        }
      break;
  }
  if (relevance != nullptr && relevance->size() > 0) {
    for (Index b = 0; b < relevance->rows(); ++b) {
      for (Index p = 0; p < relevance->cols(); ++p) acc.relevant += (*relevance)(b, p);
      for (Index k = 0; k < out.final_positions.cols(); ++k) {
        const Index p = out.final_positions(b, k);
        if (p >= 0) acc.retained += (*relevance)(b, p);
      }
    }
  }
}

template <typename Scalar>
MetricAccumulator evaluate(const PrunedViT<Scalar>& model, const LabeledImages& data,
                           const std::vector<int>& patch_labels, const EvalOptions& options) {
  const auto& cfg = model.config();
  const Index M0 = cfg.model.num_patches();
  const Index n = data.size(), bs = std::max<Index>(options.batch_size, 1);
  const Index batches = (n + bs - 1) / bs;
  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(batches)));
  std::vector<MetricAccumulator> partial(static_cast<std::size_t>(workers),
                                         MetricAccumulator(cfg.task.kind, cfg.task.num_classes));
  auto run = [&](int w) {
    NoGradGuard no_grad;
    for (Index i = w; i < batches; i += workers) {
      const auto rows = range_rows(i * bs, std::min(n, (i + 1) * bs));
      const auto batch = data.gather(rows);
      const auto targets = make_targets(data, patch_labels, M0, cfg.task.kind, rows);
      Rng rng(options.seed + static_cast<std::uint64_t>(i));
      ForwardOptions fo;
      fo.rng = &rng;
      fo.targets = &targets;
      fo.routing = options.routing;
      const auto out = model.forward(batch.images, fo);
      accumulate(partial[static_cast<std::size_t>(w)], out, targets, &batch.relevance);
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  MetricAccumulator total(cfg.task.kind, cfg.task.num_classes);
  for (const auto& p : partial) total.merge(p);
  return total;
}

template <typename Scalar>
std::vector<EpochRecord> train(const RunConfig& config, const PrunedViT<Scalar>& model, ParameterStore<Scalar>& store,
                               const Datasets& data, const EpochCallback& on_epoch) {
  const auto& tr = config.train;
  const Index M0 = config.model.num_patches();
  const Index n = data.train.size();
  const Index steps_per_epoch = (n + tr.batch_size - 1) / tr.batch_size;
  const Index total_steps = steps_per_epoch * tr.epochs;
  const Index warmup_steps = steps_per_epoch * tr.warmup_epochs;
  AdamW<Scalar> opt(store, AdamWConfig{0.9, 0.999, 1e-8, tr.weight_decay});
  Rng rng(tr.seed);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<EpochRecord> history;
  Index step = 0;
  for (Index epoch = 0; epoch < tr.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const PruningSchedule sched = model.schedule().at_epoch(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.r = sched.entries.empty() ? 0 : sched.entries.front().r;
    rec.aux_losses.assign(sched.entries.size(), 0.0);
    MetricAccumulator train_acc(config.task.kind, config.task.num_classes);
    for (Index s = 0; s < steps_per_epoch; ++s) {
      const std::vector<Index> rows(order.begin() + s * tr.batch_size,
                                    order.begin() + std::min(n, (s + 1) * tr.batch_size));
      const auto batch = data.train.gather(rows);
      const auto targets = make_targets(data.train, data.train_patch_labels, M0, config.task.kind, rows);
      store.zero_grad();
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &rng;
      fo.targets = &targets;
      fo.schedule = &sched;
      const auto out = model.forward(batch.images, fo);
      backward(out.loss);
      clip_grad_norm(store, tr.grad_clip);
      rec.lr = cosine_lr(tr.lr, tr.min_lr, step, warmup_steps, total_steps);
      opt.step(rec.lr);
      ++step;
      const double w = static_cast<double>(rows.size());
      for (std::size_t k = 0; k < out.aux_losses.size() && k < rec.aux_losses.size(); ++k) {
        rec.aux_losses[k] += static_cast<double>(out.aux_losses[k].item()) * w;
      }
      accumulate(train_acc, out, targets, nullptr);
    }
    rec.main_loss = train_acc.mean_loss();
    for (auto& a : rec.aux_losses) a /= static_cast<double>(n);
    rec.train_metric = train_acc.metric();
    EvalOptions eo;
    eo.workers = tr.eval_workers;
    eo.seed = tr.seed + 77;
    const auto test = evaluate(model, data.test, data.test_patch_labels, eo);
    rec.test_metric = test.metric();
    rec.test_recall = test.recall();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

void write_metrics_row(std::ostream& os, const EpochRecord& r) {
  os << r.epoch << ',' << r.lr << ',' << r.r << ',' << r.main_loss << ',';
  for (std::size_t i = 0; i < r.aux_losses.size(); ++i) os << (i ? ";" : "") << r.aux_losses[i];
  os << ',' << r.train_metric << ',' << r.test_metric << ',' << r.test_recall << ',' << r.seconds << '\n';
}

#define CROPR_INSTANTIATE_TRAIN(S)                                                                            \
  template void accumulate(MetricAccumulator&, const ForwardOutput<S>&, const TaskTargets&, const MaskMatrix*); \
  template MetricAccumulator evaluate(const PrunedViT<S>&, const LabeledImages&, const std::vector<int>&,     \
                                      const EvalOptions&);                                                    \
  template std::vector<EpochRecord> train(const RunConfig&, const PrunedViT<S>&, ParameterStore<S>&,          \
                                          const Datasets&, const EpochCallback&);

CROPR_INSTANTIATE_TRAIN(float)
CROPR_INSTANTIATE_TRAIN(double)

#undef CROPR_INSTANTIATE_TRAIN

}  // namespace cropr
