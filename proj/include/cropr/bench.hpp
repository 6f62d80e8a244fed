// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Wall-clock benchmark harness. Timing uses std::chrono::steady_clock on the
// calling thread; warmup iterations are run and discarded.

#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "cropr/tensor.hpp"

namespace cropr {

struct BenchRow {
  std::string config;
  Index batch = 1;
  std::string precision = "f64";
  double imgs_per_sec = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  double gflops = 0;  // analytic, per image; 0 when not applicable
  int workers = 1;
};

struct BenchOptions {
  int warmup = 3;
  int repetitions = 20;
};

/// Times `fn` (one call processes `batch` images) and summarises latencies.
BenchRow bench(const std::string& config, Index batch, const std::string& precision, const std::function<void()>& fn,
               const BenchOptions& options = {});

/// Row with the highest throughput among `rows` sharing `config` and
/// `precision`.
BenchRow best_over_batches(const std::vector<BenchRow>& rows, const std::string& config,
                           const std::string& precision);

inline constexpr const char* kBenchCsvHeader = "config,batch,precision,imgs_per_sec,p50_ms,p95_ms,gflops,workers";
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows, bool header = true);

/// Percentile by linear interpolation between closest ranks, q in [0,1].
double percentile(std::vector<double> values, double q);

struct RouterBenchResult {
  double folded_ms = 0;  // median per call
  double random_ms = 0;
  double ratio() const { return folded_ms / random_ms; }
  std::vector<BenchRow> rows;
};

/// Per-module routing cost at M tokens of width D, batch 1: folded scorer +
/// Top-K against uniform random scores + Top-K. Both include the token
/// gather of the kept set.
RouterBenchResult router_microbench(Index tokens, Index width, Index keep, std::uint64_t seed,
                                    const BenchOptions& options = {});

}  // namespace cropr
