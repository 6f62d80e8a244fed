// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "cropr/cropr_module.hpp"
#include "cropr/selectors.hpp"

namespace cropr {

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

BenchRow bench(const std::string& config, Index batch, const std::string& precision, const std::function<void()>& fn,
               const BenchOptions& options) {
  for (int i = 0; i < options.warmup; ++i) fn();
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(options.repetitions));
  for (int i = 0; i < options.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  BenchRow row;
  row.config = config;
  row.batch = batch;
  row.precision = precision;
  row.p50_ms = percentile(ms, 0.5);
  row.p95_ms = percentile(ms, 0.95);
  row.imgs_per_sec = row.p50_ms > 0 ? 1000.0 * static_cast<double>(batch) / row.p50_ms : 0.0;
  return row;
}

BenchRow best_over_batches(const std::vector<BenchRow>& rows, const std::string& config,
                           const std::string& precision) {
  const BenchRow* best = nullptr;
  for (const auto& r : rows) {
    if (r.config != config || r.precision != precision) continue;
    if (best == nullptr || r.imgs_per_sec > best->imgs_per_sec) best = &r;
  }
  if (best == nullptr) throw ConfigError("no benchmark rows for " + config + "/" + precision);
  return *best;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows, bool header) {
  if (header) os << kBenchCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.config << ',' << r.batch << ',' << r.precision << ',' << r.imgs_per_sec << ',' << r.p50_ms << ','
       << r.p95_ms << ',' << r.gflops << ',' << r.workers << '\n';
  }
}

RouterBenchResult router_microbench(Index tokens, Index width, Index keep, std::uint64_t seed,
                                    const BenchOptions& options) {
  Rng rng(seed);
  TokenBatch<float> x;
  x.tokens = trunc_normal<float>({1, tokens, width}, 1.0, rng);
  x.positions.resize(1, tokens);
  for (Index i = 0; i < tokens; ++i) x.positions(0, i) = i;
  FoldedRouter<float> router;
  router.query_sum = trunc_normal<float>({width}, 1.0, rng).value();

  NoGradGuard no_grad;
  Index sink = 0;
  auto folded = [&] {
    auto route = select_topk(x, folded_score(x, router), keep);
    sink += route.keep_index(0, 0);
  };
  auto random = [&] {
    auto route = select_topk(x, random_score<float>(1, tokens, rng), keep);
    sink += route.keep_index(0, 0);
  };
  const std::string shape = "M" + std::to_string(tokens) + "_D" + std::to_string(width);
  RouterBenchResult out;
  // Interleave the two to spread host noise evenly.
  std::vector<double> f_ms, r_ms;
  for (int round = 0; round < 5; ++round) {
    auto f = bench("router_folded_" + shape, 1, "f32", folded, options);
    auto r = bench("router_random_" + shape, 1, "f32", random, options);
    f_ms.push_back(f.p50_ms);
    r_ms.push_back(r.p50_ms);
    out.rows.push_back(f);
    out.rows.push_back(r);
  }
  out.folded_ms = percentile(f_ms, 0.5);
  out.random_ms = percentile(r_ms, 0.5);
  if (sink == -1) out.rows.clear();  // keeps the work observable
  return out;
}

}  // namespace cropr
