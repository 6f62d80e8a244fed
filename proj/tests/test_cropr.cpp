// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// cropr: scorer, selectors, aggregator, auxiliary heads, fold. Oracles are
// written directly against Eigen or by brute force.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "cropr/cropr_module.hpp"
#include "gradcheck.hpp"

using namespace cropr;
using cropr::testing::random_tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

TokenBatch<double> tokens_from(const RowMat<double>& rows, bool cls = false, bool requires_grad = false) {
  TokenBatch<double> x;
  const Index M = rows.rows(), D = rows.cols();
  x.tokens = TensorD::from({1, M, D}, Eigen::Map<const Vec<double>>(rows.data(), rows.size()), requires_grad);
  x.positions.resize(1, M);
  for (Index i = 0; i < M; ++i) x.positions(0, i) = cls ? i - 1 : i;
  x.cls_present = cls;
  return x;
}

TokenBatch<double> random_tokens(Index B, Index M, Index D, Rng& rng, bool cls = false, bool requires_grad = false) {
  TokenBatch<double> x;
  x.tokens = random_tensor({B, M, D}, rng, 1.0, requires_grad);
  x.positions.resize(B, M);
  // Shuffled positions so tie-breaking by position differs from index order.
  for (Index b = 0; b < B; ++b) {
    std::vector<Index> pos(static_cast<std::size_t>(M - (cls ? 1 : 0)));
    std::iota(pos.begin(), pos.end(), Index{0});
    std::shuffle(pos.begin(), pos.end(), rng);
    Index k = 0;
    if (cls) x.positions(b, k++) = kClsPosition;
    for (Index p : pos) x.positions(b, k++) = p;
  }
  x.cls_present = cls;
  return x;
}

CroprConfig module_config(Index D, Index N = 1, AuxTask task = AuxTask::Classification, Index C = 3) {
  CroprConfig c;
  c.width = D;
  c.num_queries = N;
  c.mlp_ratio = 2;
  c.task = task;
  c.num_classes = C;
  return c;
}

void set_queries(CroprModuleState<double>& s, const RowMat<double>& q) {
  s.queries.mutable_value() = Eigen::Map<const Vec<double>>(q.data(), q.size());
}

std::set<Index> positions_of(const TokenBatch<double>& x, Index b = 0) {
  std::set<Index> out;
  for (Index i = 0; i < x.length(); ++i) out.insert(x.positions(b, i));
  return out;
}

}  // namespace

TEST_CASE("score: hand examples") {
  Rng rng(1);
  ParameterStore<double> store;
  auto s = CroprModuleState<double>::create(module_config(2), store, "m", rng);
  RowMat<double> q(1, 2), x(3, 2);
  q << 1, 0;
  x << 1, 0, 0, 1, 2, 0;
  set_queries(s, q);
  auto r = score(tokens_from(x), s);
  CHECK(r.attention.value() == Vec<double>((Vec<double>(3) << 1, 0, 2).finished()));
  CHECK(r.scores(0, 0) == 1);
  CHECK(r.scores(0, 1) == 0);
  CHECK(r.scores(0, 2) == 2);

  ParameterStore<double> store2;
  auto s2 = CroprModuleState<double>::create(module_config(2, 2, AuxTask::Dense), store2, "m", rng);
  RowMat<double> q2(2, 2), x2(2, 2);
  q2 << 1, 0, 0, 1;
  x2 << 1, 1, 2, 0;
  set_queries(s2, q2);
  auto r2 = score(tokens_from(x2), s2);
  CHECK(r2.scores(0, 0) == 2);
  CHECK(r2.scores(0, 1) == 2);

  // CLS gets +inf.
  auto r3 = score(tokens_from(x, true), s);
  CHECK(r3.scores(0, 0) == kInf);

  CroprConfig bad = module_config(2);
  bad.num_queries = 0;
  CHECK_THROWS_AS(score(tokens_from(x), CroprModuleState<double>{bad}), ConfigError);
}

TEST_CASE("score: random N=5, M=12, D=8 against a dense oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    ParameterStore<double> store;
    auto s = CroprModuleState<double>::create(module_config(8, 5, AuxTask::Dense), store, "m", rng);
    set_queries(s, random_tensor({5, 8}, rng).matrix());
    auto x = random_tokens(2, 12, 8, rng);
    auto r = score(x, s);
    for (Index b = 0; b < 2; ++b) {
      RowMat<double> X = x.tokens.matrix().middleRows(b * 12, 12);
      Eigen::RowVectorXd oracle = (s.queries.matrix() * X.transpose()).colwise().sum();
      CHECK((r.scores.row(b) - oracle).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("select_topk: examples, ties, errors") {
  RowMat<double> x = RowMat<double>::Zero(3, 2);
  auto t = tokens_from(x);
  RowMat<double> a(1, 3);
  a << 0.1, 0.9, 0.5;
  auto r = select_topk(t, a, 2);
  CHECK(positions_of(r.keep) == std::set<Index>{1, 2});
  CHECK(positions_of(r.pruned) == std::set<Index>{0});
  a << 1, 1, 1;
  r = select_topk(t, a, 2);
  CHECK(positions_of(r.keep) == std::set<Index>{0, 1});
  CHECK_THROWS_AS(select_topk(t, a, 0), ContractError);
  CHECK_THROWS_AS(select_topk(t, a, 4), ContractError);
  a << 1, std::nan(""), 0;
  CHECK_THROWS_AS(select_topk(t, a, 2), ContractError);
}

TEST_CASE("select_topk equals a full-sort oracle") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const Index M = 3 + static_cast<Index>(seed % 20), K = 1 + static_cast<Index>(seed % static_cast<std::uint64_t>(M));
    auto x = random_tokens(2, M, 2, rng);
    RowMat<double> a(2, M);
    std::uniform_int_distribution<int> few(0, 3);  // many ties
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = few(rng);
    auto r = select_topk(x, a, K);
    for (Index b = 0; b < 2; ++b) {
      std::vector<std::pair<double, Index>> order;  // (-score, position)
      for (Index i = 0; i < M; ++i) order.push_back({-a(b, i), x.positions(b, i)});
      std::sort(order.begin(), order.end());
      std::set<Index> expected;
      for (Index k = 0; k < K; ++k) expected.insert(order[static_cast<std::size_t>(k)].second);
      CHECK(positions_of(r.keep, b) == expected);
      // Relative order of the input is preserved within each set.
      for (Index k = 1; k < K; ++k) CHECK(r.keep_index(b, k - 1) < r.keep_index(b, k));
    }
  }
}

TEST_CASE("select_sampling: degenerate, uniqueness, Monte Carlo frequency") {
  auto t = tokens_from(RowMat<double>::Zero(4, 2));
  RowMat<double> a(1, 4);
  a << -kInf, 3.0, -kInf, -kInf;
  Rng rng(7);
  CHECK(positions_of(select_sampling(t, a, 1, rng).keep) == std::set<Index>{1});

  a.setZero();
  std::vector<int> kept(4, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto r = select_sampling(t, a, 2, rng);
    auto keep = positions_of(r.keep);
    REQUIRE(keep.size() == 2);
    for (Index p : keep) ++kept[static_cast<std::size_t>(p)];
  }
  for (int k : kept) CHECK(std::abs(k / static_cast<double>(draws) - 0.5) <= 0.03);

  // CLS is always kept.
  auto c = tokens_from(RowMat<double>::Zero(5, 2), true);
  RowMat<double> ac = RowMat<double>::Zero(1, 5);
  for (int i = 0; i < 200; ++i) CHECK(select_sampling(c, ac, 1, rng).keep.positions(0, 0) == kClsPosition);
}

TEST_CASE("aggregate: uniform attention, single token, compositional oracle") {
  Rng rng(2);
  ParameterStore<double> store;
  auto s = CroprModuleState<double>::create(module_config(4, 2, AuxTask::Dense), store, "m", rng);
  auto x = random_tokens(1, 5, 4, rng);
  // Zero MLP output: Z rows are token means.
  s.agg_mlp->fc2.weight.mutable_value().setZero();
  s.agg_mlp->fc2.bias.mutable_value().setZero();
  auto z = aggregate(x.tokens, TensorD::zeros({1, 2, 5}), s);
  Eigen::RowVectorXd mean = x.tokens.matrix().colwise().mean();
  for (Index n = 0; n < 2; ++n) CHECK((z.matrix().row(n) - mean).norm() < 1e-12);

  // Random case against a step-by-step composition in plain Eigen.
  ParameterStore<double> store2;
  auto s2 = CroprModuleState<double>::create(module_config(4, 2, AuxTask::Dense), store2, "m", rng);
  auto A = random_tensor({1, 2, 5}, rng, 1.0, false);
  auto z2t = aggregate(x.tokens, A, s2);
  RowMat<double> z2 = z2t.matrix();
  RowMat<double> X = x.tokens.matrix();
  RowMat<double> Am = A.matrix() / 2.0;  // sqrt(D) = 2
  for (Index n = 0; n < 2; ++n) {
    Eigen::RowVectorXd w = (Am.row(n).array() - Am.row(n).maxCoeff()).exp();
    w /= w.sum();
    Eigen::RowVectorXd xp = w * X;
    const double mu = xp.mean();
    const double var = (xp.array() - mu).square().mean();
    Eigen::RowVectorXd ln = ((xp.array() - mu) / std::sqrt(var + 1e-6)).matrix();
    ln = ln.cwiseProduct(s2.agg_norm->gamma.value().transpose()) + s2.agg_norm->beta.value().transpose();
    Eigen::RowVectorXd h = ln * s2.agg_mlp->fc1.weight.matrix() + s2.agg_mlp->fc1.bias.value().transpose();
    for (Index i = 0; i < h.size(); ++i) {
      const double v = h[i];
      h[i] = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    }
    Eigen::RowVectorXd expected =
        h * s2.agg_mlp->fc2.weight.matrix() + s2.agg_mlp->fc2.bias.value().transpose() + xp;
    CHECK((z2.row(n) - expected).norm() < 1e-10);
  }

  // M = 1: softmax weight 1.
  auto one = random_tensor({1, 1, 4}, rng, 1.0, false);
  RowMat<double> z1 = aggregate(one, random_tensor({1, 2, 1}, rng, 1.0, false), s2).matrix();
  RowMat<double> direct = add(apply(apply(one, *s2.agg_norm), *s2.agg_mlp), one).matrix();
  CHECK((z1.row(0) - direct.row(0)).norm() < 1e-12);
}

TEST_CASE("auxiliary heads") {
  Rng rng(3);
  ParameterStore<double> store;
  auto s = CroprModuleState<double>::create(module_config(4, 1, AuxTask::Classification, 5), store, "m", rng);
  s.head.weight.mutable_value().setZero();
  s.head.bias.mutable_value().setZero();
  auto z = random_tensor({2, 1, 4}, rng, 1.0, false);
  const std::vector<int> labels{1, 4};
  CHECK(aux_head_classification(z, s, labels).loss.item() == doctest::Approx(std::log(5.0)));

  // Identity-like projection reads out the hot coordinate.
  ParameterStore<double> st2;
  auto s2 = CroprModuleState<double>::create(module_config(4, 1, AuxTask::Classification, 4), st2, "m", rng);
  s2.head.weight.mutable_value() = Eigen::Map<const Vec<double>>(RowMat<double>::Identity(4, 4).eval().data(), 16);
  s2.head.bias.mutable_value().setZero();
  RowMat<double> hot = RowMat<double>::Constant(1, 4, -1.0);
  hot(0, 2) = 3.0;
  RowMat<double> logits = aux_head_classification(TensorD::from({1, 1, 4}, Eigen::Map<Vec<double>>(hot.data(), 4)), s2,
                                        std::vector<int>{2})
                    .logits.matrix();
  Index arg = 0;
  logits.row(0).maxCoeff(&arg);
  CHECK(arg == 2);

  // Dense: all ignored -> 0 loss and zero gradients; uniform -> ln C;
  // equals the classification head applied per patch.
  ParameterStore<double> st3;
  auto s3 = CroprModuleState<double>::create(module_config(4, 3, AuxTask::Dense, 4), st3, "m", rng);
  auto zd = random_tensor({2, 3, 4}, rng);
  const std::vector<int> ignored(6, kIgnoreLabel);
  auto dl = aux_head_dense(zd, s3, ignored);
  CHECK(dl.loss.item() == 0.0);
  backward(dl.loss);
  CHECK(zd.grad().norm() == 0.0);
  const std::vector<int> pl{0, 3, 1, kIgnoreLabel, 2, 2};
  const double dense = aux_head_dense(zd, s3, pl).loss.item();
  double loop = 0;
  int counted = 0;
  for (Index i = 0; i < 6; ++i) {
    if (pl[static_cast<std::size_t>(i)] == kIgnoreLabel) continue;
    auto zi = TensorD::from({1, 1, 4}, zd.matrix().row(i).transpose());
    loop += aux_head_classification(zi, s3, std::vector<int>{pl[static_cast<std::size_t>(i)]}).loss.item();
    ++counted;
  }
  CHECK(dense == doctest::Approx(loop / counted).epsilon(1e-12));
  CHECK_THROWS_AS(aux_head_dense(zd, s3, std::vector<int>(5, 0)), ContractError);
  s3.head.weight.mutable_value().setZero();
  s3.head.bias.mutable_value().setZero();
  CHECK(aux_head_dense(zd, s3, pl).loss.item() == doctest::Approx(std::log(4.0)));

  // Multi-label: zero logits -> ln 2; saturation; closed-form gradient.
  ParameterStore<double> st4;
  auto s4 = CroprModuleState<double>::create(module_config(4, 1, AuxTask::MultiLabel, 3), st4, "m", rng);
  s4.head.weight.mutable_value().setZero();
  s4.head.bias.mutable_value().setZero();
  Eigen::MatrixXd targets(1, 3);
  targets << 1, 0, 1;
  CHECK(aux_head_multilabel(random_tensor({1, 1, 4}, rng, 1.0, false), s4, targets).loss.item() ==
        doctest::Approx(std::log(2.0)));
  auto logit = TensorD::from({1, 1}, {20.0}, true);
  auto sat = binary_cross_entropy_with_logits(logit, TensorD::from({1, 1}, {1.0}));
  CHECK(sat.item() < 1e-8);
  auto lg = TensorD::from({1, 3}, {0.3, -1.2, 2.0}, true);
  RowMat<double> tm(1, 3);
  tm << 1, 0, 1;
  backward(binary_cross_entropy_with_logits(lg, TensorD::from_matrix(tm)));
  for (Index i = 0; i < 3; ++i) {
    const double sig = 1 / (1 + std::exp(-lg.value()[i]));
    CHECK(lg.grad()[i] == doctest::Approx((sig - tm(0, i)) / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("downsample_labels: majority vote against a histogram oracle") {
  LabelGrid constant = LabelGrid::Constant(8, 8, 2);
  CHECK((downsample_labels(constant, 4).array() == 2).all());
  LabelGrid small(2, 2);
  small << 3, 3, 3, 7;
  CHECK(downsample_labels(small, 2)(0, 0) == 3);
  small << kIgnoreLabel, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel;
  CHECK(downsample_labels(small, 2)(0, 0) == kIgnoreLabel);
  small << 5, 1, 1, 5;  // tie -> smaller id
  CHECK(downsample_labels(small, 2)(0, 0) == 1);
  CHECK_THROWS_AS(downsample_labels(LabelGrid::Zero(6, 8), 4), ContractError);

  Rng rng(4);
  std::uniform_int_distribution<int> lab(-1, 3);
  for (int trial = 0; trial < 50; ++trial) {
    LabelGrid g(12, 12);
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = lab(rng);
    auto d = downsample_labels(g, 3);
    for (Index py = 0; py < 4; ++py)
      for (Index px = 0; px < 4; ++px) {
        std::array<int, 4> hist{};
        for (Index y = 0; y < 3; ++y)
          for (Index x = 0; x < 3; ++x) {
            const int v = g(py * 3 + y, px * 3 + x);
            if (v >= 0) ++hist[static_cast<std::size_t>(v)];
          }
        int best = kIgnoreLabel, count = 0;
        for (int k = 0; k < 4; ++k)
          if (hist[static_cast<std::size_t>(k)] > count) {
            best = k;
            count = hist[static_cast<std::size_t>(k)];
          }
        CHECK(d(py, px) == best);
      }
  }
}

TEST_CASE("fold: examples and the folded-score identity") {
  Rng rng(5);
  ParameterStore<double> store;
  auto s = CroprModuleState<double>::create(module_config(2, 2, AuxTask::Dense), store, "m", rng);
  RowMat<double> q(2, 2);
  q << 1, 2, 3, 4;
  set_queries(s, q);
  CHECK(fold(s).query_sum == Vec<double>((Vec<double>(2) << 4, 6).finished()));
  ParameterStore<double> store1;
  auto s1 = CroprModuleState<double>::create(module_config(3), store1, "m", rng);
  CHECK(fold(s1).query_sum == s1.queries.value());

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(seed + 100);
    const Index N = 1 + static_cast<Index>(seed % 7), M = 4 + static_cast<Index>(seed % 13), D = 8;
    ParameterStore<double> st;
    auto m = CroprModuleState<double>::create(module_config(D, N, AuxTask::Dense), st, "m", r);
    set_queries(m, random_tensor({N, D}, r).matrix());
    auto x = random_tokens(3, M, D, r, seed % 2 == 0);
    auto full = score(x, m).scores;
    ScoringStats::current().reset();
    auto folded = folded_score(x, fold(m));
    // The folded path never materialises an N x M buffer.
    CHECK(ScoringStats::current().largest_buffer == M);
    for (Index i = 0; i < full.size(); ++i) {
      const double a = full.data()[i], b = folded.data()[i];
      if (std::isinf(a)) {
        CHECK(std::isinf(b));
      } else {
        CHECK(std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(a)));
      }
    }
  }

  CroprConfig mha = module_config(8);
  mha.variant.scorer = ScorerKind::Mha;
  mha.variant.mha_heads = 2;
  ParameterStore<double> sm;
  auto mstate = CroprModuleState<double>::create(mha, sm, "m", rng);
  CHECK_THROWS_AS(fold(mstate), UnsupportedVariantError);
  CHECK(sm.contains("m.scorer_attn.query.weight"));
  // The simple scorer owns no projections or scorer norm.
  CHECK_FALSE(store.contains("m.scorer_norm.gamma"));
  CHECK_FALSE(store.contains("m.scorer_attn.query.weight"));
}

TEST_CASE("float fold identity within 1e-3") {
  Rng rng(6);
  CroprConfig c = module_config(16, 4, AuxTask::Dense);
  ParameterStore<float> st;
  auto m = CroprModuleState<float>::create(c, st, "m", rng);
  m.queries.mutable_value() = Vec<float>::Random(64);
  TokenBatch<float> x;
  x.tokens = TensorF::from({2, 9, 16}, Vec<float>::Random(2 * 9 * 16));
  x.positions.resize(2, 9);
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 9; ++i) x.positions(b, i) = i;
  auto full = score(x, m).scores;
  auto folded = folded_score(x, fold(m));
  CHECK(((full - folded).cwiseAbs().array() <= 1e-3f * (1.0f + full.cwiseAbs().array())).all());
}

TEST_CASE("cropr_forward_train: R=0, errors, stop-gradient") {
  Rng rng(8);
  ParameterStore<double> store;
  auto s = CroprModuleState<double>::create(module_config(6), store, "m", rng);
  TaskTargets targets;
  targets.labels = {0, 2};
  auto x = random_tokens(2, 7, 6, rng, true, true);
  auto step = cropr_forward_train(x, s, 0, targets);
  CHECK(step.route.keep.length() == 7);
  CHECK(step.route.pruned.length() == 0);
  CHECK(std::isfinite(step.aux.loss.item()));
  CHECK_THROWS_AS(cropr_forward_train(x, s, 6, targets), ScheduleError);
  CHECK_THROWS_AS(cropr_forward_train(x, s, -1, targets), ScheduleError);

  // Stop-gradient on: the auxiliary loss sends nothing into the tokens.
  backward(cropr_forward_train(x, s, 3, targets).aux.loss);
  CHECK(x.tokens.grad().norm() == 0.0);
  CHECK(s.queries.grad().norm() > 0.0);

  // Stop-gradient off: it does.
  CroprConfig c = module_config(6);
  c.variant.stop_gradient = false;
  ParameterStore<double> st2;
  auto s2 = CroprModuleState<double>::create(c, st2, "m", rng);
  auto x2 = random_tokens(2, 7, 6, rng, true, true);
  backward(cropr_forward_train(x2, s2, 3, targets).aux.loss);
  CHECK(x2.tokens.grad().norm() > 0.0);

  CroprConfig samp = module_config(6);
  samp.variant.selector = SelectorKind::Sampling;
  ParameterStore<double> st3;
  auto s3 = CroprModuleState<double>::create(samp, st3, "m", rng);
  CHECK_THROWS_AS(cropr_forward_train(x, s3, 2, targets, nullptr), ContractError);
}

TEST_CASE("routing partition, CLS and monotone-transform invariance") {
  Rng rng(9);
  for (int call = 0; call < 2000; ++call) {
    const bool cls = call % 2 == 0;
    const Index M = 2 + call % 15;
    auto x = random_tokens(2, M, 3, rng, cls);
    RowMat<double> a = random_tensor({2, M}, rng, 1.0, false).matrix();
    const Index keep = 1 + (call / 2) % (M - 1) + (cls ? 0 : 0);
    auto r = call % 3 == 0 ? select_sampling(x, a, keep, rng) : select_topk(x, a, keep);
    for (Index b = 0; b < 2; ++b) {
      auto k = positions_of(r.keep, b), p = positions_of(r.pruned, b);
      REQUIRE(k.size() + p.size() == static_cast<std::size_t>(M));
      std::set<Index> all = k;
      all.insert(p.begin(), p.end());
      REQUIRE(all == positions_of(x, b));
      if (cls) REQUIRE(k.count(kClsPosition) == 1);
    }
    // Tokens travel with their positions.
    for (Index b = 0; b < 2; ++b)
      for (Index i = 0; i < r.keep.length(); ++i) {
        const Index src = r.keep_index(b, i);
        REQUIRE((r.keep.tokens.matrix().row(b * keep + i) - x.tokens.matrix().row(b * M + src)).norm() == 0.0);
      }
    if (call % 3 != 0) {
      RowMat<double> f = (a.array() * 3.0).exp().matrix();  // strictly increasing
      auto r2 = select_topk(x, f, keep);
      REQUIRE(r2.keep_index == r.keep_index);
    }
  }
}
