// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// tensor-engine: every differentiable op against central finite differences
// (f64, h = 1e-5, 20 seeds), plus forward values against direct Eigen code.

#include <doctest.h>

#include <array>
#include <cmath>

#include "cropr/nn.hpp"
#include "grad_cases.hpp"

using namespace cropr;
using cropr::testing::probe;
using cropr::testing::random_tensor;

TEST_CASE("gradients: every case of the shared table, 20 seeds") {
  for (const auto& c : testing::gradient_cases()) {
    for (std::uint64_t seed = 0; seed < testing::kGradSeeds; ++seed) {
      Rng rng = testing::grad_case_rng(seed);
      const auto r = c.run(seed, rng);
      INFO(c.name << " seed " << seed << " leaf " << r.worst_leaf);
      CHECK(r.rel_err <= testing::kGradTol);
    }
  }
}

TEST_CASE("forward values match direct Eigen computations") {
  Rng rng(3);
  auto a = random_tensor({3, 4}, rng, 1.0, false), b = random_tensor({4, 2}, rng, 1.0, false);
  RowMat<double> ref = a.matrix() * b.matrix();
  CHECK((matmul(a, b).matrix() - ref).norm() < 1e-12);

  auto x = random_tensor({2, 5}, rng, 3.0, false);
  const auto sm_t = softmax(x, -1);
  const auto sm = sm_t.matrix();
  for (Index r = 0; r < 2; ++r) {
    CHECK(sm.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    const double z = x.matrix().row(r).array().exp().sum();
    for (Index c = 0; c < 5; ++c) CHECK(sm(r, c) == doctest::Approx(std::exp(x.matrix()(r, c)) / z).epsilon(1e-12));
  }

  auto g = TensorD::full({5}, 1.0), be = TensorD::zeros({5});
  const auto ln_t = layer_norm(x, g, be);
  const auto ln = ln_t.matrix();
  for (Index r = 0; r < 2; ++r) {
    CHECK(std::abs(ln.row(r).mean()) < 1e-9);
    CHECK(ln.row(r).array().square().mean() == doctest::Approx(1.0).epsilon(1e-4));
  }

  // Cross-entropy as -log softmax at the label, averaged over non-ignored rows.
  const std::array<int, 2> labels{3, kIgnoreLabel};
  const double expected = -std::log(sm(0, 3));
  CHECK(cross_entropy(x, std::span<const int>(labels)).item() == doctest::Approx(expected).epsilon(1e-12));
  const std::array<int, 2> none{kIgnoreLabel, kIgnoreLabel};
  CHECK(cross_entropy(x, std::span<const int>(none)).item() == 0.0);

  // BCE against the textbook formula.
  RowMat<double> t = RowMat<double>::Zero(2, 5);
  t(0, 1) = 1;
  double bce = 0;
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < 5; ++c) {
      const double p = 1 / (1 + std::exp(-x.matrix()(r, c)));
      bce -= t(r, c) * std::log(p) + (1 - t(r, c)) * std::log(1 - p);
    }
  CHECK(binary_cross_entropy_with_logits(x, TensorD::from_matrix(t)).item() == doctest::Approx(bce / 10).epsilon(1e-12));
}

TEST_CASE("shape errors are reported") {
  auto a = TensorD::zeros({2, 3}), b = TensorD::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, TensorD::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(TensorD::from({4}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(split_heads(TensorD::zeros({1, 2, 6}), 4), ShapeError);
}

TEST_CASE("stop_gradient and NoGradGuard cut the graph") {
  auto a = TensorD::from({3}, {1.0, 2.0, 3.0}, true);
  auto loss = sum_all(mul(stop_gradient(a), a));
  backward(loss);
  CHECK(a.grad()[1] == doctest::Approx(2.0));  // only the live branch
  {
    NoGradGuard guard;
    auto b = mul(a, a);
    CHECK_FALSE(b.requires_grad());
  }
  CHECK(mul(a, a).requires_grad());
}

TEST_CASE("droppath Monte Carlo: survival rate and unbiased mean") {
  Rng rng(11);
  const double rate = 0.3;
  auto x = TensorD::full({20000, 1}, 1.0);
  auto y = droppath(x, rate, true, rng).value();
  const double kept = static_cast<double>((y.array() != 0).count()) / static_cast<double>(y.size());
  CHECK(std::abs(kept - (1 - rate)) <= 0.02);
  CHECK(y.mean() == doctest::Approx(1.0).epsilon(0.03));
  // Survivors are scaled by exactly 1/(1-rate).
  for (Index i = 0; i < y.size(); ++i)
    if (y[i] != 0) REQUIRE(y[i] == doctest::Approx(1 / (1 - rate)));
  // Identity at eval and at rate 0.
  CHECK(droppath(x, rate, false, rng).value() == x.value());
  CHECK(droppath(x, 0.0, true, rng).value() == x.value());
  CHECK_THROWS_AS(droppath(x, 1.0, true, rng), ContractError);

  auto half = droppath(TensorD::full({10000, 1}, 1.0), 0.5, true, rng).value();
  const double survived = static_cast<double>((half.array() != 0).count()) / 10000.0;
  CHECK(std::abs(survived - 0.5) <= 0.02);
}

TEST_CASE("float and double instantiations agree") {
  Rng rng(5);
  auto a = random_tensor({3, 4}, rng, 1.0, false), b = random_tensor({4, 4}, rng, 1.0, false);
  auto af = TensorF::from({3, 4}, a.value().cast<float>()), bf = TensorF::from({4, 4}, b.value().cast<float>());
  auto d = softmax(matmul(a, b), -1).value();
  auto f = softmax(matmul(af, bf), -1).value().cast<double>();
  CHECK((d - f).cwiseAbs().maxCoeff() < 1e-5);
}
