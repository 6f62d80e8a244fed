// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// PrunedViT wiring, the training loop, checkpoints and run-config handling.

#include <doctest.h>

#include <sstream>

#include "cropr/checkpoint.hpp"
#include "cropr/config.hpp"
#include "cropr/model.hpp"
#include "cropr/train.hpp"

using namespace cropr;
using nlohmann::json;

namespace {

json tiny_json() {
  return json::parse(R"({
    "model": {"image_side": 16, "patch_size": 4, "depth": 3, "width": 16, "heads": 2, "mlp_ratio": 2},
    "schedule": {"type": "per_block", "r": 3},
    "task": {"kind": "needle", "num_classes": 4, "num_informative": 1, "num_distractors": 5,
             "train_size": 64, "test_size": 32, "min_rect": 4, "max_rect": 8},
    "train": {"epochs": 1, "batch_size": 16, "precision": "f64"}
  })");
}

RunConfig tiny(const std::vector<std::string>& overrides = {}) {
  return run_config_from_json(apply_overrides(tiny_json(), overrides));
}

template <typename S>
ImageBatch images_for(const RunConfig& c, Index n, std::uint64_t seed) {
  return generate_task(c.resolved_task(), n, seed).images;
}

void randomise_queries(PrunedViT<double>& model, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& [block, m] : model.modules()) {
    auto q = m.queries;
    for (Index i = 0; i < q.numel(); ++i) q.mutable_value()[i] = n(rng);
  }
}

}  // namespace

TEST_CASE("run-config: round trip, overrides, hash, validation") {
  auto c = tiny();
  CHECK(to_json(run_config_from_json(to_json(c))) == to_json(c));
  auto j = apply_overrides(tiny_json(), {"train.lr=0.5", "model.cropr.scorer=mha", "fusion.kind=llf"});
  CHECK(j["train"]["lr"] == 0.5);
  auto o = run_config_from_json(j);
  CHECK(o.variant.scorer == ScorerKind::Mha);
  CHECK(o.fusion == FusionMode::Llf);
  CHECK_THROWS_AS(apply_overrides(tiny_json(), {"novalue"}), ConfigError);

  CHECK(config_hash(tiny_json()) == config_hash(json::parse(tiny_json().dump())));
  CHECK(config_hash(tiny_json()).size() == 16);
  CHECK(config_hash(tiny_json()) != config_hash(apply_overrides(tiny_json(), {"train.seed=1"})));

  // A schedule that does not fit the model fails at validation time.
  auto bad = run_config_from_json(apply_overrides(tiny_json(), {"schedule.r=20"}));
  CHECK_THROWS_AS(bad.validate(), ScheduleError);
  auto late = run_config_from_json(
      apply_overrides(tiny_json(), {R"(schedule={"type":"staged","entries":[{"block":3,"r":2}]})"}));
  CHECK_THROWS_AS(late.validate(), ScheduleError);
  CHECK_THROWS_AS(run_config_from_json(apply_overrides(tiny_json(), {"fusion.kind=blend"})), ConfigError);
}

TEST_CASE("checkpoint round trip and partial initialisation") {
  auto c = tiny();
  Rng rng(1);
  ParameterStore<double> store;
  PrunedViT<double> model(c, store, rng);
  for (bool as_float : {false, true}) {
    std::stringstream ss;
    json meta{{"note", "x"}};
    if (as_float) {
      ParameterStore<float> fs;
      for (const auto& [name, t] : store.entries())
        fs.add(name, TensorF::from(t.shape(), t.value().cast<float>().eval()));
      save_checkpoint(ss, fs, meta);
    } else {
      save_checkpoint(ss, store, meta);
    }
    json back_meta;
    auto back = load_checkpoint<double>(ss, &back_meta);
    CHECK(back_meta["note"] == "x");
    REQUIRE(back.size() == store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      CHECK(back.entries()[i].first == store.entries()[i].first);
      const double tol = as_float ? 1e-6 : 0.0;
      CHECK((back.entries()[i].second.value() - store.entries()[i].second.value()).cwiseAbs().maxCoeff() <= tol);
    }
  }
  std::stringstream garbage("not a checkpoint");
  CHECK_THROWS(load_checkpoint<double>(garbage));

  // copy_matching ignores tensors whose shape changed.
  ParameterStore<double> wider;
  Rng r2(2);
  PrunedViT<double> other(tiny({"task.num_classes=5"}), wider, r2);
  const Index copied = copy_matching(store, wider);
  CHECK(copied > 0);
  CHECK(copied < static_cast<Index>(wider.size()));
  CHECK(wider.get("backbone.patch_embed.weight").value() == store.get("backbone.patch_embed.weight").value());
}

TEST_CASE("LLF adds no parameters beyond the pruning modules") {
  auto base = tiny({"schedule.type=\"none\"", "task.kind=\"segmentation\""});
  auto llf = tiny({"task.kind=\"segmentation\"", "schedule.llf=true", "schedule.r=3", "fusion.kind=\"llf\""});
  Rng a(1), b(1);
  ParameterStore<double> sb, sl;
  PrunedViT<double> mb(base, sb, a);
  PrunedViT<double> ml(llf, sl, b);
  CHECK(sl.parameter_count() - sl.parameter_count("cropr.") == sb.parameter_count());
  CHECK(sl.parameter_count("fusion.") == 0);
}

TEST_CASE("unpruned equals R=0 bitwise and the folded router matches full routing") {
  auto none = tiny({"schedule.type=\"none\""});
  auto zero = tiny({"schedule.r=0"});
  Rng a(3), b(3);
  ParameterStore<double> sa, sb;
  PrunedViT<double> ma(none, sa, a);
  PrunedViT<double> mb(zero, sb, b);
  auto im = images_for<double>(none, 8, 5);
  CHECK(ma.forward(im, {}).logits.value() == mb.forward(im, {}).logits.value());

  for (const char* task : {"needle", "segmentation"}) {
    auto c = tiny({std::string("task.kind=\"") + task + "\"", "schedule.llf=true", "fusion.kind=\"llf\""});
    Rng rng(4);
    ParameterStore<double> store;
    PrunedViT<double> model(c, store, rng);
    randomise_queries(model, 9);
    const auto folded_store = fold_store(c, store);
    PrunedViT<double> folded(c, folded_store);
    CHECK(folded.is_folded());
    CHECK(folded_store.parameter_count() < store.parameter_count());
    auto inputs = images_for<double>(c, 100, 6);
    ForwardOptions full;
    full.routing = Routing::Full;
    auto ref = model.forward(inputs, full);
    auto got = folded.forward(inputs, {});
    CHECK((ref.logits.value() - got.logits.value()).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(ref.final_positions == got.final_positions);
  }

  auto mha = tiny({"model.cropr.scorer=\"mha\""});
  Rng rng(5);
  ParameterStore<double> ms;
  PrunedViT<double> mm(mha, ms, rng);
  CHECK_THROWS_AS(fold_store(mha, ms), UnsupportedVariantError);
}

TEST_CASE("forward bookkeeping: stage map and keep set") {
  auto c = tiny({"task.kind=\"segmentation\"", "schedule.llf=true", "fusion.kind=\"llf\"", "schedule.r=4"});
  Rng rng(6);
  ParameterStore<double> store;
  PrunedViT<double> model(c, store, rng);
  auto out = model.forward(images_for<double>(c, 4, 1), {});
  CHECK(out.logits.dim(1) == 16);
  for (Index b = 0; b < 4; ++b) {
    CHECK((out.stage_map.row(b).array() == 1).count() == 4);
    CHECK((out.stage_map.row(b).array() == 0).count() == 12);
  }
  CHECK(out.final_positions.cols() == 12);
}

TEST_CASE("training loop: one record per epoch, deterministic, curriculum") {
  auto c = tiny();
  auto run = [](const RunConfig& cfg) {
    auto data = make_datasets(cfg);
    Rng rng(cfg.train.seed);
    ParameterStore<double> store;
    PrunedViT<double> model(cfg, store, rng);
    return train(cfg, model, store, data);
  };
  auto r1 = run(c);
  REQUIRE(r1.size() == 1);
  CHECK(r1[0].aux_losses.size() == 2);
  CHECK(r1[0].test_recall >= 0.0);
  auto r2 = run(c);
  CHECK(r1[0].main_loss == r2[0].main_loss);
  CHECK(r1[0].test_metric == r2[0].test_metric);

  auto cur = tiny({"train.epochs=3", R"(schedule.curriculum={"enabled":true,"start_r":1,"final_r":3,"warmup_epochs":3})"});
  auto rc = run(cur);
  REQUIRE(rc.size() == 3);
  CHECK(rc[0].r == 1);
  CHECK(rc[1].r == 2);
  CHECK(rc[2].r == 3);
  std::ostringstream os;
  write_metrics_row(os, rc[0]);
  const std::string row = os.str();
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
}

TEST_CASE("evaluation is independent of the worker count") {
  auto c = tiny();
  Rng rng(7);
  ParameterStore<double> store;
  PrunedViT<double> model(c, store, rng);
  auto data = make_datasets(c);
  EvalOptions one, four;
  one.batch_size = four.batch_size = 8;
  four.workers = 4;
  auto a = evaluate(model, data.test, data.test_patch_labels, one);
  auto b = evaluate(model, data.test, data.test_patch_labels, four);
  CHECK(a.correct == b.correct);
  CHECK(a.retained == b.retained);
  CHECK(a.mean_loss() == doctest::Approx(b.mean_loss()).epsilon(1e-12));
}
