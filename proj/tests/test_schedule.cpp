// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0
//
// schedule: golden pruning arithmetic, curriculum, div-8 warnings, JSON.

#include <doctest.h>

#include <cmath>
#include <random>

#include "cropr/errors.hpp"
#include "cropr/schedule.hpp"

using namespace cropr;

TEST_CASE("per-block ViT-L/16 schedule goldens") {
  for (bool cls : {false, true}) {
    auto s = build_per_block(24, 196, 8, false, cls);
    CHECK(s.entries.size() == 23);
    CHECK(s.final_tokens() == 12);
    CHECK(tpr_percent(s) == 94);
    auto l = build_per_block(24, 196, 8, true, cls);
    CHECK(l.entries.size() == 22);
    CHECK(l.final_tokens() == 20);
    CHECK(tpr_percent(l) == 90);
    CHECK(l.entries.back().block == 22);
  }
  auto plain = build_per_block(24, 196, 8, false, false);
  CHECK(plain.total_pruned() == 184);
  CHECK(build_per_block(24, 196, 8, true, false).total_pruned() == 176);
  // CLS adds one to the first module only.
  auto with_cls = build_per_block(24, 196, 8, false, true);
  CHECK(with_cls.effective_r(0) == 9);
  CHECK(with_cls.effective_r(1) == 8);
  CHECK(with_cls.final_patches() == 11);

  auto empty = build_per_block(2, 196, 0, false, false);
  CHECK(empty.entries.empty());
  CHECK(tpr(empty) == 0.0);
  CHECK(tpr_percent(empty) == 0);
  CHECK_THROWS_AS(build_per_block(24, 196, 9, false, false), ScheduleError);
}

TEST_CASE("staged schedule goldens") {
  auto s = build_staged(24, {{6, 50}, {12, 50}, {18, 50}}, 196, false, false);
  CHECK(s.final_tokens() == 46);
  CHECK(tpr_percent(s) == 77);
  auto sc = build_staged(24, {{6, 50}, {12, 50}, {18, 50}}, 196, false, true);
  CHECK(sc.final_tokens() == 46);
  CHECK(tpr_percent(sc) == 77);

  // Aggressive single stage; the CLS adjustment shifts TPR by 1/1024.
  for (bool cls : {false, true}) {
    auto a = build_staged(24, {{3, 825}}, 1024, false, cls);
    CHECK(std::abs(tpr(a) - 0.80) <= 0.01);
  }

  // Five stages with keep targets (96 - 16i)^2.
  std::vector<ScheduleEntry> stages;
  const Index blocks[] = {5, 8, 11, 14, 20};
  Index keep = 96 * 96;
  for (Index i = 1; i <= 5; ++i) {
    const Index target = (96 - 16 * i) * (96 - 16 * i);
    stages.push_back({blocks[i - 1], keep - target});
    keep = target;
  }
  auto seg = build_staged(24, stages, 9216, true, false);
  CHECK(seg.final_tokens() == 256);
  CHECK(tpr_percent(seg) == 97);
  auto traj = seg.trajectory();
  REQUIRE(traj.size() == 5);
  CHECK(traj[0].tokens_after == 6400);
  CHECK(traj[3].tokens_after == 1024);
}

TEST_CASE("schedule validation errors") {
  CHECK_THROWS_AS(build_staged(24, {{6, 50}, {6, 50}}, 196, false, false), ScheduleError);
  CHECK_THROWS_AS(build_staged(24, {{12, 50}, {6, 50}}, 196, false, false), ScheduleError);
  CHECK_THROWS_AS(build_staged(24, {{23, 8}}, 196, true, false), ScheduleError);
  CHECK_NOTHROW(build_staged(24, {{23, 8}}, 196, false, false));
  CHECK_THROWS_AS(build_staged(24, {{24, 8}}, 196, false, false), ScheduleError);
  CHECK_THROWS_AS(build_staged(24, {{1, 196}}, 196, false, false), ScheduleError);
  CHECK_THROWS_AS(build_staged(24, {{1, 195}}, 196, false, true), ScheduleError);
  CHECK_NOTHROW(build_staged(24, {{1, 195}}, 196, false, false));
  CHECK_THROWS_AS(build_staged(24, {{0, 4}}, 196, false, false), ScheduleError);
  CHECK_THROWS_AS(build_staged(24, {{3, 0}}, 196, false, false), ScheduleError);
}

TEST_CASE("curriculum ramp") {
  Curriculum c{true, 1, 40, 32};
  CHECK(curriculum_r(0, c) == 1);
  CHECK(curriculum_r(16, c) == 21);
  CHECK(curriculum_r(16, c) == std::lround(1 + 39.0 * 16 / 31));
  CHECK(curriculum_r(31, c) == 40);
  CHECK(curriculum_r(32, c) == 40);
  CHECK(curriculum_r(500, c) == 40);
  Index prev = 0;
  for (Index e = 0; e < 40; ++e) {
    const Index r = curriculum_r(e, c);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(curriculum_r(0, Curriculum{true, 5, 9, 1}) == 9);
  CHECK_THROWS_AS(curriculum_r(-1, c), ContractError);

  auto s = build_per_block(4, 64, 10, false, false);
  s.curriculum = c;
  auto e0 = s.at_epoch(0);
  for (const auto& e : e0.entries) CHECK(e.r == 1);
  auto e16 = s.at_epoch(16);
  for (const auto& e : e16.entries) CHECK(e.r == 21);
}

TEST_CASE("div8 warnings") {
  auto s = build_per_block(24, 196, 8, false, false);
  CHECK(validate_div8(s).empty());  // flag off
  s.prefer_div8 = true;
  CHECK(validate_div8(s).size() == 23);
  auto eight = build_staged(12, {{2, 64}, {5, 64}}, 256, false, false);
  eight.prefer_div8 = true;
  CHECK(validate_div8(eight).empty());
  auto empty = build_per_block(12, 196, 0, false, false);
  empty.prefer_div8 = true;
  CHECK(validate_div8(empty).empty());
  const auto before = s;
  (void)validate_div8(s);
  CHECK(s == before);
}

TEST_CASE("schedule properties over random schedules") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::uniform_int_distribution<Index> depth_d(3, 24), m0_d(4, 400);
    const Index L = depth_d(rng), M0 = m0_d(rng);
    const bool cls = trial % 2 == 0;
    std::uniform_int_distribution<Index> r_d(0, std::max<Index>(1, M0 / L));
    const Index R = r_d(rng);
    PruningSchedule plain, fused;
    try {
      plain = build_per_block(L, M0, R, false, cls);
      fused = build_per_block(L, M0, R, true, cls);
    } catch (const ScheduleError&) {
      continue;
    }
    CHECK(tpr(plain) >= tpr(fused));
    Index prev = plain.sequence_length();
    for (const auto& step : plain.trajectory()) {
      CHECK(step.tokens_after < prev);
      CHECK(step.patches_after >= 1);
      prev = step.tokens_after;
    }
    plain.curriculum = Curriculum{trial % 3 == 0, 1, std::max<Index>(1, R), 3};
    plain.prefer_div8 = trial % 5 == 0;
    CHECK(schedule_from_json(to_json(plain)) == plain);
    CHECK(schedule_from_json(nlohmann::json::parse(to_json(fused).dump())) == fused);
  }
  CHECK_THROWS_AS(schedule_from_json(nlohmann::json{{"depth", "x"}}), ConfigError);
  CHECK_FALSE(trajectory_table(build_per_block(4, 16, 2, false, true)).empty());
}
