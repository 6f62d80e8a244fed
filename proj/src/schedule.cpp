// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/schedule.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "cropr/errors.hpp"

namespace cropr {

Index PruningSchedule::effective_r(std::size_t i) const {
  if (i >= entries.size()) throw IndexError("schedule entry out of range");
  return entries[i].r + ((i == 0 && cls) ? 1 : 0);
}

Index PruningSchedule::total_pruned() const {
  Index total = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) total += effective_r(i);
  return total;
}

std::vector<TrajectoryStep> PruningSchedule::trajectory() const {
  std::vector<TrajectoryStep> out;
  Index patches = m0;
  const Index extra = cls ? 1 : 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    TrajectoryStep step;
    step.block = entries[i].block;
    step.effective_r = effective_r(i);
    step.tokens_before = patches + extra;
    patches -= step.effective_r;
    step.patches_after = patches;
    step.tokens_after = patches + extra;
    out.push_back(step);
  }
  return out;
}

Index PruningSchedule::prune_after(Index block) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].block == block) return effective_r(i);
  }
  return 0;
}

void PruningSchedule::validate() const {
  if (depth < 0) throw ScheduleError("depth must be non-negative");
  if (m0 <= 0) throw ScheduleError("m0 must be positive");
  if (llf && depth < 1) throw ScheduleError("last layer fusion needs at least one block");
  Index prev = 0, patches = m0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.block <= prev) throw ScheduleError("schedule blocks must be strictly increasing and start at 1");
    if (e.block > max_block()) {
      throw ScheduleError("module after block " + std::to_string(e.block) + " exceeds the last allowed block " +
                          std::to_string(max_block()) + (llf ? " (LLF)" : ""));
    }
    if (e.r < 1) throw ScheduleError("every entry must prune at least one token");
    patches -= effective_r(i);
    if (patches < 1) {
      throw ScheduleError("entry after block " + std::to_string(e.block) + " leaves no patch tokens");
    }
    prev = e.block;
  }
  if (curriculum.enabled) {
    if (curriculum.warmup_epochs < 1) throw ScheduleError("curriculum warmup must be at least one epoch");
    if (curriculum.start_r < 1 || curriculum.final_r < 1) throw ScheduleError("curriculum R must be positive");
  }
}

PruningSchedule PruningSchedule::at_epoch(Index epoch) const {
  PruningSchedule s = *this;
  if (!curriculum.enabled) return s;
  const Index r = curriculum_r(epoch, curriculum);
  for (auto& e : s.entries) e.r = r;
  return s;
}

PruningSchedule build_per_block(Index depth, Index m0, Index r, bool llf, bool cls) {
  if (depth < 0 || m0 <= 0 || r < 0) throw ScheduleError("per-block schedule needs depth >= 0, m0 > 0, r >= 0");
  PruningSchedule s;
  s.depth = depth;
  s.m0 = m0;
  s.llf = llf;
  s.cls = cls;
  if (r > 0) {
    for (Index b = 1; b <= s.max_block(); ++b) s.entries.push_back({b, r});
  }
  s.validate();
  return s;
}

PruningSchedule build_staged(Index depth, const std::vector<ScheduleEntry>& stages, Index m0, bool llf, bool cls) {
  PruningSchedule s;
  s.depth = depth;
  s.m0 = m0;
  s.llf = llf;
  s.cls = cls;
  s.entries = stages;
  s.validate();
  return s;
}

double tpr(const PruningSchedule& s) {
  return static_cast<double>(s.total_pruned()) / static_cast<double>(s.m0);
}

int tpr_percent(const PruningSchedule& s) { return static_cast<int>(std::lround(100.0 * tpr(s))); }

Index curriculum_r(Index epoch, const Curriculum& c) {
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  if (epoch >= c.warmup_epochs - 1) return c.final_r;
  const double t = static_cast<double>(epoch) / static_cast<double>(c.warmup_epochs - 1);
  return static_cast<Index>(std::lround(static_cast<double>(c.start_r) +
                                        static_cast<double>(c.final_r - c.start_r) * t));
}

std::vector<std::string> validate_div8(const PruningSchedule& s) {
  std::vector<std::string> warnings;
  if (!s.prefer_div8) return warnings;
  for (const auto& step : s.trajectory()) {
    if (step.tokens_after % 8 != 0) {
      warnings.push_back("after block " + std::to_string(step.block) + ": " + std::to_string(step.tokens_after) +
                         " tokens is not a multiple of 8");
    }
  }
  return warnings;
}

nlohmann::json to_json(const PruningSchedule& s) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : s.entries) entries.push_back({{"block", e.block}, {"r", e.r}});
  return {{"depth", s.depth},
          {"m0", s.m0},
          {"cls", s.cls},
          {"llf", s.llf},
          {"entries", entries},
          {"curriculum",
           {{"enabled", s.curriculum.enabled},
            {"start_r", s.curriculum.start_r},
            {"final_r", s.curriculum.final_r},
            {"warmup_epochs", s.curriculum.warmup_epochs}}},
          {"prefer_div8", s.prefer_div8}};
}

PruningSchedule schedule_from_json(const nlohmann::json& j) {
  PruningSchedule s;
  try {
    s.depth = j.at("depth").get<Index>();
    s.m0 = j.at("m0").get<Index>();
    s.cls = j.value("cls", false);
    s.llf = j.value("llf", false);
    for (const auto& e : j.value("entries", nlohmann::json::array())) {
      s.entries.push_back({e.at("block").get<Index>(), e.at("r").get<Index>()});
    }
    if (j.contains("curriculum")) {
      const auto& c = j.at("curriculum");
      s.curriculum.enabled = c.value("enabled", false);
      s.curriculum.start_r = c.value("start_r", Index{1});
      s.curriculum.final_r = c.value("final_r", Index{1});
      s.curriculum.warmup_epochs = c.value("warmup_epochs", Index{1});
    }
    s.prefer_div8 = j.value("prefer_div8", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed schedule JSON: ") + e.what());
  }
  s.validate();
  return s;
}

std::string trajectory_table(const PruningSchedule& s) {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%6s %6s %8s %8s %6s\n", "block", "r", "before", "after", "div8");
  os << line;
  const auto steps = s.trajectory();
  if (steps.empty()) {
    std::snprintf(line, sizeof line, "%6s %6d %8lld %8lld %6s\n", "-", 0, static_cast<long long>(s.sequence_length()),
                  static_cast<long long>(s.sequence_length()), s.sequence_length() % 8 == 0 ? "yes" : "no");
    os << line;
  }
  for (const auto& st : steps) {
    std::snprintf(line, sizeof line, "%6lld %6lld %8lld %8lld %6s\n", static_cast<long long>(st.block),
                  static_cast<long long>(st.effective_r), static_cast<long long>(st.tokens_before),
                  static_cast<long long>(st.tokens_after), st.tokens_after % 8 == 0 ? "yes" : "no");
    os << line;
  }
  std::snprintf(line, sizeof line, "final tokens %lld, TPR %.1f%%\n", static_cast<long long>(s.final_tokens()),
                100.0 * tpr(s));
  os << line;
  return os.str();
}

}  // namespace cropr
