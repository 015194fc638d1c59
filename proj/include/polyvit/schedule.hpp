#pragma once

// Task-sampling schedules for co-training. Each plan fixes, ahead of time,
// which task every SGD step trains on; per-task occurrence counts are exact
// by construction (never just in expectation), and building a plan is a pure
// function of kind, budgets, and seed.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace polyvit {

// task_by_task: one contiguous block per task, block order drawn from the
//   seed. alternating: the fixed order 0..T-1 repeated; the remainder of
//   steps/T goes to the earliest tasks. uniform: an equal split (floor plus
//   one for the earliest tasks), order a seeded permutation. weighted:
//   exactly the budgeted number of occurrences per task, order a seeded
//   permutation. accumulated: every update touches all tasks at once, for
//   floor(total/T) updates.
enum class ScheduleKind { task_by_task, alternating, uniform, weighted, accumulated };

const char* to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

struct SchedulePlan {
  ScheduleKind kind = ScheduleKind::weighted;
  // Task index per SGD step. Empty for the accumulated kind, where each of
  // num_updates parameter updates touches every task.
  std::vector<int> steps;
  std::size_t num_updates = 0;
  std::vector<std::size_t> intended_counts;
  std::uint64_t seed = 0;
};

struct ScheduleStats {
  std::vector<std::size_t> counts;
  // Longest contiguous run of one task; 0 for accumulated plans, which have
  // no single-task steps.
  std::size_t longest_run = 0;
  std::size_t length = 0;
};

// budgets[j] is task j's step budget U_j; budgets must be non-empty and
// positive. The totals are exact: see ScheduleKind for each kind's split.
SchedulePlan build_schedule(ScheduleKind kind, const std::vector<std::size_t>& budgets,
                            std::uint64_t seed);

// Task-by-task plan with an explicit block order (a permutation of 0..T-1)
// instead of a seed-drawn one; presets use this to pin a published order.
SchedulePlan task_by_task_schedule(const std::vector<std::size_t>& budgets,
                                   const std::vector<int>& order, std::uint64_t seed);

ScheduleStats stats(const SchedulePlan& plan);

}  // namespace polyvit
