#include "polyvit/schedule.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "polyvit/rng.hpp"

namespace polyvit {

const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::task_by_task: return "task_by_task";
    case ScheduleKind::alternating: return "alternating";
    case ScheduleKind::uniform: return "uniform";
    case ScheduleKind::weighted: return "weighted";
    case ScheduleKind::accumulated: return "accumulated";
  }
  throw std::invalid_argument("unknown schedule kind");
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "task_by_task") return ScheduleKind::task_by_task;
  if (s == "alternating") return ScheduleKind::alternating;
  if (s == "uniform") return ScheduleKind::uniform;
  if (s == "weighted") return ScheduleKind::weighted;
  if (s == "accumulated") return ScheduleKind::accumulated;
  throw std::invalid_argument("unknown schedule kind \"" + s + "\"");
}

namespace {

void check_budgets(const std::vector<std::size_t>& budgets) {
  if (budgets.empty()) throw std::invalid_argument("schedule needs at least one task");
  for (std::size_t j = 0; j < budgets.size(); ++j)
    if (budgets[j] == 0)
      throw std::invalid_argument("budget for task " + std::to_string(j) +
                                  " must be at least 1");
}

std::size_t total_of(const std::vector<std::size_t>& budgets) {
  return std::accumulate(budgets.begin(), budgets.end(), std::size_t{0});
}

// Equal split with the remainder going to the earliest tasks, so the total
// is exact even when T does not divide the step count.
std::vector<std::size_t> floor_split(std::size_t total, std::size_t t) {
  std::vector<std::size_t> counts(t, total / t);
  for (std::size_t j = 0; j < total % t; ++j) ++counts[j];
  return counts;
}

std::vector<int> multiset_of(const std::vector<std::size_t>& counts) {
  std::vector<int> steps;
  for (std::size_t j = 0; j < counts.size(); ++j)
    steps.insert(steps.end(), counts[j], static_cast<int>(j));
  return steps;
}

}  // namespace

SchedulePlan task_by_task_schedule(const std::vector<std::size_t>& budgets,
                                   const std::vector<int>& order, std::uint64_t seed) {
  check_budgets(budgets);
  const std::size_t t = budgets.size();
  if (order.size() != t)
    throw std::invalid_argument("block order has " + std::to_string(order.size()) +
                                " entries for " + std::to_string(t) + " tasks");
  std::vector<bool> seen(t, false);
  for (int j : order) {
    if (j < 0 || static_cast<std::size_t>(j) >= t || seen[static_cast<std::size_t>(j)])
      throw std::invalid_argument("block order is not a permutation of the tasks");
    seen[static_cast<std::size_t>(j)] = true;
  }
  SchedulePlan plan;
  plan.kind = ScheduleKind::task_by_task;
  plan.seed = seed;
  plan.intended_counts = budgets;
  plan.steps.reserve(total_of(budgets));
  for (int j : order)
    plan.steps.insert(plan.steps.end(), budgets[static_cast<std::size_t>(j)], j);
  plan.num_updates = plan.steps.size();
  return plan;
}

SchedulePlan build_schedule(ScheduleKind kind, const std::vector<std::size_t>& budgets,
                            std::uint64_t seed) {
  check_budgets(budgets);
  const std::size_t t = budgets.size();
  const std::size_t total = total_of(budgets);
  SchedulePlan plan;
  plan.kind = kind;
  plan.seed = seed;
  switch (kind) {
    case ScheduleKind::task_by_task: {
      Rng rng(seed, "schedule/task_by_task");
      const auto perm = rng.permutation(t);
      std::vector<int> order(perm.begin(), perm.end());
      return task_by_task_schedule(budgets, order, seed);
    }
    case ScheduleKind::alternating: {
      plan.intended_counts = floor_split(total, t);
      plan.steps.reserve(total);
      for (std::size_t round = 0; round < total / t; ++round)
        for (std::size_t j = 0; j < t; ++j) plan.steps.push_back(static_cast<int>(j));
      for (std::size_t j = 0; j < total % t; ++j)
        plan.steps.push_back(static_cast<int>(j));
      plan.num_updates = plan.steps.size();
      return plan;
    }
    case ScheduleKind::uniform: {
      plan.intended_counts = floor_split(total, t);
      plan.steps = multiset_of(plan.intended_counts);
      Rng rng(seed, "schedule/uniform");
      rng.shuffle(plan.steps);
      plan.num_updates = plan.steps.size();
      return plan;
    }
    case ScheduleKind::weighted: {
      plan.intended_counts = budgets;
      plan.steps = multiset_of(budgets);
      Rng rng(seed, "schedule/weighted");
      rng.shuffle(plan.steps);
      plan.num_updates = plan.steps.size();
      return plan;
    }
    case ScheduleKind::accumulated: {
      plan.num_updates = total / t;
      plan.intended_counts.assign(t, plan.num_updates);
      return plan;
    }
  }
  throw std::invalid_argument("unknown schedule kind");
}

ScheduleStats stats(const SchedulePlan& plan) {
  ScheduleStats s;
  const std::size_t t = plan.intended_counts.size();
  s.counts.assign(t, 0);
  if (plan.kind == ScheduleKind::accumulated) {
    s.counts.assign(t, plan.num_updates);
    s.longest_run = 0;
    s.length = plan.num_updates;
    return s;
  }
  s.length = plan.steps.size();
  std::size_t run = 0;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const auto j = static_cast<std::size_t>(plan.steps[i]);
    if (j >= t) throw std::invalid_argument("plan step names task " + std::to_string(j) +
                                            " outside the budget list");
    ++s.counts[j];
    run = (i > 0 && plan.steps[i] == plan.steps[i - 1]) ? run + 1 : 1;
    s.longest_run = std::max(s.longest_run, run);
  }
  return s;
}

}  // namespace polyvit
