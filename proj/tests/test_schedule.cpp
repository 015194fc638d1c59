#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "polyvit/rng.hpp"
#include "polyvit/schedule.hpp"

using polyvit::ScheduleKind;
using polyvit::SchedulePlan;

namespace {

std::size_t task_changes(const std::vector<int>& steps) {
  std::size_t changes = 0;
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i] != steps[i - 1]) ++changes;
  return changes;
}

}  // namespace

TEST_CASE("uniform split with a divisible budget gives every task the same share") {
  for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
    const auto plan = polyvit::build_schedule(ScheduleKind::uniform, {2, 2, 2}, seed);
    const auto s = polyvit::stats(plan);
    CHECK(s.length == 6);
    CHECK(s.counts == std::vector<std::size_t>{2, 2, 2});
  }
}

TEST_CASE("weighted plans hit the budgeted counts for every seed") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto plan = polyvit::build_schedule(ScheduleKind::weighted, {3, 1}, seed);
    REQUIRE(plan.steps.size() == 4);
    const auto s = polyvit::stats(plan);
    CHECK(s.counts == std::vector<std::size_t>{3, 1});
  }
}

TEST_CASE("the smallest budget keeps its exact share of a weighted plan") {
  const std::vector<std::size_t> budgets{10000, 10000, 500,   2500, 20000,
                                         100700, 123600, 15900, 135000};
  const auto plan = polyvit::build_schedule(ScheduleKind::weighted, budgets, 11);
  const auto s = polyvit::stats(plan);
  CHECK(s.length == 418200);
  CHECK(s.counts[2] == 500);
  const double share = static_cast<double>(s.counts[2]) / static_cast<double>(s.length);
  CHECK(share > 0.0011);
  CHECK(share < 0.0013);
}

TEST_CASE("task blocks stay contiguous and cover each budget once") {
  const auto plan = polyvit::build_schedule(ScheduleKind::task_by_task, {2, 3}, 5);
  const auto s = polyvit::stats(plan);
  CHECK(s.length == 5);
  CHECK(s.counts == std::vector<std::size_t>{2, 3});
  CHECK(s.longest_run == 3);
  CHECK(task_changes(plan.steps) == 1);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = polyvit::build_schedule(ScheduleKind::task_by_task, {4, 1, 3, 2}, seed);
    CHECK(task_changes(p.steps) == 3);
    CHECK(polyvit::stats(p).counts == std::vector<std::size_t>{4, 1, 3, 2});
  }
}

TEST_CASE("an explicit block order is honored verbatim") {
  const auto plan = polyvit::task_by_task_schedule({1, 2, 3}, {2, 0, 1}, 0);
  CHECK(plan.steps == std::vector<int>{2, 2, 2, 0, 1, 1});
  CHECK_THROWS_WITH_AS(polyvit::task_by_task_schedule({1, 2}, {0, 0}, 0),
                       doctest::Contains("permutation"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(polyvit::task_by_task_schedule({1, 2}, {0}, 0),
                       doctest::Contains("entries"), std::invalid_argument);
}

TEST_CASE("alternating plans cycle the fixed order") {
  SUBCASE("equal budgets never repeat a task back to back") {
    const auto plan = polyvit::build_schedule(ScheduleKind::alternating, {2, 2}, 3);
    CHECK(plan.steps == std::vector<int>{0, 1, 0, 1});
    CHECK(polyvit::stats(plan).longest_run == 1);
  }
  SUBCASE("the remainder goes to the earliest tasks") {
    const auto plan = polyvit::build_schedule(ScheduleKind::alternating, {2, 2, 1}, 3);
    CHECK(plan.steps == std::vector<int>{0, 1, 2, 0, 1});
    CHECK(polyvit::stats(plan).counts == std::vector<std::size_t>{2, 2, 1});
  }
  SUBCASE("budgets only set the total length") {
    const auto plan = polyvit::build_schedule(ScheduleKind::alternating, {1, 8}, 3);
    CHECK(polyvit::stats(plan).counts == std::vector<std::size_t>{5, 4});
  }
}

TEST_CASE("accumulated plans trade steps for whole-set updates") {
  const auto plan = polyvit::build_schedule(ScheduleKind::accumulated, {4, 5, 7}, 9);
  CHECK(plan.steps.empty());
  CHECK(plan.num_updates == 5);
  const auto s = polyvit::stats(plan);
  CHECK(s.length == 5);
  CHECK(s.longest_run == 0);
  CHECK(s.counts == std::vector<std::size_t>{5, 5, 5});
}

TEST_CASE("every kind meets its intended counts at any budget mix") {
  polyvit::Rng rng(2024);
  const ScheduleKind kinds[] = {ScheduleKind::task_by_task, ScheduleKind::alternating,
                                ScheduleKind::uniform, ScheduleKind::weighted,
                                ScheduleKind::accumulated};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng.bounded(8);
    std::vector<std::size_t> budgets(t);
    for (auto& b : budgets) b = 1 + rng.bounded(50);
    const auto kind = kinds[rng.bounded(5)];
    const auto seed = rng.next_u64();
    const auto plan = polyvit::build_schedule(kind, budgets, seed);
    const auto s = polyvit::stats(plan);
    REQUIRE(s.counts == plan.intended_counts);
    const std::size_t total = std::accumulate(budgets.begin(), budgets.end(), std::size_t{0});
    if (kind == ScheduleKind::accumulated) {
      CHECK(plan.num_updates == total / t);
      CHECK(plan.steps.empty());
    } else {
      CHECK(plan.steps.size() == total);
      CHECK(plan.num_updates == total);
      CHECK(std::accumulate(s.counts.begin(), s.counts.end(), std::size_t{0}) == total);
    }
    const auto again = polyvit::build_schedule(kind, budgets, seed);
    CHECK(again.steps == plan.steps);
    CHECK(again.num_updates == plan.num_updates);
  }
}

TEST_CASE("equal weighted budgets match the uniform multiset") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = polyvit::build_schedule(ScheduleKind::weighted, {4, 4, 4}, seed);
    const auto u = polyvit::build_schedule(ScheduleKind::uniform, {4, 4, 4}, seed);
    auto ws = w.steps, us = u.steps;
    std::sort(ws.begin(), ws.end());
    std::sort(us.begin(), us.end());
    CHECK(ws == us);
  }
}

TEST_CASE("seeds matter and invalid budgets are rejected") {
  const auto a = polyvit::build_schedule(ScheduleKind::weighted, {5, 5, 5, 5}, 1);
  const auto b = polyvit::build_schedule(ScheduleKind::weighted, {5, 5, 5, 5}, 2);
  CHECK(a.steps != b.steps);
  CHECK_THROWS_WITH_AS(polyvit::build_schedule(ScheduleKind::uniform, {}, 0),
                       doctest::Contains("at least one"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(polyvit::build_schedule(ScheduleKind::uniform, {3, 0}, 0),
                       doctest::Contains("task 1"), std::invalid_argument);
}
