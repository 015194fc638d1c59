#pragma once
// Run configuration: a plain-text `key = value` format with dotted keys,
// `#` comments, and repeated `task.<name>.<field>` groups. Parsing is total:
// every rejected input produces a diagnostic naming the offending key (and
// line), and a parsed config is fully validated before any work starts.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "polyvit/data.hpp"
#include "polyvit/model.hpp"
#include "polyvit/schedule.hpp"

namespace polyvit {

struct RunConfig {
  ModelConfig model;
  ScheduleKind schedule = ScheduleKind::weighted;
  // Explicit task order for the one-task-at-a-time schedule; empty means a
  // seed-drawn order. Entries are task ids.
  std::vector<int> task_order;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  bool per_task_warmup = false;
  bool cosine_decay = false;
  // Synthetic stand-in corpora: per-task sizes and noise level.
  std::size_t data_train = 64;
  std::size_t data_val = 32;
  std::size_t data_test = 32;
  double data_noise = 0.1;
  // Validation cadence during training, in optimizer updates; 0 disables.
  std::size_t eval_every = 0;
  std::string out_path = "polyvit.pvck";

  void validate() const;

  // Per-task step budgets in task-id order, for building schedules.
  std::vector<long> budgets() const;
};

// Parses config text; `source` names the input in diagnostics.
RunConfig parse_run_config(const std::string& text,
                           const std::string& source = "config");
RunConfig load_run_config(const std::string& path);

// Canonical text form; parse(render(c)) reproduces c exactly.
std::string render_run_config(const RunConfig& cfg);

// Named presets: "base9" is the nine-task three-modality co-training setup
// at full published dimensions (use with `params` and `schedule`; its tasks
// are far beyond desk-scale training), "toy" is a three-task setup small
// enough to train in seconds.
RunConfig preset(const std::string& name);

// Dimension summary for analytic parameter counting.
ModelLayout layout_of(const ModelConfig& cfg);

// The synthetic dataset description for one task of a run. Every caller
// (training, evaluation, export) derives the same per-task seed from the
// run seed, so the splits they see are identical.
SyntheticTaskConfig synthetic_task(const RunConfig& cfg, int task_id);

}  // namespace polyvit
