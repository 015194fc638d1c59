// Command-line front end: train a co-trained model on synthetic tasks, probe
// or evaluate a saved checkpoint, dump schedules, count parameters, and
// export datasets. Every run is a pure function of its configuration and
// seeds; two invocations with the same inputs write byte-identical files.

#include <CLI11.hpp>

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "polyvit/checkpoint.hpp"
#include "polyvit/config.hpp"
#include "polyvit/data.hpp"
#include "polyvit/model.hpp"
#include "polyvit/schedule.hpp"
#include "polyvit/trainer.hpp"
#include "polyvit/transfer.hpp"

namespace {

using polyvit::Example;
using polyvit::Modality;
using polyvit::ModalityGeometry;
using polyvit::OptimizerState;
using polyvit::PolyViT;
using polyvit::RunConfig;
using polyvit::ScheduleKind;
using polyvit::SchedulePlan;
using polyvit::TaskSpec;
using polyvit::TrainerConfig;

// Options shared by every subcommand that starts from a run description.
struct ConfigSource {
  std::string path;
  std::string preset_name;

  void attach(CLI::App* sub) {
    auto* grp = sub->add_option_group("configuration", "where the run description comes from");
    grp->add_option("--config", path, "run configuration file");
    grp->add_option("--preset", preset_name, "built-in preset: base9 or toy");
    grp->require_option(1);
  }

  RunConfig resolve() const {
    RunConfig cfg = path.empty() ? polyvit::preset(preset_name)
                                 : polyvit::load_run_config(path);
    cfg.validate();
    return cfg;
  }
};

std::string fmt_metric(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

// One schedule construction rule everywhere: a task-by-task plan honors the
// config's explicit block order when one is given.
SchedulePlan plan_for(const RunConfig& cfg) {
  std::vector<std::size_t> budgets;
  for (long b : cfg.budgets()) budgets.push_back(static_cast<std::size_t>(b));
  if (cfg.schedule == ScheduleKind::task_by_task && !cfg.task_order.empty())
    return polyvit::task_by_task_schedule(budgets, cfg.task_order, cfg.seed);
  return polyvit::build_schedule(cfg.schedule, budgets, cfg.seed);
}

std::size_t plan_updates(const SchedulePlan& plan) {
  return plan.kind == ScheduleKind::accumulated ? plan.num_updates
                                                : plan.steps.size();
}

// The updates [from, to) of a plan, as a plan. Training state carries the
// resume position, so running consecutive slices reproduces the whole run.
SchedulePlan plan_slice(const SchedulePlan& plan, std::size_t from, std::size_t to) {
  SchedulePlan out = plan;
  const std::size_t total = plan_updates(plan);
  from = std::min(from, total);
  to = std::min(to, total);
  if (plan.kind == ScheduleKind::accumulated) {
    out.num_updates = to - from;
  } else {
    out.steps.assign(plan.steps.begin() + static_cast<std::ptrdiff_t>(from),
                     plan.steps.begin() + static_cast<std::ptrdiff_t>(to));
  }
  return out;
}

polyvit::CheckpointMetadata run_metadata(const RunConfig& cfg) {
  return {
      {"config", polyvit::render_run_config(cfg)},
      {"schedule", polyvit::to_string(cfg.schedule)},
      {"seed", std::to_string(cfg.seed)},
      {"momentum", "heavy_ball mu=" + fmt_metric(cfg.momentum)},
      {"inflation", polyvit::to_string(polyvit::InflateStrategy::central_frame)},
  };
}

// Rebuilds the run description a checkpoint was trained under from its
// metadata echo, so eval and probe see the model and data of that run.
RunConfig config_of_checkpoint(const std::string& ckpt_path,
                               const polyvit::CheckpointMetadata& metadata) {
  for (const auto& [k, v] : metadata)
    if (k == "config") return polyvit::parse_run_config(v, ckpt_path + " metadata");
  throw std::runtime_error(ckpt_path + " has no config echo in its metadata");
}

template <typename T>
const std::vector<Example<T>>& pick_split(const polyvit::Dataset<T>& ds,
                                          const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  if (split == "test") return ds.test;
  throw std::invalid_argument("unknown split '" + split +
                              "' (expected train, val, or test)");
}

int do_train(const RunConfig& cfg, long limit, bool quiet) {
  auto model = polyvit::build_polyvit<double>(cfg.model, cfg.seed);
  std::map<int, std::vector<Example<double>>> data;
  std::map<int, std::vector<Example<double>>> val;
  for (const auto& t : cfg.model.tasks) {
    auto ds = polyvit::generate<double>(polyvit::synthetic_task(cfg, t.id));
    data[t.id] = std::move(ds.train);
    val[t.id] = std::move(ds.val);
  }

  SchedulePlan plan = plan_for(cfg);
  std::size_t total = plan_updates(plan);
  if (limit >= 0) total = std::min(total, static_cast<std::size_t>(limit));

  TrainerConfig tc;
  tc.momentum = cfg.momentum;
  tc.per_task_warmup = cfg.per_task_warmup;
  tc.cosine_decay = cfg.cosine_decay;
  tc.seed = cfg.seed;
  tc.log = quiet ? nullptr : &std::cout;

  OptimizerState<double> state;
  const std::size_t chunk = cfg.eval_every == 0 ? total : cfg.eval_every;
  std::size_t done = 0;
  while (done < total) {
    const std::size_t next = std::min(total, done + chunk);
    polyvit::cotrain(model, plan_slice(plan, done, next), data, state, tc);
    done = next;
    if (cfg.eval_every > 0)
      for (const auto& t : cfg.model.tasks)
        std::cout << "eval step=" << state.global_step << " task=" << t.id
                  << " val=" << fmt_metric(polyvit::evaluate(model, t.id, val.at(t.id)))
                  << '\n';
  }

  polyvit::save_checkpoint(cfg.out_path, model, &state, run_metadata(cfg));
  std::cout << "saved " << cfg.out_path << " after " << state.global_step
            << " updates across " << cfg.model.tasks.size() << " tasks\n";
  return 0;
}

int do_eval(const std::string& ckpt, int task_id, const std::string& split) {
  const auto metadata = polyvit::read_checkpoint_metadata(ckpt);
  const RunConfig cfg = config_of_checkpoint(ckpt, metadata);
  auto model = polyvit::build_polyvit<double>(cfg.model, cfg.seed);
  polyvit::load_checkpoint(ckpt, model);
  const auto ds = polyvit::generate<double>(polyvit::synthetic_task(cfg, task_id));
  const auto& examples = pick_split(ds, split);
  const double metric = polyvit::evaluate(model, task_id, examples);
  const bool multilabel =
      model.task(task_id).loss == polyvit::LossKind::sigmoid_multilabel;
  std::cout << "task=" << task_id << " split=" << split
            << " examples=" << examples.size()
            << (multilabel ? " map=" : " accuracy=") << fmt_metric(metric) << '\n';
  return 0;
}

struct ProbeArgs {
  std::string ckpt;
  std::string task_spec;     // name:modality:classes
  std::string convert_from;  // modality whose pathway seeds the new one
  std::string input_dims;
  std::string patch_dims;
  std::string loss = "softmax_ce";
  std::size_t steps = 200;
  double lr = 0.1;
  long warmup = 10;
  std::size_t batch = 8;
  std::size_t train_size = 64;
  std::size_t val_size = 32;
  double noise = 0.1;
  std::uint64_t seed = 0;
  bool quiet = false;
};

polyvit::Shape parse_dims(const std::string& text, const std::string& flag) {
  polyvit::Shape out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto at = text.find('x', start);
    const std::string part = text.substr(start, at == std::string::npos
                                                    ? std::string::npos
                                                    : at - start);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || v == 0)
      throw std::invalid_argument(flag + " needs dimensions like 16x16, got '" +
                                  text + "'");
    out.push_back(static_cast<std::size_t>(v));
    if (at == std::string::npos) break;
    start = at + 1;
  }
  return out;
}

int do_probe(const ProbeArgs& a) {
  // Task spec: name:modality:classes, e.g. flowers:image:5.
  const auto first = a.task_spec.find(':');
  const auto second = first == std::string::npos ? first : a.task_spec.find(':', first + 1);
  if (second == std::string::npos)
    throw std::invalid_argument("--task needs name:modality:classes, got '" +
                                a.task_spec + "'");
  TaskSpec task;
  task.name = a.task_spec.substr(0, first);
  task.modality = polyvit::parse_modality(
      a.task_spec.substr(first + 1, second - first - 1));
  const std::string classes = a.task_spec.substr(second + 1);
  std::size_t used = 0;
  task.num_classes = std::stoull(classes, &used);
  if (used != classes.size() || task.num_classes < 2)
    throw std::invalid_argument("--task classes must be an integer >= 2, got '" +
                                classes + "'");
  task.loss = polyvit::parse_loss_kind(a.loss);
  task.base_lr = a.lr;
  task.warmup_steps = a.warmup;
  task.batch_size = a.batch;

  const auto metadata = polyvit::read_checkpoint_metadata(a.ckpt);
  const RunConfig cfg = config_of_checkpoint(a.ckpt, metadata);
  auto model = polyvit::build_polyvit<double>(cfg.model, cfg.seed);
  polyvit::load_checkpoint(a.ckpt, model);
  task.id = 0;
  for (const auto& t : model.tasks) task.id = std::max(task.id, t.id + 1);

  ModalityGeometry geom;
  if (model.modalities.count(task.modality)) {
    if (!a.convert_from.empty())
      throw std::invalid_argument(std::string("the checkpoint already has a ") +
                                  polyvit::to_string(task.modality) +
                                  " pathway; --convert does not apply");
    geom = model.modalities.at(task.modality).geometry;
  } else {
    if (a.convert_from.empty())
      throw std::invalid_argument(
          std::string("the checkpoint has no ") + polyvit::to_string(task.modality) +
          " pathway; pass --convert <source-modality> with --input and --patch");
    if (a.input_dims.empty() || a.patch_dims.empty())
      throw std::invalid_argument(
          "--convert needs the new pathway's geometry: --input and --patch");
    geom.modality = task.modality;
    geom.input = parse_dims(a.input_dims, "--input");
    geom.patch = parse_dims(a.patch_dims, "--patch");
    geom.validate();
    polyvit::add_converted_modality(model, polyvit::parse_modality(a.convert_from),
                                    geom, polyvit::InflateStrategy::replicate);
    std::cout << "derived a " << polyvit::to_string(task.modality)
              << " pathway from the " << a.convert_from << " tokenizer\n";
  }

  polyvit::SyntheticTaskConfig dcfg;
  dcfg.geometry = geom;
  dcfg.num_classes = task.num_classes;
  dcfg.noise = a.noise;
  dcfg.train_size = a.train_size;
  dcfg.val_size = a.val_size;
  dcfg.test_size = 1;
  dcfg.multilabel = task.loss == polyvit::LossKind::sigmoid_multilabel;
  dcfg.seed = polyvit::Rng::derive_seed(a.seed, "data/probe");
  const auto ds = polyvit::generate<double>(dcfg);

  TrainerConfig tc;
  tc.seed = a.seed;
  tc.log = a.quiet ? nullptr : &std::cout;
  const auto result = polyvit::linear_probe(model, task, ds.train, ds.val, a.steps, tc);
  const char* metric = task.loss == polyvit::LossKind::softmax_ce ? "accuracy" : "map";
  std::cout << "probe task=" << task.name << " steps=" << a.steps << " train_"
            << metric << "=" << fmt_metric(result.train_metric) << " val_" << metric
            << "=" << fmt_metric(result.val_metric) << '\n';
  return 0;
}

int do_schedule(const RunConfig& cfg, const std::string& dump_path) {
  const SchedulePlan plan = plan_for(cfg);
  const auto st = polyvit::stats(plan);

  std::ostringstream out;
  out << "# kind=" << polyvit::to_string(plan.kind) << " seed=" << plan.seed
      << " updates=" << plan_updates(plan) << '\n';
  if (plan.kind == ScheduleKind::accumulated) {
    for (std::size_t i = 0; i < plan.num_updates; ++i) out << i << " all\n";
  } else {
    for (std::size_t i = 0; i < plan.steps.size(); ++i)
      out << i << ' ' << plan.steps[i] << '\n';
  }
  for (std::size_t j = 0; j < st.counts.size(); ++j)
    out << "# count task" << j << " = " << st.counts[j] << '\n';
  polyvit::detail::write_file_atomic(dump_path, out.str());

  std::cout << "kind=" << polyvit::to_string(plan.kind) << " updates="
            << plan_updates(plan) << " longest_run=" << st.longest_run << '\n';
  const std::size_t total = std::max<std::size_t>(st.length, 1);
  for (std::size_t j = 0; j < st.counts.size(); ++j)
    std::cout << "task=" << j << " steps=" << st.counts[j] << " share="
              << fmt_metric(100.0 * static_cast<double>(st.counts[j]) /
                            static_cast<double>(total))
              << "%\n";
  std::cout << "wrote " << dump_path << '\n';
  return 0;
}

int do_params(const RunConfig& cfg) {
  const auto breakdown = polyvit::param_count(polyvit::layout_of(cfg.model));
  std::cout << "shared trunk: " << breakdown.shared << '\n';
  for (const auto& [mod, n] : breakdown.per_modality)
    std::cout << "modality " << polyvit::to_string(mod) << ": " << n << '\n';
  for (const auto& t : cfg.model.tasks)
    std::cout << "task " << t.id << " head (" << t.name
              << "): " << breakdown.per_task.at(t.id) << '\n';
  std::cout << "total: " << breakdown.total << '\n';
  std::cout << "single-task fleet (" << cfg.model.tasks.size()
            << " separate models): " << breakdown.fleet_total << '\n';
  std::ostringstream ratio;
  ratio << std::fixed << std::setprecision(3) << breakdown.fleet_ratio;
  std::cout << "fleet-to-co-trained ratio: " << ratio.str() << '\n';
  return 0;
}

int do_data(const RunConfig& cfg, int task_id, const std::string& split,
            const std::string& out_path) {
  const auto scfg = polyvit::synthetic_task(cfg, task_id);
  const auto ds = polyvit::generate<float>(scfg);
  const auto& examples = pick_split(ds, split);
  polyvit::save_examples(out_path, scfg.geometry.modality, scfg.geometry.input,
                         scfg.num_classes, examples);
  std::cout << "wrote " << examples.size() << " examples to " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyvit: one transformer co-trained across image, video, and "
               "audio classification"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "co-train on synthetic tasks and save a checkpoint");
  ConfigSource train_src;
  train_src.attach(train);
  std::uint64_t seed_override = 0;
  std::string schedule_override, out_override;
  long limit = -1;
  bool quiet = false;
  auto* seed_opt = train->add_option("--seed", seed_override, "override the config seed");
  auto* sched_opt = train->add_option(
      "--schedule", schedule_override,
      "override the schedule kind (task_by_task, alternating, uniform, weighted, accumulated)");
  auto* out_opt = train->add_option("--out", out_override, "override the checkpoint path");
  train->add_option("--limit", limit, "run only the first N scheduled updates");
  train->add_flag("--quiet", quiet, "suppress per-step log lines");

  // probe
  auto* probe = app.add_subcommand("probe", "train a linear probe head on a frozen checkpoint");
  ProbeArgs pa;
  probe->add_option("--ckpt", pa.ckpt, "checkpoint to probe")->required();
  probe->add_option("--task", pa.task_spec, "probe task as name:modality:classes")->required();
  probe->add_option("--convert", pa.convert_from,
                    "derive the probe modality's pathway from this source modality's "
                    "embeddings (frame inflation/collapse, channel and positional resampling)");
  probe->add_option("--input", pa.input_dims, "input extents for a derived pathway, e.g. 8x4x1");
  probe->add_option("--patch", pa.patch_dims, "patch extents for a derived pathway, e.g. 2x2");
  probe->add_option("--loss", pa.loss, "probe loss: softmax_ce or sigmoid_multilabel");
  probe->add_option("--steps", pa.steps, "probe training steps");
  probe->add_option("--lr", pa.lr, "probe peak learning rate");
  probe->add_option("--warmup", pa.warmup, "probe warmup steps");
  probe->add_option("--batch", pa.batch, "probe batch size");
  probe->add_option("--train-size", pa.train_size, "probe training examples");
  probe->add_option("--val-size", pa.val_size, "probe validation examples");
  probe->add_option("--noise", pa.noise, "probe data noise level");
  probe->add_option("--seed", pa.seed, "probe seed (head init, data, batches)");
  probe->add_flag("--quiet", pa.quiet, "suppress per-step log lines");

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint's task on one data split");
  std::string eval_ckpt, eval_split = "val";
  int eval_task = 0;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--task", eval_task, "task id")->required();
  eval->add_option("--split", eval_split, "data split: train, val, or test")->required();

  // schedule
  auto* sched = app.add_subcommand("schedule", "build a task-sampling plan and dump it");
  ConfigSource sched_src;
  sched_src.attach(sched);
  std::string dump_path;
  sched->add_option("--dump", dump_path, "write the plan as 'index task' lines")->required();

  // params
  auto* params = app.add_subcommand("params", "print the parameter-count breakdown");
  ConfigSource params_src;
  params_src.attach(params);

  // data
  auto* data = app.add_subcommand("data", "export one synthetic split as a dataset file");
  ConfigSource data_src;
  data_src.attach(data);
  int data_task = 0;
  std::string data_split = "train", data_out;
  data->add_option("--task", data_task, "task id")->required();
  data->add_option("--split", data_split, "data split: train, val, or test");
  data->add_option("--out", data_out, "output dataset file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (train->parsed()) {
      RunConfig cfg = train_src.resolve();
      if (seed_opt->count()) cfg.seed = seed_override;
      if (sched_opt->count()) cfg.schedule = polyvit::parse_schedule_kind(schedule_override);
      if (out_opt->count()) cfg.out_path = out_override;
      cfg.validate();
      return do_train(cfg, limit, quiet);
    }
    if (probe->parsed()) return do_probe(pa);
    if (eval->parsed()) return do_eval(eval_ckpt, eval_task, eval_split);
    if (sched->parsed()) return do_schedule(sched_src.resolve(), dump_path);
    if (params->parsed()) return do_params(params_src.resolve());
    if (data->parsed()) return do_data(data_src.resolve(), data_task, data_split, data_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
