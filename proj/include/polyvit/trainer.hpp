#pragma once
// Co-training loop. Every optimizer step consumes a single-task minibatch
// (the accumulated schedule kind sums gradients across all tasks first), so
// one heavy-ball momentum state is shared across tasks and only parameters
// that participated in a step's forward pass are updated: a head that never
// saw the batch must not feel momentum decay.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "polyvit/autodiff.hpp"
#include "polyvit/kernels.hpp"
#include "polyvit/metrics.hpp"
#include "polyvit/model.hpp"
#include "polyvit/rng.hpp"
#include "polyvit/schedule.hpp"
#include "polyvit/tensor.hpp"

namespace polyvit {

struct TrainerConfig {
  double momentum = 0.9;
  // Warmup is measured on the global step counter by default, with the
  // warmup horizon summed over the co-trained tasks. Per-task warmup counts
  // only steps of the task being trained, against that task's own horizon.
  bool per_task_warmup = false;
  bool cosine_decay = false;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // optional line-based progress log
};

// Linear warmup: ramps from 0 at step 0 to base_lr at step `warmup`, then
// holds. warmup == 0 means no ramp.
inline double lr_at(double base_lr, std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return base_lr;
  return base_lr * (static_cast<double>(step) / static_cast<double>(warmup));
}

// Warmup followed by cosine decay to 0 at `total` steps.
inline double lr_cosine(double base_lr, std::size_t step, std::size_t warmup,
                        std::size_t total) {
  if (warmup != 0 && step < warmup) return lr_at(base_lr, step, warmup);
  const std::size_t span = total > warmup ? total - warmup : 1;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  if (progress > 1.0) progress = 1.0;
  constexpr double kPi = 3.14159265358979323846;
  return base_lr * 0.5 * (1.0 + std::cos(kPi * progress));
}

template <typename T>
struct OptimizerState {
  // Momentum buffers keyed by canonical parameter name, created on first
  // touch so their shapes always mirror the parameters they track.
  std::map<std::string, Tensor<T>> momentum;
  std::size_t global_step = 0;
  std::map<int, std::size_t> task_steps;
};

// Heavy-ball update for every parameter with an entry in `grads`:
//   m <- mu * m + g;  theta <- theta - lr * m
template <typename T>
void sgd_step(PolyViT<T>& model, const std::map<std::string, Tensor<T>>& grads,
              double lr, double mu, OptimizerState<T>& state) {
  std::size_t applied = 0;
  visit_params(model, [&](const std::string& name, Tensor<T>& p) {
    auto g = grads.find(name);
    if (g == grads.end()) return;
    if (g->second.shape() != p.shape())
      throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
    auto [slot, inserted] =
        state.momentum.try_emplace(name, Tensor<T>::zeros(p.shape()));
    if (!inserted && slot->second.shape() != p.shape())
      throw std::invalid_argument("sgd_step: momentum shape mismatch for " + name);
    std::vector<T> m(slot->second.begin(), slot->second.end());
    std::vector<T> v(p.begin(), p.end());
    const T* gd = g->second.begin();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = static_cast<T>(mu) * m[i] + gd[i];
      v[i] -= static_cast<T>(lr) * m[i];
    }
    slot->second = Tensor<T>(p.shape(), std::move(m));
    p = Tensor<T>(p.shape(), std::move(v), p.requires_grad());
    ++applied;
  });
  if (applied != grads.size())
    throw std::invalid_argument("sgd_step: gradient for unknown parameter");
}

// Mixup with an explicit coefficient and pairing, for reproducing a step by
// hand. Inputs are blended as lam * x_i + (1 - lam) * x_perm(i); targets are
// blended the same way, which keeps one-hot targets valid soft labels.
template <typename T>
std::vector<Example<T>> mixup_with(const std::vector<Example<T>>& batch, T lam,
                                   const std::vector<std::size_t>& perm) {
  if (batch.size() < 2)
    throw std::invalid_argument("mixup needs a batch of at least two examples");
  if (perm.size() != batch.size())
    throw std::invalid_argument("mixup pairing must cover the batch");
  std::vector<Example<T>> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example<T>& a = batch[i];
    const Example<T>& b = batch[perm[i]];
    if (a.input.shape() != b.input.shape() || a.target.shape() != b.target.shape())
      throw std::invalid_argument("mixup batch has inconsistent shapes");
    std::vector<T> x(a.input.numel());
    std::vector<T> y(a.target.numel());
    const T* ax = a.input.begin();
    const T* bx = b.input.begin();
    for (std::size_t k = 0; k < x.size(); ++k)
      x[k] = lam * ax[k] + (T{1} - lam) * bx[k];
    const T* at = a.target.begin();
    const T* bt = b.target.begin();
    for (std::size_t k = 0; k < y.size(); ++k)
      y[k] = lam * at[k] + (T{1} - lam) * bt[k];
    out.push_back({Tensor<T>(a.input.shape(), std::move(x)),
                   Tensor<T>(a.target.shape(), std::move(y))});
  }
  return out;
}

// Draws one shared coefficient lam ~ Beta(alpha, alpha) and a pairing
// permutation, then blends. One coefficient per batch, not per example.
template <typename T>
std::vector<Example<T>> mixup(const std::vector<Example<T>>& batch, double alpha,
                              Rng& rng) {
  if (alpha <= 0.0) throw std::invalid_argument("mixup alpha must be positive");
  const T lam = static_cast<T>(rng.beta(alpha, alpha));
  const auto perm = rng.permutation(batch.size());
  return mixup_with(batch, lam, perm);
}

// Cycles through a dataset in minibatches. Each epoch's visit order comes
// from its own keyed stream, so the contents of draw k are a pure function
// of (seed, task, k): a run restored from a checkpoint mid-stream continues
// with exactly the batches an uninterrupted run would have seen.
template <typename T>
class BatchCycler {
 public:
  BatchCycler(const std::vector<Example<T>>* data, std::size_t batch_size,
              std::uint64_t seed, int task_id, std::size_t start_draws = 0)
      : data_(data), batch_size_(batch_size), seed_(seed), task_(task_id) {
    if (data_ == nullptr || data_->empty())
      throw std::invalid_argument("batch cycler needs a non-empty dataset");
    if (batch_size_ == 0)
      throw std::invalid_argument("batch cycler needs a positive batch size");
    epoch_ = start_draws / data_->size();
    cursor_ = start_draws % data_->size();
    shuffle_epoch();
  }

  std::vector<Example<T>> next() {
    std::vector<Example<T>> batch;
    batch.reserve(batch_size_);
    for (std::size_t i = 0; i < batch_size_; ++i) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        cursor_ = 0;
        shuffle_epoch();
      }
      batch.push_back((*data_)[order_[cursor_++]]);
    }
    return batch;
  }

 private:
  void shuffle_epoch() {
    Rng rng(seed_, "batch/task" + std::to_string(task_) + "/epoch" +
                       std::to_string(epoch_));
    order_ = rng.permutation(data_->size());
  }

  const std::vector<Example<T>>* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  int task_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  int task = -1;  // -1 marks an accumulated update covering every task
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string to_line(const TrainRecord& r) {
  std::ostringstream os;
  os << "step=" << r.step << " task=" << r.task << " loss=" << r.loss
     << " lr=" << r.lr;
  return os.str();
}

struct TrainLog {
  std::vector<TrainRecord> records;  // one per optimizer update
};

namespace detail {

// Runs one forward/backward on a fresh tape and collects gradients for the
// parameters that participated, keyed by canonical name.
template <typename T>
double task_gradients(PolyViT<T>& model, const std::vector<Example<T>>& batch,
                      int task_id, Rng* depth_rng,
                      std::map<std::string, Tensor<T>>& grads) {
  GradTape<T> tape;
  GradContext<T> ctx(&tape, true, depth_rng);
  auto loss = batch_loss(ctx, model, batch, task_id);
  const double value = static_cast<double>(loss.value()[0]);
  tape.backward(loss);
  visit_params(model, [&](const std::string& name, Tensor<T>& p) {
    if (!p.requires_grad()) return;
    const Var<T>* v = ctx.lookup(p);
    if (v == nullptr) return;
    Tensor<T> g = tape.grad(*v);
    auto [slot, inserted] = grads.try_emplace(name, std::move(g));
    if (!inserted) {
      std::vector<T> sum(slot->second.begin(), slot->second.end());
      const Tensor<T> fresh = tape.grad(*v);
      const T* f = fresh.begin();
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += f[i];
      slot->second = Tensor<T>(slot->second.shape(), std::move(sum));
    }
  });
  return value;
}

template <typename T>
double lr_for(const TaskSpec& task, const OptimizerState<T>& state,
              const TrainerConfig& tc, std::size_t warmup_total,
              std::size_t plan_total) {
  std::size_t step = state.global_step;
  std::size_t warmup = warmup_total;
  if (tc.per_task_warmup) {
    auto it = state.task_steps.find(task.id);
    step = it == state.task_steps.end() ? 0 : it->second;
    warmup = static_cast<std::size_t>(task.warmup_steps);
  }
  if (tc.cosine_decay) return lr_cosine(task.base_lr, step, warmup, plan_total);
  return lr_at(task.base_lr, step, warmup);
}

}  // namespace detail

// Runs a schedule against per-task training data. Each entry of the plan is
// one optimizer update; the model is modified in place and `state` carries
// momentum and step counters across calls. A non-finite loss aborts the run:
// continuing would silently poison the momentum buffers.
template <typename T>
TrainLog cotrain(PolyViT<T>& model, const SchedulePlan& plan,
                 const std::map<int, std::vector<Example<T>>>& data,
                 OptimizerState<T>& state, const TrainerConfig& tc) {
  std::vector<int> trained;
  if (plan.kind == ScheduleKind::accumulated) {
    for (const auto& t : model.tasks) trained.push_back(t.id);
  } else {
    std::set<int> seen(plan.steps.begin(), plan.steps.end());
    trained.assign(seen.begin(), seen.end());
  }
  for (int id : trained) {
    auto it = data.find(id);
    if (it == data.end() || it->second.empty())
      throw std::invalid_argument("cotrain: no data for task " +
                                  std::to_string(id));
    model.task(id);  // throws for ids the model does not serve
  }

  visit_params(model, [](const std::string&, Tensor<T>& p) {
    p = p.with_requires_grad(true);
  });

  // The warmup horizon sums over every task the model co-trains, not just
  // the tasks this plan happens to visit, so a run resumed with a sliced
  // plan sees the same schedule as the uninterrupted run.
  std::size_t warmup_total = 0;
  for (const auto& t : model.tasks)
    warmup_total += static_cast<std::size_t>(t.warmup_steps);

  std::map<int, BatchCycler<T>> cyclers;
  for (int id : trained) {
    const std::size_t drawn =
        (state.task_steps.count(id) ? state.task_steps.at(id) : 0) *
        static_cast<std::size_t>(model.task(id).batch_size);
    cyclers.emplace(id, BatchCycler<T>(&data.at(id),
                                       static_cast<std::size_t>(
                                           model.task(id).batch_size),
                                       tc.seed, id, drawn));
  }

  const std::size_t plan_total = plan.num_updates;
  TrainLog log;
  log.records.reserve(plan_total);

  // Mixup and stochastic-depth draws are keyed by step counters rather than
  // consumed from long-lived streams, again so restored runs replay exactly.
  auto draw_batch = [&](int id) {
    auto batch = cyclers.at(id).next();
    const double alpha = model.task(id).mixup_alpha;
    if (alpha > 0.0) {
      Rng mix_rng(tc.seed, "mixup/task" + std::to_string(id) + "/step" +
                               std::to_string(state.task_steps[id]));
      batch = mixup(batch, alpha, mix_rng);
    }
    return batch;
  };
  auto check_finite = [&](double loss, int id) {
    if (!std::isfinite(loss))
      throw std::runtime_error("cotrain: non-finite loss at step " +
                               std::to_string(state.global_step) + " for task " +
                               std::to_string(id));
  };
  auto emit = [&](const TrainRecord& r) {
    log.records.push_back(r);
    if (tc.log != nullptr) *tc.log << to_line(r) << '\n';
  };

  if (plan.kind == ScheduleKind::accumulated) {
    for (std::size_t u = 0; u < plan_total; ++u) {
      Rng depth_rng(tc.seed, "depth/step" + std::to_string(state.global_step));
      std::map<std::string, Tensor<T>> grads;
      double loss_sum = 0.0;
      double lr = 0.0;
      bool first = true;
      for (int id : trained) {
        const double task_lr =
            detail::lr_for(model.task(id), state, tc, warmup_total, plan_total);
        lr = first ? task_lr : std::min(lr, task_lr);
        first = false;
        const double loss =
            detail::task_gradients(model, draw_batch(id), id, &depth_rng, grads);
        check_finite(loss, id);
        loss_sum += loss;
      }
      sgd_step(model, grads, lr, tc.momentum, state);
      emit({state.global_step, -1, loss_sum, lr});
      ++state.global_step;
      for (int id : trained) ++state.task_steps[id];
    }
    return log;
  }

  for (int id : plan.steps) {
    const TaskSpec& task = model.task(id);
    const double lr = detail::lr_for(task, state, tc, warmup_total, plan_total);
    Rng depth_rng(tc.seed, "depth/step" + std::to_string(state.global_step));
    std::map<std::string, Tensor<T>> grads;
    const double loss =
        detail::task_gradients(model, draw_batch(id), id, &depth_rng, grads);
    check_finite(loss, id);
    sgd_step(model, grads, lr, tc.momentum, state);
    emit({state.global_step, id, loss, lr});
    ++state.global_step;
    ++state.task_steps[id];
  }
  return log;
}

// --- linear probing ---

// Embeds every example once with the trunk in eval mode and stacks the
// results into an [N x width] matrix.
template <typename T>
Tensor<T> feature_matrix(const PolyViT<T>& model,
                         const std::vector<Example<T>>& data,
                         Modality modality) {
  if (data.empty())
    throw std::invalid_argument("feature_matrix needs at least one example");
  EvalContext<T> ctx;
  std::vector<T> rows;
  rows.reserve(data.size() * model.width);
  for (const auto& ex : data) {
    Tensor<T> f = forward_features(ctx, model, ex.input, modality);
    rows.insert(rows.end(), f.begin(), f.end());
  }
  return Tensor<T>({data.size(), model.width}, std::move(rows));
}

template <typename T>
struct ProbeResult {
  TaskHead<T> head;
  double train_metric = 0.0;  // accuracy, or mean average precision for
  double val_metric = 0.0;    // multilabel tasks
  TrainLog log;
};

namespace detail {

template <typename T>
Tensor<T> stack_targets(const std::vector<Example<T>>& data) {
  const std::size_t c = data[0].target.numel();
  std::vector<T> rows;
  rows.reserve(data.size() * c);
  for (const auto& ex : data) {
    if (ex.target.numel() != c)
      throw std::invalid_argument("probe targets have inconsistent sizes");
    rows.insert(rows.end(), ex.target.begin(), ex.target.end());
  }
  return Tensor<T>({data.size(), c}, std::move(rows));
}

template <typename T>
Tensor<T> head_logits(const Tensor<T>& features, const TaskHead<T>& head) {
  return kernels::add_rowvec(kernels::matmul(features, kernels::transpose(head.w)),
                             head.b);
}

template <typename T>
double head_metric(const Tensor<T>& features, const Tensor<T>& targets,
                   const TaskHead<T>& head, LossKind loss) {
  const Tensor<T> logits = head_logits(features, head);
  if (loss == LossKind::softmax_ce) return accuracy(logits, targets);
  return mean_average_precision(logits, targets);
}

}  // namespace detail

// Full-model evaluation on one task: logits for every example through the
// value-only context, scored with the task's metric (accuracy for softmax
// heads, mean average precision for multi-label ones).
template <typename T>
double evaluate(const PolyViT<T>& model, int task_id,
                const std::vector<Example<T>>& data) {
  if (data.empty())
    throw std::invalid_argument("evaluate needs at least one example");
  const TaskSpec& task = model.task(task_id);
  EvalContext<T> ctx;
  std::vector<T> rows;
  rows.reserve(data.size() * task.num_classes);
  for (const auto& ex : data) {
    Tensor<T> logits = forward_logits(ctx, model, ex.input, task_id);
    rows.insert(rows.end(), logits.begin(), logits.end());
  }
  const Tensor<T> logit_rows({data.size(), task.num_classes}, std::move(rows));
  const Tensor<T> targets = detail::stack_targets(data);
  if (task.loss == LossKind::softmax_ce) return accuracy(logit_rows, targets);
  return mean_average_precision(logit_rows, targets);
}

// Trains a fresh classifier head for `probe_task` on frozen trunk features.
// The trunk is taken by const reference and only ever run through the
// value-only context, so every shared parameter is bitwise untouched by
// construction. Features are embedded once and reused across steps.
template <typename T>
ProbeResult<T> linear_probe(const PolyViT<T>& model, const TaskSpec& probe_task,
                            const std::vector<Example<T>>& train,
                            const std::vector<Example<T>>& val,
                            std::size_t steps, const TrainerConfig& tc) {
  if (train.empty() || val.empty())
    throw std::invalid_argument("linear_probe needs train and val examples");
  const Tensor<T> train_f = feature_matrix(model, train, probe_task.modality);
  const Tensor<T> val_f = feature_matrix(model, val, probe_task.modality);
  const Tensor<T> train_y = detail::stack_targets(train);
  const Tensor<T> val_y = detail::stack_targets(val);

  ProbeResult<T> result;
  result.head = make_task_head<T>(probe_task, model.width, tc.seed);
  result.head.w = result.head.w.with_requires_grad(true);
  result.head.b = result.head.b.with_requires_grad(true);

  // Examples carry cached feature rows, so the cycler sees a d-sized input.
  std::vector<Example<T>> rows;
  rows.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    rows.push_back({kernels::slice_rows(train_f, i, 1),
                    kernels::slice_rows(train_y, i, 1)});
  }
  BatchCycler<T> cycler(&rows, static_cast<std::size_t>(probe_task.batch_size),
                        tc.seed, probe_task.id);
  OptimizerState<T> state;
  const std::size_t warmup = static_cast<std::size_t>(probe_task.warmup_steps);

  for (std::size_t s = 0; s < steps; ++s) {
    auto batch = cycler.next();
    GradTape<T> tape;
    GradContext<T> ctx(&tape);
    auto w = ctx.param(result.head.w);
    auto b = ctx.param(result.head.b);
    Var<T> loss{};
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto logits = ctx.add_rowvec(
          ctx.matmul(ctx.constant(batch[i].input), ctx.transpose(w)), b);
      auto l = probe_task.loss == LossKind::softmax_ce
                   ? ctx.softmax_cross_entropy(logits, batch[i].target)
                   : ctx.sigmoid_bce_mean(logits, batch[i].target);
      loss = i == 0 ? l : tape.add(loss, l);
    }
    loss = tape.scale(loss, T{1} / static_cast<T>(batch.size()));
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value))
      throw std::runtime_error("linear_probe: non-finite loss at step " +
                               std::to_string(s));
    tape.backward(loss);
    const double lr = tc.cosine_decay
                          ? lr_cosine(probe_task.base_lr, s, warmup, steps)
                          : lr_at(probe_task.base_lr, s, warmup);
    std::map<std::string, Tensor<T>> grads;
    grads.emplace("head.w", tape.grad(w));
    grads.emplace("head.b", tape.grad(b));
    for (auto& [name, g] : grads) {
      auto [slot, inserted] =
          state.momentum.try_emplace(name, Tensor<T>::zeros(g.shape()));
      Tensor<T>& p = name == "head.w" ? result.head.w : result.head.b;
      std::vector<T> m(slot->second.begin(), slot->second.end());
      std::vector<T> v(p.begin(), p.end());
      const T* gd = g.begin();
      for (std::size_t k = 0; k < m.size(); ++k) {
        m[k] = static_cast<T>(tc.momentum) * m[k] + gd[k];
        v[k] -= static_cast<T>(lr) * m[k];
      }
      slot->second = Tensor<T>(g.shape(), std::move(m));
      p = Tensor<T>(p.shape(), std::move(v), p.requires_grad());
    }
    result.log.records.push_back({s, probe_task.id, value, lr});
    if (tc.log != nullptr) *tc.log << to_line(result.log.records.back()) << '\n';
  }

  result.train_metric =
      detail::head_metric(train_f, train_y, result.head, probe_task.loss);
  result.val_metric =
      detail::head_metric(val_f, val_y, result.head, probe_task.loss);
  return result;
}

}  // namespace polyvit
