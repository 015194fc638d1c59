#pragma once

// PolyViT assembly: per-modality tokenizers, one encoder stack, per-task
// linear heads. Heads are the only task-keyed parameters; everything else is
// shared per modality or globally, which the parameter accounting and the
// update bookkeeping both rely on.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "polyvit/encoder.hpp"

namespace polyvit {

enum class LossKind { softmax_ce, sigmoid_multilabel };
enum class HeadInit { zeros, lecun_normal };

inline const char* to_string(LossKind k) {
  return k == LossKind::softmax_ce ? "softmax_ce" : "sigmoid_multilabel";
}
inline const char* to_string(HeadInit k) {
  return k == HeadInit::zeros ? "zeros" : "lecun_normal";
}
inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "softmax_ce") return LossKind::softmax_ce;
  if (s == "sigmoid_multilabel") return LossKind::sigmoid_multilabel;
  throw std::invalid_argument("unknown loss kind '" + s + "'");
}
inline HeadInit parse_head_init(const std::string& s) {
  if (s == "zeros") return HeadInit::zeros;
  if (s == "lecun_normal") return HeadInit::lecun_normal;
  throw std::invalid_argument("unknown head init '" + s + "'");
}

struct TaskSpec {
  int id = 0;
  std::string name;
  Modality modality = Modality::image;
  std::size_t num_classes = 2;
  LossKind loss = LossKind::softmax_ce;
  long steps = 1;  // training step budget
  double base_lr = 0.03;
  long warmup_steps = 0;
  HeadInit head_init = HeadInit::zeros;
  double mixup_alpha = 0.0;
  std::size_t batch_size = 16;

  void validate() const {
    if (num_classes < 2)
      throw std::invalid_argument("task '" + name + "' needs at least 2 classes");
    if (steps < 1)
      throw std::invalid_argument("task '" + name + "' needs a step budget of at least 1");
    if (batch_size < 1)
      throw std::invalid_argument("task '" + name + "' needs batch size of at least 1");
    if (mixup_alpha < 0)
      throw std::invalid_argument("task '" + name + "' has negative mixup alpha");
  }
};

template <typename T>
struct TaskHead {
  Tensor<T> w;  // [C x d]
  Tensor<T> b;  // [C]
};

// Construction-time description of a model.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t width = 32;
  std::size_t n_heads = 2;
  std::size_t layers_adapt = 0;
  std::vector<ModalityGeometry> modalities;
  std::map<Modality, double> drop_prob;
  std::vector<TaskSpec> tasks;

  void validate() const {
    if (layers_adapt > layers)
      throw std::invalid_argument("layers_adapt exceeds total layer count");
    if (modalities.empty()) throw std::invalid_argument("no modalities configured");
    for (const auto& g : modalities) g.validate();
    std::map<int, int> ids;
    for (const auto& t : tasks) {
      t.validate();
      if (++ids[t.id] > 1)
        throw std::invalid_argument("duplicate task id " + std::to_string(t.id));
      bool found = false;
      for (const auto& g : modalities) found = found || g.modality == t.modality;
      if (!found)
        throw std::invalid_argument("task '" + t.name + "' references modality " +
                                    to_string(t.modality) +
                                    " with no configured geometry");
    }
  }
};

template <typename T>
struct PolyViT {
  std::size_t width = 0, n_heads = 0, layers = 0, layers_adapt = 0;
  std::map<Modality, ModalitySpec<T>> modalities;
  EncoderStack<T> encoder;
  std::map<int, TaskHead<T>> heads;
  std::vector<TaskSpec> tasks;

  const TaskSpec& task(int id) const {
    for (const auto& t : tasks)
      if (t.id == id) return t;
    throw std::invalid_argument("unknown task id " + std::to_string(id));
  }
};

// Per-layer slice of the canonical parameter walk, shared by the assembled
// model and pretrained-checkpoint visitors.
template <typename Layer, typename F>
void visit_layer_params(const std::string& prefix, Layer& layer, F&& fn) {
  fn(prefix + ".ln1.gamma", layer.ln1.gamma);
  fn(prefix + ".ln1.beta", layer.ln1.beta);
  for (std::size_t i = 0; i < layer.msa.heads.size(); ++i) {
    auto& h = layer.msa.heads[i];
    const std::string hp = prefix + ".msa.h" + std::to_string(i);
    fn(hp + ".q_w", h.q_w);
    fn(hp + ".q_b", h.q_b);
    fn(hp + ".k_w", h.k_w);
    fn(hp + ".k_b", h.k_b);
    fn(hp + ".v_w", h.v_w);
    fn(hp + ".v_b", h.v_b);
  }
  fn(prefix + ".msa.out_w", layer.msa.out_w);
  fn(prefix + ".msa.out_b", layer.msa.out_b);
  fn(prefix + ".ln2.gamma", layer.ln2.gamma);
  fn(prefix + ".ln2.beta", layer.ln2.beta);
  fn(prefix + ".mlp.fc1_w", layer.mlp.fc1_w);
  fn(prefix + ".mlp.fc1_b", layer.mlp.fc1_b);
  fn(prefix + ".mlp.fc2_w", layer.mlp.fc2_w);
  fn(prefix + ".mlp.fc2_b", layer.mlp.fc2_b);
}

// Canonical parameter walk. Order is pinned (tokenizers, adaptor stacks,
// shared layers, final LN, heads) because checkpoints, init streams, and
// update bookkeeping all key on these names.
template <typename ModelT, typename F>
void visit_params(ModelT& m, F&& fn) {
  auto visit_layer = [&](const std::string& prefix, auto& layer) {
    visit_layer_params(prefix, layer, fn);
  };
  for (auto& [mod, spec] : m.modalities) {
    const std::string p = std::string(to_string(mod)) + ".tokenizer";
    fn(p + ".E", spec.embed);
    fn(p + ".cls", spec.cls);
    fn(p + ".pos", spec.pos);
  }
  for (auto& [mod, stack] : m.encoder.adapters)
    for (std::size_t k = 0; k < stack.size(); ++k)
      visit_layer(std::string(to_string(mod)) + ".adapter" + std::to_string(k),
                  stack[k]);
  for (std::size_t k = 0; k < m.encoder.shared.size(); ++k)
    visit_layer("shared.layer" + std::to_string(k), m.encoder.shared[k]);
  fn("final_ln.gamma", m.encoder.final_ln.gamma);
  fn("final_ln.beta", m.encoder.final_ln.beta);
  for (auto& [id, head] : m.heads) {
    const std::string p = "task" + std::to_string(id) + ".head";
    fn(p + ".w", head.w);
    fn(p + ".b", head.b);
  }
}

template <typename T>
Tensor<T>* find_param(PolyViT<T>& m, const std::string& name) {
  Tensor<T>* found = nullptr;
  visit_params(m, [&](const std::string& n, Tensor<T>& t) {
    if (n == name) found = &t;
  });
  return found;
}

template <typename T>
ModalitySpec<T> make_modality_spec(const ModalityGeometry& geom, std::size_t width,
                                   std::uint64_t seed) {
  geom.validate();
  const std::string tag = std::string(to_string(geom.modality)) + ".tokenizer";
  ModalitySpec<T> spec;
  spec.geometry = geom;
  spec.width = width;
  spec.embed = init_weight<T>({width, geom.patch_dim()}, geom.patch_dim(), seed,
                              tag + ".E");
  spec.cls = Tensor<T>::zeros({1, width});
  Rng pos_rng(seed, "init/" + tag + ".pos");
  spec.pos = Tensor<T>::normal({geom.seq_len(), width}, pos_rng, T{0},
                               static_cast<T>(0.02));
  return spec;
}

template <typename T>
TaskHead<T> make_task_head(const TaskSpec& task, std::size_t width,
                           std::uint64_t seed) {
  TaskHead<T> head;
  if (task.head_init == HeadInit::zeros) {
    head.w = Tensor<T>::zeros({task.num_classes, width});
  } else {
    head.w = init_weight<T>({task.num_classes, width}, width, seed,
                            "task" + std::to_string(task.id) + ".head.w");
  }
  head.b = Tensor<T>::zeros({task.num_classes});
  return head;
}

template <typename T>
PolyViT<T> build_polyvit(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PolyViT<T> m;
  m.width = cfg.width;
  m.n_heads = cfg.n_heads;
  m.layers = cfg.layers;
  m.layers_adapt = cfg.layers_adapt;
  for (const auto& g : cfg.modalities)
    m.modalities.emplace(g.modality, make_modality_spec<T>(g, cfg.width, seed));
  for (const auto& g : cfg.modalities) {
    auto& stack = m.encoder.adapters[g.modality];
    for (std::size_t k = 0; k < cfg.layers_adapt; ++k)
      stack.push_back(make_encoder_layer<T>(
          cfg.width, cfg.n_heads, seed,
          std::string(to_string(g.modality)) + ".adapter" + std::to_string(k)));
  }
  if (cfg.layers_adapt == 0) m.encoder.adapters.clear();
  for (std::size_t k = 0; k < cfg.layers - cfg.layers_adapt; ++k)
    m.encoder.shared.push_back(make_encoder_layer<T>(cfg.width, cfg.n_heads, seed,
                                                     "shared.layer" + std::to_string(k)));
  m.encoder.final_ln = make_layer_norm<T>(cfg.width);
  m.encoder.drop_prob = cfg.drop_prob;
  for (const auto& t : cfg.tasks)
    m.heads.emplace(t.id, make_task_head<T>(t, cfg.width, seed));
  m.tasks = cfg.tasks;
  return m;
}

// --- forward passes (one task at a time) ---

template <typename Ctx, typename T>
typename Ctx::V forward_features(Ctx& ctx, const PolyViT<T>& m, const Tensor<T>& raw,
                                 Modality modality) {
  auto it = m.modalities.find(modality);
  if (it == m.modalities.end())
    throw std::invalid_argument(std::string("model has no modality ") +
                                to_string(modality));
  auto z0 = tokenize(ctx, it->second, raw);
  auto z = encode(ctx, m.encoder, z0, modality);
  return ctx.slice_rows(z, 0, 1);  // class-token row [1 x d]
}

template <typename Ctx, typename T>
typename Ctx::V forward_logits(Ctx& ctx, const PolyViT<T>& m, const Tensor<T>& raw,
                               int task_id) {
  const TaskSpec& t = m.task(task_id);
  auto feats = forward_features(ctx, m, raw, t.modality);
  const TaskHead<T>& h = m.heads.at(task_id);
  return ctx.add_rowvec(ctx.matmul(feats, ctx.transpose(ctx.param(h.w))),
                        ctx.param(h.b));
}

template <typename T>
struct Example {
  Tensor<T> input;
  Tensor<T> target;  // dense length-C vector (one-hot, mixed, or multi-hot)
};

template <typename Ctx, typename T>
typename Ctx::V example_loss(Ctx& ctx, const PolyViT<T>& m, const Example<T>& ex,
                             int task_id) {
  auto logits = forward_logits(ctx, m, ex.input, task_id);
  if (m.task(task_id).loss == LossKind::softmax_ce)
    return ctx.softmax_cross_entropy(logits, ex.target);
  return ctx.sigmoid_bce_mean(logits, ex.target);
}

template <typename Ctx, typename T>
typename Ctx::V batch_loss(Ctx& ctx, const PolyViT<T>& m,
                           const std::vector<Example<T>>& batch, int task_id) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  auto total = example_loss(ctx, m, batch[0], task_id);
  for (std::size_t i = 1; i < batch.size(); ++i)
    total = ctx.add(total, example_loss(ctx, m, batch[i], task_id));
  return ctx.scale(total, T{1} / static_cast<T>(batch.size()));
}

// --- analytic parameter accounting ---

struct ModelLayout {
  std::size_t layers = 12, width = 768, layers_adapt = 0;
  std::vector<ModalityGeometry> modalities;
  struct TaskDims {
    int id;
    Modality modality;
    std::size_t classes;
  };
  std::vector<TaskDims> tasks;
};

struct ParamBreakdown {
  unsigned long long shared = 0;  // shared layers + final LN
  std::map<Modality, unsigned long long> per_modality;  // tokenizer + adaptors
  std::map<int, unsigned long long> per_task;           // heads
  unsigned long long total = 0;
  unsigned long long fleet_total = 0;  // one full single-task model per task
  double fleet_ratio = 0;
};

// One encoder layer holds 12d^2 + 13d values: QKV maps 3d^2+3d, output
// projection d^2+d, MLP 8d^2+5d, two LayerNorms 4d.
inline unsigned long long encoder_layer_param_count(std::size_t d) {
  return 12ull * d * d + 13ull * d;
}

inline unsigned long long tokenizer_param_count(std::size_t d, std::size_t patch_dim,
                                                std::size_t seq_len) {
  return static_cast<unsigned long long>(d) * patch_dim + d +
         static_cast<unsigned long long>(seq_len) * d;
}

inline ParamBreakdown param_count(const ModelLayout& layout) {
  const std::size_t d = layout.width;
  const unsigned long long layer = encoder_layer_param_count(d);
  ParamBreakdown out;
  out.shared = (layout.layers - layout.layers_adapt) * layer + 2ull * d;
  std::map<Modality, const ModalityGeometry*> geoms;
  for (const auto& g : layout.modalities) geoms[g.modality] = &g;
  for (const auto& [mod, g] : geoms)
    out.per_modality[mod] = tokenizer_param_count(d, g->patch_dim(), g->seq_len()) +
                            layout.layers_adapt * layer;
  out.total = out.shared;
  for (const auto& [mod, n] : out.per_modality) out.total += n;
  for (const auto& t : layout.tasks) {
    out.per_task[t.id] = static_cast<unsigned long long>(t.classes) * (d + 1);
    out.total += out.per_task[t.id];
    const auto* g = geoms.at(t.modality);
    out.fleet_total += tokenizer_param_count(d, g->patch_dim(), g->seq_len()) +
                       layout.layers * layer + 2ull * d +
                       static_cast<unsigned long long>(t.classes) * (d + 1);
  }
  out.fleet_ratio = out.total ? static_cast<double>(out.fleet_total) /
                                    static_cast<double>(out.total)
                              : 0.0;
  return out;
}

template <typename T>
ModelLayout layout_of(const PolyViT<T>& m) {
  ModelLayout layout;
  layout.layers = m.layers;
  layout.width = m.width;
  layout.layers_adapt = m.layers_adapt;
  for (const auto& [mod, spec] : m.modalities) layout.modalities.push_back(spec.geometry);
  for (const auto& t : m.tasks)
    layout.tasks.push_back({t.id, t.modality, t.num_classes});
  return layout;
}

template <typename T>
ParamBreakdown param_count(const PolyViT<T>& m) {
  return param_count(layout_of(m));
}

}  // namespace polyvit
