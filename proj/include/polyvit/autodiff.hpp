#pragma once

// Reverse-mode autodiff over a linear tape. Forward calls append nodes (value
// plus backward closure); backward() replays closures in reverse creation
// order, which is a valid topological order because an input always precedes
// its consumer. Gradient buffers are reset at the start of every backward, so
// repeated backward passes over one tape are bit-identical.
//
// Node values are computed by the kernels in kernels.hpp, the same functions
// the no-tape evaluator uses, so recording gradients never changes the bits of
// the forward values.

#include <functional>
#include <unordered_map>

#include "polyvit/kernels.hpp"
#include "polyvit/tensor.hpp"

namespace polyvit {

template <typename T>
class GradTape;

// Lightweight handle: tape pointer plus node index.
template <typename T>
struct Var {
  GradTape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, int)>;

  Var<T> leaf(const Tensor<T>& value, bool needs_grad) {
    return push(value, {}, needs_grad, nullptr);
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() root with respect to node id. Nodes the
  // root does not depend on report an exact zero tensor.
  Tensor<T> grad(const Var<T>& v) const {
    const auto& buf = grads_[v.id];
    if (buf.empty()) return Tensor<T>::zeros(nodes_[v.id].value.shape());
    return Tensor<T>(nodes_[v.id].value.shape(), buf);
  }

  void backward(const Var<T>& root) {
    if (root.tape != this) throw std::invalid_argument("backward: foreign var");
    if (nodes_[root.id].value.numel() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  shape_str(nodes_[root.id].value.shape()));
    grads_.assign(nodes_.size(), {});
    active_.assign(nodes_.size(), 0);
    active_[root.id] = nodes_[root.id].needs_grad;
    for (int i = root.id; i >= 0; --i) {
      if (!active_[i]) continue;
      for (int in : nodes_[i].inputs)
        if (nodes_[in].needs_grad) active_[in] = 1;
    }
    if (!active_[root.id]) return;
    grad_buf(root.id).assign(1, T{1});
    for (int i = root.id; i >= 0; --i) {
      if (!active_[i] || grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, i);
    }
  }

  // --- ops ---

  Var<T> add(Var<T> a, Var<T> b) {
    Tensor<T> out = kernels::add(value(a.id), value(b.id));
    return push(std::move(out), {a.id, b.id}, needs(a, b),
                [a = a.id, b = b.id](GradTape& t, int self) {
                  const auto& g = t.grads_[self];
                  t.accumulate(a, g);
                  t.accumulate(b, g);
                });
  }

  Var<T> scale(Var<T> a, T factor) {
    Tensor<T> out = kernels::scale(value(a.id), factor);
    return push(std::move(out), {a.id}, nodes_[a.id].needs_grad,
                [a = a.id, factor](GradTape& t, int self) {
                  if (!t.wants(a)) return;
                  const auto& g = t.grads_[self];
                  auto& ga = t.grad_buf(a);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                });
  }

  Var<T> mul(Var<T> a, Var<T> b) {
    Tensor<T> out = kernels::mul(value(a.id), value(b.id));
    return push(std::move(out), {a.id, b.id}, needs(a, b),
                [a = a.id, b = b.id, va = value(a.id), vb = value(b.id)](GradTape& t,
                                                                         int self) {
                  const auto& g = t.grads_[self];
                  if (t.wants(a)) {
                    auto& ga = t.grad_buf(a);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                  }
                  if (t.wants(b)) {
                    auto& gb = t.grad_buf(b);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                  }
                });
  }

  Var<T> matmul(Var<T> a, Var<T> b) {
    Tensor<T> out = kernels::matmul(value(a.id), value(b.id));
    const std::size_t m = value(a.id).extent(0), k = value(a.id).extent(1),
                      n = value(b.id).extent(1);
    return push(std::move(out), {a.id, b.id}, needs(a, b),
                [a = a.id, b = b.id, va = value(a.id), vb = value(b.id), m, k,
                 n](GradTape& t, int self) {
                  const auto& g = t.grads_[self];
                  if (t.wants(a)) {
                    // dA = G . B^T
                    auto& ga = t.grad_buf(a);
                    const T* pb = vb.begin();
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t kk = 0; kk < k; ++kk) {
                        T s{0};
                        const T* pg = g.data() + i * n;
                        const T* pbk = pb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) s += pg[j] * pbk[j];
                        ga[i * k + kk] += s;
                      }
                  }
                  if (t.wants(b)) {
                    // dB = A^T . G
                    auto& gb = t.grad_buf(b);
                    const T* pa = va.begin();
                    for (std::size_t kk = 0; kk < k; ++kk)
                      for (std::size_t i = 0; i < m; ++i) {
                        const T aik = pa[i * k + kk];
                        const T* pg = g.data() + i * n;
                        T* pgb = gb.data() + kk * n;
                        for (std::size_t j = 0; j < n; ++j) pgb[j] += aik * pg[j];
                      }
                  }
                });
  }

  Var<T> transpose(Var<T> a) {
    Tensor<T> out = kernels::transpose(value(a.id));
    const std::size_t m = value(a.id).extent(0), n = value(a.id).extent(1);
    return push(std::move(out), {a.id}, nodes_[a.id].needs_grad,
                [a = a.id, m, n](GradTape& t, int self) {
                  if (!t.wants(a)) return;
                  const auto& g = t.grads_[self];
                  auto& ga = t.grad_buf(a);
                  for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
                });
  }

  Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = value(a.id).reshaped(std::move(shape));
    return push(std::move(out), {a.id}, nodes_[a.id].needs_grad,
                [a = a.id](GradTape& t, int self) { t.accumulate(a, t.grads_[self]); });
  }

  Var<T> add_rowvec(Var<T> m, Var<T> v) {
    Tensor<T> out = kernels::add_rowvec(value(m.id), value(v.id));
    const std::size_t rows = value(m.id).extent(0), n = value(m.id).extent(1);
    return push(std::move(out), {m.id, v.id}, needs(m, v),
                [m = m.id, v = v.id, rows, n](GradTape& t, int self) {
                  const auto& g = t.grads_[self];
                  if (t.wants(m)) t.accumulate(m, g);
                  if (t.wants(v)) {
                    auto& gv = t.grad_buf(v);
                    for (std::size_t i = 0; i < rows; ++i)
                      for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
                  }
                });
  }

  Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    std::vector<Tensor<T>> vals;
    std::vector<int> ids;
    bool ng = false;
    for (const auto& p : parts) {
      vals.push_back(value(p.id));
      ids.push_back(p.id);
      ng = ng || nodes_[p.id].needs_grad;
    }
    Tensor<T> out = kernels::concat_rows(std::span<const Tensor<T>>(vals));
    std::vector<std::size_t> sizes;
    for (const auto& v : vals) sizes.push_back(v.numel());
    return push(std::move(out), ids, ng,
                [ids, sizes](GradTape& t, int self) {
                  const auto& g = t.grads_[self];
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    if (t.wants(ids[p])) {
                      auto& gp = t.grad_buf(ids[p]);
                      for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += g[off + i];
                    }
                    off += sizes[p];
                  }
                });
  }

  Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    std::vector<Tensor<T>> vals;
    std::vector<int> ids;
    bool ng = false;
    for (const auto& p : parts) {
      vals.push_back(value(p.id));
      ids.push_back(p.id);
      ng = ng || nodes_[p.id].needs_grad;
    }
    Tensor<T> out = kernels::concat_cols(std::span<const Tensor<T>>(vals));
    const std::size_t rows = out.extent(0), total = out.extent(1);
    std::vector<std::size_t> widths;
    for (const auto& v : vals) widths.push_back(v.extent(1));
    return push(std::move(out), ids, ng,
                [ids, widths, rows, total](GradTape& t, int self) {
                  const auto& g = t.grads_[self];
                  std::size_t col0 = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t n = widths[p];
                    if (t.wants(ids[p])) {
                      auto& gp = t.grad_buf(ids[p]);
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                          gp[i * n + j] += g[i * total + col0 + j];
                    }
                    col0 += n;
                  }
                });
  }

  Var<T> slice_rows(Var<T> a, std::size_t row0, std::size_t count) {
    Tensor<T> out = kernels::slice_rows(value(a.id), row0, count);
    const std::size_t n = value(a.id).extent(1);
    return push(std::move(out), {a.id}, nodes_[a.id].needs_grad,
                [a = a.id, row0, count, n](GradTape& t, int self) {
                  if (!t.wants(a)) return;
                  const auto& g = t.grads_[self];
                  auto& ga = t.grad_buf(a);
                  for (std::size_t i = 0; i < count * n; ++i) ga[row0 * n + i] += g[i];
                });
  }

  Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    auto res = kernels::layer_norm(value(x.id), value(gamma.id), value(beta.id), eps);
    const std::size_t rows = value(x.id).extent(0), n = value(x.id).extent(1);
    return push(
        std::move(res.out), {x.id, gamma.id, beta.id},
        needs(x, gamma) || nodes_[beta.id].needs_grad,
        [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(res.xhat),
         inv_std = std::move(res.inv_std), gv = value(gamma.id), rows,
         n](GradTape& t, int self) {
          const auto& g = t.grads_[self];
          if (t.wants(x)) {
            auto& gx = t.grad_buf(x);
            for (std::size_t i = 0; i < rows; ++i) {
              T mean_gg{0}, mean_ggx{0};
              for (std::size_t j = 0; j < n; ++j) {
                const T gg = g[i * n + j] * gv[j];
                mean_gg += gg;
                mean_ggx += gg * xhat[i * n + j];
              }
              mean_gg /= static_cast<T>(n);
              mean_ggx /= static_cast<T>(n);
              for (std::size_t j = 0; j < n; ++j) {
                const T gg = g[i * n + j] * gv[j];
                gx[i * n + j] +=
                    inv_std[i] * (gg - mean_gg - xhat[i * n + j] * mean_ggx);
              }
            }
          }
          if (t.wants(gm)) {
            auto& gg = t.grad_buf(gm);
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < n; ++j)
                gg[j] += g[i * n + j] * xhat[i * n + j];
          }
          if (t.wants(bt)) {
            auto& gb = t.grad_buf(bt);
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          }
        });
  }

  Var<T> gelu(Var<T> x) {
    Tensor<T> out = kernels::gelu(value(x.id));
    return push(std::move(out), {x.id}, nodes_[x.id].needs_grad,
                [x = x.id, vx = value(x.id)](GradTape& t, int self) {
                  if (!t.wants(x)) return;
                  const auto& g = t.grads_[self];
                  const Tensor<T> f = kernels::gelu_grad_factor(vx);
                  auto& gx = t.grad_buf(x);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * f[i];
                });
  }

  Var<T> softmax_rows(Var<T> x) {
    Tensor<T> out = kernels::softmax_rows(value(x.id));
    const std::size_t rows = out.extent(0), n = out.extent(1);
    return push(std::move(out), {x.id}, nodes_[x.id].needs_grad,
                [x = x.id, rows, n](GradTape& t, int self) {
                  if (!t.wants(x)) return;
                  const auto& g = t.grads_[self];
                  const Tensor<T>& s = t.value(self);
                  auto& gx = t.grad_buf(x);
                  for (std::size_t i = 0; i < rows; ++i) {
                    T dot{0};
                    for (std::size_t j = 0; j < n; ++j)
                      dot += g[i * n + j] * s[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      gx[i * n + j] += s[i * n + j] * (g[i * n + j] - dot);
                  }
                });
  }

  Var<T> sum_all(Var<T> a) {
    Tensor<T> out = kernels::sum_all(value(a.id));
    return push(std::move(out), {a.id}, nodes_[a.id].needs_grad,
                [a = a.id](GradTape& t, int self) {
                  if (!t.wants(a)) return;
                  const T g = t.grads_[self][0];
                  auto& ga = t.grad_buf(a);
                  for (auto& x : ga) x += g;
                });
  }

  // target is a constant, not a tape node.
  Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& target) {
    auto res = kernels::softmax_cross_entropy(value(logits.id), target);
    return push(std::move(res.loss), {logits.id}, nodes_[logits.id].needs_grad,
                [l = logits.id, probs = std::move(res.probs), target,
                 mass = res.target_mass](GradTape& t, int self) {
                  if (!t.wants(l)) return;
                  const T g = t.grads_[self][0];
                  auto& gl = t.grad_buf(l);
                  for (std::size_t j = 0; j < gl.size(); ++j)
                    gl[j] += g * (probs[j] * mass - target[j]);
                });
  }

  Var<T> sigmoid_bce_mean(Var<T> logits, const Tensor<T>& target) {
    Tensor<T> out = kernels::sigmoid_bce_mean(value(logits.id), target);
    return push(std::move(out), {logits.id}, nodes_[logits.id].needs_grad,
                [l = logits.id, vx = value(logits.id), target](GradTape& t, int self) {
                  if (!t.wants(l)) return;
                  const T g = t.grads_[self][0];
                  const Tensor<T> s = kernels::sigmoid(vx);
                  const T inv_n = T{1} / static_cast<T>(target.numel());
                  auto& gl = t.grad_buf(l);
                  for (std::size_t j = 0; j < gl.size(); ++j)
                    gl[j] += g * (s[j] - target[j]) * inv_n;
                });
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<int> inputs;
    bool needs_grad;
    BackwardFn backward;
  };

  friend struct Var<T>;

  Var<T> push(Tensor<T> value, std::vector<int> inputs, bool needs_grad,
              BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), needs_grad,
                          needs_grad ? std::move(fn) : nullptr});
    grads_.emplace_back();
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var<T> a, Var<T> b) const {
    return nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
  }

  bool wants(int id) const { return active_[id]; }

  std::vector<T>& grad_buf(int id) {
    auto& buf = grads_[id];
    if (buf.empty()) buf.assign(nodes_[id].value.numel(), T{0});
    return buf;
  }

  void accumulate(int id, const std::vector<T>& g) {
    if (!wants(id)) return;
    auto& buf = grad_buf(id);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<char> active_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Forward context that records gradients. Model code is written against the
// context interface once; this one routes through the tape, EvalContext below
// routes straight to the kernels.
template <typename T>
struct GradContext {
  using Scalar = T;
  using V = Var<T>;

  GradTape<T>* tape;
  bool training = true;
  Rng* rng = nullptr;

  explicit GradContext(GradTape<T>* t, bool training_mode = true,
                       Rng* depth_rng = nullptr)
      : tape(t), training(training_mode), rng(depth_rng) {}

  // One leaf per distinct parameter buffer: a parameter shared between two
  // places in the forward graph accumulates into a single gradient.
  V param(const Tensor<T>& t) {
    auto it = param_memo_.find(t.data_id());
    if (it != param_memo_.end()) return it->second;
    V v = tape->leaf(t, t.requires_grad());
    param_memo_.emplace(t.data_id(), v);
    return v;
  }

  V constant(const Tensor<T>& t) { return tape->leaf(t, false); }

  // Whether this buffer participated in the recorded forward pass, without
  // registering it. The trainer uses this to update exactly the parameters a
  // step touched: an absent head must not feel momentum decay.
  const V* lookup(const Tensor<T>& t) const {
    auto it = param_memo_.find(t.data_id());
    return it == param_memo_.end() ? nullptr : &it->second;
  }

  V add(V a, V b) { return tape->add(a, b); }
  V scale(V a, T f) { return tape->scale(a, f); }
  V matmul(V a, V b) { return tape->matmul(a, b); }
  V transpose(V a) { return tape->transpose(a); }
  V add_rowvec(V m, V v) { return tape->add_rowvec(m, v); }
  V concat_rows(const std::vector<V>& parts) { return tape->concat_rows(parts); }
  V concat_cols(const std::vector<V>& parts) { return tape->concat_cols(parts); }
  V slice_rows(V a, std::size_t r0, std::size_t n) { return tape->slice_rows(a, r0, n); }
  V layer_norm(V x, V g, V b, T eps) { return tape->layer_norm(x, g, b, eps); }
  V gelu(V x) { return tape->gelu(x); }
  V softmax_rows(V x) { return tape->softmax_rows(x); }
  V softmax_cross_entropy(V l, const Tensor<T>& t) {
    return tape->softmax_cross_entropy(l, t);
  }
  V sigmoid_bce_mean(V l, const Tensor<T>& t) { return tape->sigmoid_bce_mean(l, t); }

  static const Tensor<T>& value_of(const V& v) { return v.value(); }

 private:
  std::unordered_map<const void*, V> param_memo_;
};

// Value-only context: same kernel calls in the same order, no tape. Used for
// finite-difference probes, evaluation, and frozen-trunk feature extraction.
template <typename T>
struct EvalContext {
  using Scalar = T;
  using V = Tensor<T>;

  bool training = false;
  Rng* rng = nullptr;

  V param(const Tensor<T>& t) { return t; }
  V constant(const Tensor<T>& t) { return t; }

  V add(const V& a, const V& b) { return kernels::add(a, b); }
  V scale(const V& a, T f) { return kernels::scale(a, f); }
  V matmul(const V& a, const V& b) { return kernels::matmul(a, b); }
  V transpose(const V& a) { return kernels::transpose(a); }
  V add_rowvec(const V& m, const V& v) { return kernels::add_rowvec(m, v); }
  V concat_rows(const std::vector<V>& parts) {
    return kernels::concat_rows(std::span<const Tensor<T>>(parts));
  }
  V concat_cols(const std::vector<V>& parts) {
    return kernels::concat_cols(std::span<const Tensor<T>>(parts));
  }
  V slice_rows(const V& a, std::size_t r0, std::size_t n) {
    return kernels::slice_rows(a, r0, n);
  }
  V layer_norm(const V& x, const V& g, const V& b, T eps) {
    return kernels::layer_norm(x, g, b, eps).out;
  }
  V gelu(const V& x) { return kernels::gelu(x); }
  V softmax_rows(const V& x) { return kernels::softmax_rows(x); }
  V softmax_cross_entropy(const V& l, const Tensor<T>& t) {
    return kernels::softmax_cross_entropy(l, t).loss;
  }
  V sigmoid_bce_mean(const V& l, const Tensor<T>& t) {
    return kernels::sigmoid_bce_mean(l, t);
  }

  static const Tensor<T>& value_of(const V& v) { return v; }
};

}  // namespace polyvit
