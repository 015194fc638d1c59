#pragma once

// Pre-norm transformer encoder: y = MSA(LN(z)) + z, then z' = MLP(LN(y)) + y,
// L layers deep, with a final LayerNorm. The first layers_adapt layers exist
// once per modality; the remaining shared layers are the same parameter
// objects for every input, which is what makes one gradient accumulator per
// shared parameter observable. Stochastic depth drops each residual branch
// independently with a constant per-modality probability.

#include <map>
#include <vector>

#include "polyvit/tokenizer.hpp"

namespace polyvit {

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;  // [d]
  Tensor<T> beta;   // [d]
};

template <typename T>
struct HeadParams {
  Tensor<T> q_w, k_w, v_w;  // [head_dim x d]
  Tensor<T> q_b, k_b, v_b;  // [head_dim]
};

template <typename T>
struct MsaParams {
  std::vector<HeadParams<T>> heads;
  Tensor<T> out_w;  // [d x d]
  Tensor<T> out_b;  // [d]
};

template <typename T>
struct MlpParams {
  Tensor<T> fc1_w;  // [4d x d]
  Tensor<T> fc1_b;  // [4d]
  Tensor<T> fc2_w;  // [d x 4d]
  Tensor<T> fc2_b;  // [d]
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> ln1;
  MsaParams<T> msa;
  LayerNormParams<T> ln2;
  MlpParams<T> mlp;
};

template <typename T>
struct EncoderStack {
  std::map<Modality, std::vector<EncoderLayerParams<T>>> adapters;
  std::vector<EncoderLayerParams<T>> shared;
  LayerNormParams<T> final_ln;
  // Probability of dropping a residual branch during training; 0 disables.
  std::map<Modality, double> drop_prob;

  std::size_t depth() const {
    return shared.size() +
           (adapters.empty() ? 0 : adapters.begin()->second.size());
  }
};

inline constexpr double kLayerNormEps = 1e-6;

// Scaled dot-product attention per head, heads concatenated then projected.
template <typename Ctx, typename T>
typename Ctx::V msa(Ctx& ctx, typename Ctx::V x, const MsaParams<T>& p) {
  const std::size_t head_dim = p.heads.front().q_w.extent(0);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<typename Ctx::V> outs;
  outs.reserve(p.heads.size());
  for (const auto& h : p.heads) {
    auto q = ctx.add_rowvec(ctx.matmul(x, ctx.transpose(ctx.param(h.q_w))),
                            ctx.param(h.q_b));
    auto k = ctx.add_rowvec(ctx.matmul(x, ctx.transpose(ctx.param(h.k_w))),
                            ctx.param(h.k_b));
    auto v = ctx.add_rowvec(ctx.matmul(x, ctx.transpose(ctx.param(h.v_w))),
                            ctx.param(h.v_b));
    auto attn = ctx.softmax_rows(ctx.scale(ctx.matmul(q, ctx.transpose(k)), scale));
    outs.push_back(ctx.matmul(attn, v));
  }
  auto merged = outs.size() == 1 ? outs.front() : ctx.concat_cols(outs);
  return ctx.add_rowvec(ctx.matmul(merged, ctx.transpose(ctx.param(p.out_w))),
                        ctx.param(p.out_b));
}

template <typename Ctx, typename T>
typename Ctx::V mlp(Ctx& ctx, typename Ctx::V x, const MlpParams<T>& p) {
  auto h = ctx.gelu(ctx.add_rowvec(ctx.matmul(x, ctx.transpose(ctx.param(p.fc1_w))),
                                   ctx.param(p.fc1_b)));
  return ctx.add_rowvec(ctx.matmul(h, ctx.transpose(ctx.param(p.fc2_w))),
                        ctx.param(p.fc2_b));
}

// One residual branch under stochastic depth. Training: drop with probability
// 1 - survival, scale kept branches by 1/survival. Eval: always apply,
// unscaled. survival >= 1 short-circuits so the no-drop path consumes no
// randomness and adds no scale op.
template <typename Ctx, typename T>
typename Ctx::V residual_branch(Ctx& ctx, typename Ctx::V base,
                                typename Ctx::V branch, T survival) {
  if (survival >= T{1} || !ctx.training) return ctx.add(base, branch);
  if (!ctx.rng)
    throw std::logic_error("stochastic depth requires an rng in training mode");
  if (ctx.rng->uniform() >= static_cast<double>(survival)) return base;
  return ctx.add(base, ctx.scale(branch, T{1} / survival));
}

template <typename Ctx, typename T>
typename Ctx::V encoder_layer(Ctx& ctx, typename Ctx::V z,
                              const EncoderLayerParams<T>& p, T survival) {
  auto ln1 = ctx.layer_norm(z, ctx.param(p.ln1.gamma), ctx.param(p.ln1.beta),
                            static_cast<T>(kLayerNormEps));
  auto y = residual_branch(ctx, z, msa(ctx, ln1, p.msa), survival);
  auto ln2 = ctx.layer_norm(y, ctx.param(p.ln2.gamma), ctx.param(p.ln2.beta),
                            static_cast<T>(kLayerNormEps));
  return residual_branch(ctx, y, mlp(ctx, ln2, p.mlp), survival);
}

// Adaptor layers for the input's modality, then the shared layers, then the
// final LayerNorm. Branch-drop draws advance layer by layer, attention branch
// before MLP branch; that order is part of the reproducibility contract.
template <typename Ctx, typename T>
typename Ctx::V encode(Ctx& ctx, const EncoderStack<T>& stack, typename Ctx::V z0,
                       Modality modality) {
  T survival{1};
  if (auto it = stack.drop_prob.find(modality); it != stack.drop_prob.end())
    survival = T{1} - static_cast<T>(it->second);
  auto z = z0;
  if (auto it = stack.adapters.find(modality); it != stack.adapters.end())
    for (const auto& layer : it->second) z = encoder_layer(ctx, z, layer, survival);
  else if (!stack.adapters.empty())
    throw std::invalid_argument(std::string("no adaptor stack for modality ") +
                                to_string(modality));
  for (const auto& layer : stack.shared) z = encoder_layer(ctx, z, layer, survival);
  return ctx.layer_norm(z, ctx.param(stack.final_ln.gamma),
                        ctx.param(stack.final_ln.beta),
                        static_cast<T>(kLayerNormEps));
}

// Builders. Weight matrices are LeCun-normal in their input width, biases and
// class-token-style parameters zero, LN affines identity. Each tensor draws
// from its own tag-derived stream so adding parameters elsewhere never shifts
// existing initializations.
template <typename T>
Tensor<T> init_weight(const Shape& shape, std::size_t fan_in, std::uint64_t seed,
                      const std::string& tag) {
  Rng rng(seed, "init/" + tag);
  return Tensor<T>::lecun_normal(shape, fan_in, rng);
}

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t d) {
  return {Tensor<T>::full({d}, T{1}), Tensor<T>::zeros({d})};
}

template <typename T>
EncoderLayerParams<T> make_encoder_layer(std::size_t d, std::size_t n_heads,
                                         std::uint64_t seed, const std::string& tag) {
  if (n_heads == 0 || d % n_heads != 0)
    throw std::invalid_argument("width " + std::to_string(d) +
                                " not divisible by head count " +
                                std::to_string(n_heads));
  const std::size_t hd = d / n_heads;
  EncoderLayerParams<T> layer;
  layer.ln1 = make_layer_norm<T>(d);
  layer.ln2 = make_layer_norm<T>(d);
  for (std::size_t i = 0; i < n_heads; ++i) {
    const std::string ht = tag + ".msa.h" + std::to_string(i);
    layer.msa.heads.push_back(HeadParams<T>{
        init_weight<T>({hd, d}, d, seed, ht + ".q_w"),
        init_weight<T>({hd, d}, d, seed, ht + ".k_w"),
        init_weight<T>({hd, d}, d, seed, ht + ".v_w"), Tensor<T>::zeros({hd}),
        Tensor<T>::zeros({hd}), Tensor<T>::zeros({hd})});
  }
  layer.msa.out_w = init_weight<T>({d, d}, d, seed, tag + ".msa.out_w");
  layer.msa.out_b = Tensor<T>::zeros({d});
  layer.mlp.fc1_w = init_weight<T>({4 * d, d}, d, seed, tag + ".mlp.fc1_w");
  layer.mlp.fc1_b = Tensor<T>::zeros({4 * d});
  layer.mlp.fc2_w = init_weight<T>({d, 4 * d}, 4 * d, seed, tag + ".mlp.fc2_w");
  layer.mlp.fc2_b = Tensor<T>::zeros({d});
  return layer;
}

}  // namespace polyvit
