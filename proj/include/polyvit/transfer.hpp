#pragma once

// Initializing a co-trained model from a pretrained single-modality encoder:
// positional tables are resampled across grids, the 2D patch kernel is
// converted across channel counts and inflated along the frame axis for
// video, and encoder layers are assigned into per-modality adaptor stacks
// plus the shared trunk. All conversions are pure and deterministic; the
// exactness-sensitive ones (identity resample, frame means of identical
// copies) are written so the invariants hold bit for bit.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "polyvit/encoder.hpp"
#include "polyvit/model.hpp"
#include "polyvit/rng.hpp"
#include "polyvit/tensor.hpp"
#include "polyvit/tokenizer.hpp"

namespace polyvit {

// How a 2D patch kernel becomes a 3D one. central_frame zero-pads around the
// middle frame (default for training-time init); replicate copies the kernel
// to every frame (cross-modal probing); replicate_scaled divides the copies
// by the frame count so a static video produces the original image response.
enum class InflateStrategy { central_frame, replicate, replicate_scaled };

inline const char* to_string(InflateStrategy s) {
  switch (s) {
    case InflateStrategy::central_frame: return "central_frame";
    case InflateStrategy::replicate: return "replicate";
    case InflateStrategy::replicate_scaled: return "replicate_scaled";
  }
  throw std::invalid_argument("unknown inflate strategy");
}

inline InflateStrategy parse_inflate_strategy(const std::string& s) {
  if (s == "central_frame") return InflateStrategy::central_frame;
  if (s == "replicate") return InflateStrategy::replicate;
  if (s == "replicate_scaled") return InflateStrategy::replicate_scaled;
  throw std::invalid_argument("unknown inflate strategy \"" + s + "\"");
}

// A single-modality encoder used as the initialization source: a 2D patch
// tokenizer (kernel, class token, positional table for the source grid) and
// a full layer stack with its final LayerNorm.
template <typename T>
struct PretrainedViT {
  ModalitySpec<T> tokenizer;
  std::vector<EncoderLayerParams<T>> layers;
  LayerNormParams<T> final_ln;
};

// Fresh-storage copy. Assigned layers must be independent parameters: the
// gradient context keys leaves by buffer identity, so copies sharing storage
// would silently train as tied weights.
template <typename T>
Tensor<T> clone_tensor(const Tensor<T>& t) {
  std::vector<T> vals(t.begin(), t.end());
  return Tensor<T>(t.shape(), std::move(vals), t.requires_grad());
}

template <typename T>
LayerNormParams<T> clone_layer_norm(const LayerNormParams<T>& ln) {
  return {clone_tensor(ln.gamma), clone_tensor(ln.beta)};
}

template <typename T>
EncoderLayerParams<T> clone_layer(const EncoderLayerParams<T>& src) {
  EncoderLayerParams<T> out;
  out.ln1 = clone_layer_norm(src.ln1);
  out.ln2 = clone_layer_norm(src.ln2);
  for (const auto& h : src.msa.heads)
    out.msa.heads.push_back({clone_tensor(h.q_w), clone_tensor(h.k_w),
                             clone_tensor(h.v_w), clone_tensor(h.q_b),
                             clone_tensor(h.k_b), clone_tensor(h.v_b)});
  out.msa.out_w = clone_tensor(src.msa.out_w);
  out.msa.out_b = clone_tensor(src.msa.out_b);
  out.mlp.fc1_w = clone_tensor(src.mlp.fc1_w);
  out.mlp.fc1_b = clone_tensor(src.mlp.fc1_b);
  out.mlp.fc2_w = clone_tensor(src.mlp.fc2_w);
  out.mlp.fc2_b = clone_tensor(src.mlp.fc2_b);
  return out;
}

// Bilinear resampling of a positional table between spatial grids. Row 0 is
// the class slot and is copied unchanged; the remaining rows form an h x w
// field per embedding channel, resampled with the align-corners convention
// (destination corner cells sample source corner cells). Matching grids
// return the input table itself, interpolation is written in offset form
// (a + t*(b-a)) so constant fields and hit source grid points reproduce
// exactly, and a destination axis of length 1 samples source coordinate 0.
template <typename T>
Tensor<T> interp_pos(const Tensor<T>& table, std::size_t src_h, std::size_t src_w,
                     std::size_t dst_h, std::size_t dst_w) {
  if (src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0)
    throw std::invalid_argument("positional grids must be non-empty");
  if (table.rank() != 2 || table.extent(0) != 1 + src_h * src_w)
    throw std::invalid_argument(
        "positional table has " + std::to_string(table.rank() == 2 ? table.extent(0) : 0) +
        " rows, expected " + std::to_string(1 + src_h * src_w));
  if (src_h == dst_h && src_w == dst_w) return table;
  const std::size_t d = table.extent(1);
  std::vector<T> out((1 + dst_h * dst_w) * d);
  for (std::size_t c = 0; c < d; ++c) out[c] = table[c];
  const auto src_coord = [](std::size_t i, std::size_t dst_n, std::size_t src_n) {
    if (dst_n == 1 || src_n == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src_n - 1) /
           static_cast<double>(dst_n - 1);
  };
  const auto cell = [&](std::size_t y, std::size_t x, std::size_t c) {
    return table[(1 + y * src_w + x) * d + c];
  };
  for (std::size_t i = 0; i < dst_h; ++i) {
    const double y = src_coord(i, dst_h, src_h);
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, src_h - 1);
    const T fy = static_cast<T>(y - static_cast<double>(y0));
    for (std::size_t j = 0; j < dst_w; ++j) {
      const double x = src_coord(j, dst_w, src_w);
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, src_w - 1);
      const T fx = static_cast<T>(x - static_cast<double>(x0));
      T* row = out.data() + (1 + i * dst_w + j) * d;
      for (std::size_t c = 0; c < d; ++c) {
        const T top = cell(y0, x0, c) + fx * (cell(y0, x1, c) - cell(y0, x0, c));
        const T bot = cell(y1, x0, c) + fx * (cell(y1, x1, c) - cell(y1, x0, c));
        row[c] = top + fy * (bot - top);
      }
    }
  }
  return Tensor<T>({1 + dst_h * dst_w, d}, std::move(out));
}

// Turns a 2D patch kernel [d x (ph*pw*c)] into a 3D one [d x (f*ph*pw*c)].
// Kernel columns are frame-major, matching the patch raster, so each frame
// occupies one contiguous column block.
template <typename T>
Tensor<T> inflate_2d_to_3d(const Tensor<T>& e_img, std::size_t f, InflateStrategy strategy) {
  if (f == 0) throw std::invalid_argument("frame count must be at least 1");
  if (e_img.rank() != 2) throw std::invalid_argument("patch kernel must be rank 2");
  const std::size_t d = e_img.extent(0), block = e_img.extent(1);
  std::vector<T> out(d * f * block, T{0});
  const std::size_t center = f / 2;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t df = 0; df < f; ++df) {
      T* dst = out.data() + (r * f + df) * block;
      const T* src = e_img.begin() + r * block;
      switch (strategy) {
        case InflateStrategy::central_frame:
          if (df == center)
            for (std::size_t s = 0; s < block; ++s) dst[s] = src[s];
          break;
        case InflateStrategy::replicate:
          for (std::size_t s = 0; s < block; ++s) dst[s] = src[s];
          break;
        case InflateStrategy::replicate_scaled:
          for (std::size_t s = 0; s < block; ++s) dst[s] = src[s] / static_cast<T>(f);
          break;
      }
    }
  return Tensor<T>({d, f * block}, std::move(out));
}

// Sums the frame axis of a 3D patch kernel, producing the 2D kernel whose
// response on an image x equals the 3D kernel's response on the static video
// that repeats x on every frame.
template <typename T>
Tensor<T> collapse_3d_to_2d(const Tensor<T>& e_vid, std::size_t f) {
  if (f == 0) throw std::invalid_argument("frame count must be at least 1");
  if (e_vid.rank() != 2 || e_vid.extent(1) % f != 0)
    throw std::invalid_argument("kernel columns (" + std::to_string(e_vid.extent(1)) +
                                ") are not divisible by frame count " + std::to_string(f));
  const std::size_t d = e_vid.extent(0), block = e_vid.extent(1) / f;
  std::vector<T> out(d * block, T{0});
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t df = 0; df < f; ++df) {
      const T* src = e_vid.begin() + (r * f + df) * block;
      T* dst = out.data() + r * block;
      for (std::size_t s = 0; s < block; ++s) dst[s] += src[s];
    }
  return Tensor<T>({d, block}, std::move(out));
}

// Adapts a patch kernel across channel counts. Collapsing to one channel sums
// the source channels (the same rule as the frame collapse); expanding from
// one channel spreads the kernel uniformly so channel-replicated inputs give
// the original response. Other conversions are rejected.
template <typename T>
Tensor<T> convert_channels(const Tensor<T>& e, std::size_t c_src, std::size_t c_dst) {
  if (c_src == 0 || c_dst == 0)
    throw std::invalid_argument("channel counts must be at least 1");
  if (e.rank() != 2 || e.extent(1) % c_src != 0)
    throw std::invalid_argument("kernel columns (" + std::to_string(e.extent(1)) +
                                ") are not divisible by channel count " +
                                std::to_string(c_src));
  if (c_src == c_dst) return e;
  const std::size_t d = e.extent(0), spatial = e.extent(1) / c_src;
  if (c_dst == 1) {
    std::vector<T> out(d * spatial, T{0});
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t s = 0; s < spatial; ++s)
        for (std::size_t ch = 0; ch < c_src; ++ch)
          out[r * spatial + s] += e[(r * spatial + s) * c_src + ch];
    return Tensor<T>({d, spatial}, std::move(out));
  }
  if (c_src == 1) {
    std::vector<T> out(d * spatial * c_dst);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t s = 0; s < spatial; ++s)
        for (std::size_t ch = 0; ch < c_dst; ++ch)
          out[(r * spatial + s) * c_dst + ch] = e[r * spatial + s] / static_cast<T>(c_dst);
    return Tensor<T>({d, spatial * c_dst}, std::move(out));
  }
  throw std::invalid_argument("unsupported channel conversion " + std::to_string(c_src) +
                              " -> " + std::to_string(c_dst));
}

// Frame mean then spatial resample: each spatial cell's rows are averaged
// over frames (anchored at frame 0 as v0 + mean of differences, so identical
// frames reproduce frame 0 bit for bit), the class slot is copied, and the
// 2D table is resampled to the destination grid.
template <typename T>
Tensor<T> pos_video_to_2d(const Tensor<T>& table, std::size_t g_f, std::size_t g_h,
                          std::size_t g_w, std::size_t dst_h, std::size_t dst_w) {
  if (g_f == 0) throw std::invalid_argument("frame grid must be non-empty");
  if (table.rank() != 2 || table.extent(0) != 1 + g_f * g_h * g_w)
    throw std::invalid_argument(
        "positional table has " + std::to_string(table.rank() == 2 ? table.extent(0) : 0) +
        " rows, expected " + std::to_string(1 + g_f * g_h * g_w));
  const std::size_t d = table.extent(1);
  std::vector<T> mean((1 + g_h * g_w) * d);
  for (std::size_t c = 0; c < d; ++c) mean[c] = table[c];
  for (std::size_t cell = 0; cell < g_h * g_w; ++cell)
    for (std::size_t c = 0; c < d; ++c) {
      const T base = table[(1 + cell) * d + c];
      if (g_f == 1) {
        mean[(1 + cell) * d + c] = base;
        continue;
      }
      T acc{0};
      for (std::size_t tf = 1; tf < g_f; ++tf)
        acc += table[(1 + tf * g_h * g_w + cell) * d + c] - base;
      mean[(1 + cell) * d + c] = base + acc / static_cast<T>(g_f);
    }
  return interp_pos(Tensor<T>({1 + g_h * g_w, d}, std::move(mean)), g_h, g_w, dst_h,
                    dst_w);
}

// Spatial resample then repeat per frame: the 2D table is resampled to the
// video's spatial grid and its grid rows are copied for every frame, so all
// frames of a cell share one row. The class slot is copied once.
template <typename T>
Tensor<T> pos_2d_to_video(const Tensor<T>& table, std::size_t src_h, std::size_t src_w,
                          std::size_t g_f, std::size_t dst_h, std::size_t dst_w) {
  if (g_f == 0) throw std::invalid_argument("frame grid must be non-empty");
  const Tensor<T> flat = interp_pos(table, src_h, src_w, dst_h, dst_w);
  const std::size_t d = flat.extent(1), cells = dst_h * dst_w;
  std::vector<T> out((1 + g_f * cells) * d);
  for (std::size_t c = 0; c < d; ++c) out[c] = flat[c];
  for (std::size_t tf = 0; tf < g_f; ++tf)
    for (std::size_t cell = 0; cell < cells; ++cell)
      for (std::size_t c = 0; c < d; ++c)
        out[(1 + tf * cells + cell) * d + c] = flat[(1 + cell) * d + c];
  return Tensor<T>({1 + g_f * cells, d}, std::move(out));
}

// Converts a tokenizer between modalities for initialization and cross-modal
// probing. The source is normalized to a 2D view first (video kernels are
// frame-summed, video tables frame-averaged), channels are converted, and the
// destination's frame axis is then rebuilt (kernel inflated with the given
// strategy, table repeated per frame). Patch spatial extents must match; the
// spatial grid is resampled bilinearly; widths must agree; the class token is
// copied. A conversion to the source's own geometry reproduces it exactly.
template <typename T>
ModalitySpec<T> convert_tokenizer(const ModalitySpec<T>& src, const ModalityGeometry& dst,
                                  InflateStrategy strategy = InflateStrategy::replicate) {
  dst.validate();
  const ModalityGeometry& g = src.geometry;
  if (g.patch[g.patch.size() - 2] != dst.patch[dst.patch.size() - 2] ||
      g.patch[g.patch.size() - 1] != dst.patch[dst.patch.size() - 1])
    throw std::invalid_argument(
        std::string("patch extents for ") + to_string(dst.modality) + " (" +
        std::to_string(dst.patch[dst.patch.size() - 2]) + "x" +
        std::to_string(dst.patch[dst.patch.size() - 1]) + ") do not match the source " +
        std::to_string(g.patch[g.patch.size() - 2]) + "x" +
        std::to_string(g.patch[g.patch.size() - 1]));

  Tensor<T> e = src.embed;
  Tensor<T> pos = src.pos;
  if (g.modality == Modality::video) {
    e = collapse_3d_to_2d(e, g.patch_frames());
    pos = pos_video_to_2d(pos, g.grid_f(), g.grid_h(), g.grid_w(), g.grid_h(), g.grid_w());
  }
  e = convert_channels(e, g.channels(), dst.channels());
  if (dst.modality == Modality::video) {
    e = inflate_2d_to_3d(e, dst.patch_frames(), strategy);
    pos = pos_2d_to_video(pos, g.grid_h(), g.grid_w(), dst.grid_f(), dst.grid_h(),
                          dst.grid_w());
  } else {
    pos = interp_pos(pos, g.grid_h(), g.grid_w(), dst.grid_h(), dst.grid_w());
  }

  ModalitySpec<T> out;
  out.geometry = dst;
  out.width = src.width;
  out.embed = clone_tensor(e);
  out.cls = clone_tensor(src.cls);
  out.pos = clone_tensor(pos);
  out.validate();
  return out;
}

// Splits a pretrained layer stack into per-modality adaptor stacks (deep
// copies of the first adapt_depth layers, free to diverge from each other
// during training) and a shared trunk (copies of the remaining layers).
template <typename T>
EncoderStack<T> assign_layers(const PretrainedViT<T>& pre, std::size_t adapt_depth,
                              const std::vector<Modality>& modalities) {
  if (adapt_depth > pre.layers.size())
    throw std::invalid_argument("adaptor depth " + std::to_string(adapt_depth) +
                                " exceeds pretrained depth " +
                                std::to_string(pre.layers.size()));
  EncoderStack<T> stack;
  if (adapt_depth > 0)
    for (Modality m : modalities) {
      auto& list = stack.adapters[m];
      for (std::size_t k = 0; k < adapt_depth; ++k)
        list.push_back(clone_layer(pre.layers[k]));
    }
  for (std::size_t k = adapt_depth; k < pre.layers.size(); ++k)
    stack.shared.push_back(clone_layer(pre.layers[k]));
  stack.final_ln = clone_layer_norm(pre.final_ln);
  return stack;
}

// Grows a model by one modality whose pathway is derived from an existing
// one: the tokenizer is converted (frame collapse/inflation, channel and
// positional-table resampling) and, when the model uses adaptor layers, the
// source modality's adaptor stack is deep-copied for the new modality. This
// is the conversion step behind cross-modal linear probes; the model's
// existing parameters are untouched.
template <typename T>
void add_converted_modality(PolyViT<T>& m, Modality source, const ModalityGeometry& dst,
                            InflateStrategy strategy = InflateStrategy::replicate) {
  const auto src = m.modalities.find(source);
  if (src == m.modalities.end())
    throw std::invalid_argument(std::string("model has no ") + to_string(source) +
                                " pathway to convert from");
  if (m.modalities.count(dst.modality))
    throw std::invalid_argument(std::string("model already has a ") +
                                to_string(dst.modality) + " pathway");
  ModalitySpec<T> spec = convert_tokenizer(src->second, dst, strategy);
  if (!m.encoder.adapters.empty()) {
    const auto adapt = m.encoder.adapters.find(source);
    if (adapt == m.encoder.adapters.end())
      throw std::invalid_argument(std::string("model has no ") + to_string(source) +
                                  " adaptor stack to convert from");
    auto& list = m.encoder.adapters[dst.modality];
    for (const auto& layer : adapt->second) list.push_back(clone_layer(layer));
  }
  m.modalities.emplace(dst.modality, std::move(spec));
}

// Runs the pretrained encoder on one input through the same tokenize/encode
// path the assembled model uses, returning the class-token row, so that
// initialization fidelity is checkable bit for bit.
template <typename Ctx, typename T>
typename Ctx::V pretrained_features(Ctx& ctx, const PretrainedViT<T>& pre,
                                    const Tensor<T>& raw) {
  EncoderStack<T> stack;
  stack.shared = pre.layers;
  stack.final_ln = pre.final_ln;
  auto z0 = tokenize(ctx, pre.tokenizer, raw);
  auto z = encode(ctx, stack, z0, pre.tokenizer.geometry.modality);
  return ctx.slice_rows(z, 0, 1);
}

// Re-initializes a built model's trunk and tokenizers from a pretrained 2D
// encoder. Patch spatial extents must match the source; channel counts are
// converted, video kernels are inflated along the frame axis with the given
// strategy, and positional tables are resampled to each modality's grid
// (video tables additionally repeat per frame). Heads and stochastic-depth
// settings are left as configured.
template <typename T>
void init_from_pretrained(PolyViT<T>& m, const PretrainedViT<T>& pre,
                          InflateStrategy video_strategy = InflateStrategy::central_frame) {
  if (pre.layers.size() != m.layers)
    throw std::invalid_argument("pretrained depth " + std::to_string(pre.layers.size()) +
                                " does not match model depth " + std::to_string(m.layers));
  if (pre.tokenizer.width != m.width)
    throw std::invalid_argument("pretrained width " + std::to_string(pre.tokenizer.width) +
                                " does not match model width " + std::to_string(m.width));
  std::map<Modality, ModalitySpec<T>> converted;
  for (const auto& [mod, spec] : m.modalities)
    converted.emplace(mod, convert_tokenizer(pre.tokenizer, spec.geometry, video_strategy));

  std::vector<Modality> mods;
  for (const auto& [mod, spec] : m.modalities) mods.push_back(mod);
  auto drop = std::move(m.encoder.drop_prob);
  m.encoder = assign_layers(pre, m.layers_adapt, mods);
  m.encoder.drop_prob = std::move(drop);
  m.modalities = std::move(converted);
}

// Synthetic stand-in for a trained single-modality encoder: every tensor is
// filled from its own seed-derived stream (weights at inverse-sqrt-fan-in
// scale, LayerNorm gains near one, everything else small and nonzero), the
// way a trained checkpoint has no structurally zero tensors.
template <typename T>
PretrainedViT<T> make_pretrained_vit(const ModalityGeometry& geom, std::size_t width,
                                     std::size_t n_heads, std::size_t depth,
                                     std::uint64_t seed) {
  geom.validate();
  PretrainedViT<T> pre;
  pre.tokenizer = make_modality_spec<T>(geom, width, seed);
  for (std::size_t k = 0; k < depth; ++k)
    pre.layers.push_back(
        make_encoder_layer<T>(width, n_heads, seed, "pretrained.layer" + std::to_string(k)));
  pre.final_ln = make_layer_norm<T>(width);

  const auto fill = [&](const std::string& name, Tensor<T>& t) {
    Rng rng(seed, "pretrained/" + name);
    const bool gain = name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    const bool weight = t.rank() == 2 && t.extent(1) > 1;
    const T sigma = weight ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(t.extent(1))))
                           : static_cast<T>(0.05);
    std::vector<T> vals(t.numel());
    for (auto& v : vals)
      v = static_cast<T>(rng.normal()) * sigma + (gain ? T{1} : T{0});
    t = Tensor<T>(t.shape(), std::move(vals));
  };
  fill("tokenizer.E", pre.tokenizer.embed);
  fill("tokenizer.cls", pre.tokenizer.cls);
  fill("tokenizer.pos", pre.tokenizer.pos);
  for (std::size_t k = 0; k < depth; ++k)
    visit_layer_params("layer" + std::to_string(k), pre.layers[k], fill);
  fill("final_ln.gamma", pre.final_ln.gamma);
  fill("final_ln.beta", pre.final_ln.beta);
  return pre;
}

}  // namespace polyvit
