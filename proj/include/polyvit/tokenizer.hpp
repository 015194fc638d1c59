#pragma once

// Input tokenization: images and audio spectrograms split into h x w patches,
// video into f x h x w tubelets, each flattened and mapped through a learned
// linear kernel, prefixed with a class token, and offset by a positional
// table. One tokenizer per modality, shared by every task of that modality.

#include <string>

#include "polyvit/autodiff.hpp"
#include "polyvit/tensor.hpp"

namespace polyvit {

enum class Modality { image = 0, video = 1, audio = 2 };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::video: return "video";
    case Modality::audio: return "audio";
  }
  throw std::invalid_argument("unknown modality tag");
}

inline Modality parse_modality(const std::string& s) {
  if (s == "image") return Modality::image;
  if (s == "video") return Modality::video;
  if (s == "audio") return Modality::audio;
  throw std::invalid_argument("unknown modality '" + s + "'");
}

// Geometry of one modality's input and patch grid. Image and audio inputs are
// rank 3 (rows x cols x channels; a spectrogram is time x frequency x 1),
// video is rank 4 (frames x rows x cols x channels). Patch extents omit the
// channel axis: a patch always spans the full channel depth.
struct ModalityGeometry {
  Modality modality = Modality::image;
  Shape input;   // {H,W,C} or {F,H,W,C}
  Shape patch;   // {h,w} or {f,h,w}
  bool allow_crop = false;

  void validate() const {
    const std::size_t want_rank = modality == Modality::video ? 4 : 3;
    if (input.size() != want_rank)
      throw std::invalid_argument(std::string(to_string(modality)) +
                                  " input must be rank " + std::to_string(want_rank) +
                                  ", got " + shape_str(input));
    if (patch.size() != want_rank - 1)
      throw std::invalid_argument(std::string(to_string(modality)) +
                                  " patch must be rank " +
                                  std::to_string(want_rank - 1) + ", got " +
                                  shape_str(patch));
    for (std::size_t e : input)
      if (e == 0) throw std::invalid_argument("zero input extent in " + shape_str(input));
    for (std::size_t i = 0; i < patch.size(); ++i) {
      if (patch[i] == 0)
        throw std::invalid_argument("zero patch extent in " + shape_str(patch));
      if (patch[i] > input[i])
        throw std::invalid_argument("patch " + shape_str(patch) +
                                    " exceeds input " + shape_str(input) +
                                    " on axis " + std::to_string(i));
      if (!allow_crop && input[i] % patch[i] != 0)
        throw std::invalid_argument(
            "input extent " + std::to_string(input[i]) + " not divisible by patch extent " +
            std::to_string(patch[i]) + " on axis " + std::to_string(i) +
            " (set allow_crop to floor-crop)");
    }
  }

  std::size_t frames() const { return modality == Modality::video ? input[0] : 1; }
  std::size_t patch_frames() const {
    return modality == Modality::video ? patch[0] : 1;
  }
  std::size_t channels() const { return input.back(); }

  // Grid extents by floor division; without allow_crop the remainder is zero.
  std::size_t grid_f() const { return frames() / patch_frames(); }
  std::size_t grid_h() const {
    return input[input.size() - 3] / patch[patch.size() - 2];
  }
  std::size_t grid_w() const {
    return input[input.size() - 2] / patch[patch.size() - 1];
  }

  std::size_t num_patches() const { return grid_f() * grid_h() * grid_w(); }
  std::size_t patch_dim() const {
    return patch_frames() * patch[patch.size() - 2] * patch[patch.size() - 1] *
           channels();
  }
  std::size_t seq_len() const { return 1 + num_patches(); }
};

// Flatten an input into its N patches, one row each. Raster order is pinned:
// patches enumerate (frame block, row block, column block) row-major, and
// within a patch the values keep input order (frame, row, column, channel).
// Checkpoints depend on this order staying fixed.
template <typename T>
Tensor<T> patchify(const Tensor<T>& raw, const ModalityGeometry& geom) {
  geom.validate();
  if (raw.shape() != geom.input)
    throw std::invalid_argument("input shape " + shape_str(raw.shape()) +
                                " does not match the " +
                                std::string(to_string(geom.modality)) +
                                " geometry " + shape_str(geom.input));
  const std::size_t gf = geom.grid_f(), gh = geom.grid_h(), gw = geom.grid_w();
  const std::size_t pf = geom.patch_frames(), ph = geom.patch[geom.patch.size() - 2],
                    pw = geom.patch[geom.patch.size() - 1], C = geom.channels();
  const std::size_t H = geom.input[geom.input.size() - 3],
                    W = geom.input[geom.input.size() - 2];
  const std::size_t pdim = geom.patch_dim();
  std::vector<T> out(geom.num_patches() * pdim);
  std::size_t p = 0;
  for (std::size_t tf = 0; tf < gf; ++tf)
    for (std::size_t th = 0; th < gh; ++th)
      for (std::size_t tw = 0; tw < gw; ++tw, ++p) {
        T* dst = out.data() + p * pdim;
        for (std::size_t df = 0; df < pf; ++df)
          for (std::size_t dr = 0; dr < ph; ++dr)
            for (std::size_t dc = 0; dc < pw; ++dc)
              for (std::size_t ch = 0; ch < C; ++ch)
                *dst++ = raw[(((tf * pf + df) * H + th * ph + dr) * W + tw * pw + dc) *
                                 C +
                             ch];
      }
  return Tensor<T>({geom.num_patches(), pdim}, std::move(out));
}

// One modality's learned tokenizer state.
template <typename T>
struct ModalitySpec {
  ModalityGeometry geometry;
  std::size_t width = 0;
  Tensor<T> embed;  // [d x patch_dim], applied as x . E^T
  Tensor<T> cls;    // [1 x d]
  Tensor<T> pos;    // [(N+1) x d]

  void validate() const {
    geometry.validate();
    const Shape want_embed{width, geometry.patch_dim()};
    if (embed.shape() != want_embed)
      throw std::invalid_argument("embed shape " + shape_str(embed.shape()) +
                                  ", expected " + shape_str(want_embed));
    if (cls.shape() != Shape{1, width})
      throw std::invalid_argument("class token shape " + shape_str(cls.shape()) +
                                  ", expected [1x" + std::to_string(width) + "]");
    const Shape want_pos{geometry.seq_len(), width};
    if (pos.shape() != want_pos)
      throw std::invalid_argument("positional table shape " + shape_str(pos.shape()) +
                                  ", expected " + shape_str(want_pos));
  }
};

// z0: row 0 is cls + pos[0], row i is E.x_i + pos[i].
template <typename Ctx, typename T>
typename Ctx::V tokenize(Ctx& ctx, const ModalitySpec<T>& spec, const Tensor<T>& raw) {
  auto patches = ctx.constant(patchify(raw, spec.geometry));
  auto tokens = ctx.matmul(patches, ctx.transpose(ctx.param(spec.embed)));
  auto with_cls = ctx.concat_rows({ctx.param(spec.cls), tokens});
  return ctx.add(with_cls, ctx.param(spec.pos));
}

}  // namespace polyvit
