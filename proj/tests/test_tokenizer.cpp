#include <doctest.h>

#include "polyvit/tokenizer.hpp"
#include "support.hpp"

using namespace testsupport;
using polyvit::Modality;
using polyvit::ModalityGeometry;
using polyvit::ModalitySpec;

namespace {
ModalityGeometry image_geom(std::size_t H, std::size_t W, std::size_t C,
                            std::size_t h, std::size_t w) {
  return {Modality::image, {H, W, C}, {h, w}, false};
}

ModalityGeometry video_geom(std::size_t F, std::size_t H, std::size_t W,
                            std::size_t C, std::size_t f, std::size_t h,
                            std::size_t w) {
  return {Modality::video, {F, H, W, C}, {f, h, w}, false};
}
}  // namespace

TEST_CASE("sequence lengths match the reference geometries") {
  CHECK(image_geom(224, 224, 3, 16, 16).seq_len() == 197);
  CHECK(image_geom(384, 384, 3, 16, 16).seq_len() == 577);
  CHECK(video_geom(32, 224, 224, 3, 4, 16, 16).seq_len() == 1569);
  ModalityGeometry audio{Modality::audio, {800, 128, 1}, {16, 16}, false};
  CHECK(audio.seq_len() == 401);
  CHECK(audio.num_patches() == 400);
}

TEST_CASE("patchify counts and flattening order") {
  ModalityGeometry g = image_geom(6, 6, 1, 2, 2);
  std::vector<double> vals(36);
  for (std::size_t i = 0; i < 36; ++i) vals[i] = double(i);
  const auto patches = polyvit::patchify(Tensor<double>({6, 6, 1}, vals), g);
  CHECK(patches.shape() == polyvit::Shape{9, 4});
  // First patch: rows 0-1, cols 0-1 in (row, col, channel) order.
  CHECK(patches.at(0, 0) == 0);
  CHECK(patches.at(0, 1) == 1);
  CHECK(patches.at(0, 2) == 6);
  CHECK(patches.at(0, 3) == 7);
  // Patch 4 is the grid center: rows 2-3, cols 2-3.
  CHECK(patches.at(4, 0) == 14);
  CHECK(patches.at(4, 3) == 21);
}

TEST_CASE("video patchify is time major") {
  ModalityGeometry g = video_geom(4, 2, 2, 1, 2, 2, 2);
  std::vector<double> vals(16);
  for (std::size_t i = 0; i < 16; ++i) vals[i] = double(i);
  const auto patches = polyvit::patchify(Tensor<double>({4, 2, 2, 1}, vals), g);
  CHECK(patches.shape() == polyvit::Shape{2, 8});
  // Tubelet 0 covers frames 0-1 entirely; values 0..7 in input order.
  for (std::size_t i = 0; i < 8; ++i) CHECK(patches.at(0, i) == double(i));
  for (std::size_t i = 0; i < 8; ++i) CHECK(patches.at(1, i) == double(8 + i));
}

TEST_CASE("non-divisible extents are rejected unless cropping is enabled") {
  ModalityGeometry bad = image_geom(7, 6, 1, 2, 2);
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("not divisible"),
                       std::invalid_argument);
  bad.allow_crop = true;
  CHECK_NOTHROW(bad.validate());
  CHECK(bad.grid_h() == 3);
  CHECK(bad.num_patches() == 9);
  std::vector<double> vals(42, 1.0);
  const auto patches = polyvit::patchify(Tensor<double>({7, 6, 1}, vals), bad);
  CHECK(patches.extent(0) == 9);
}

TEST_CASE("patch embedding equals a strided convolution oracle") {
  // The kernel applied to flattened patches must agree with sliding the
  // kernel over the input with stride = patch size, computed directly from
  // input coordinates.
  Rng rng(77);
  ModalityGeometry g = video_geom(4, 6, 4, 2, 2, 3, 2);
  const std::size_t d = 5, pdim = g.patch_dim();
  for (int trial = 0; trial < 3; ++trial) {
    auto raw = random_tensor({4, 6, 4, 2}, rng);
    auto E = random_tensor({d, pdim}, rng);
    const auto tokens =
        polyvit::kernels::matmul(polyvit::patchify(raw, g), polyvit::kernels::transpose(E));
    std::size_t p = 0;
    for (std::size_t tf = 0; tf < g.grid_f(); ++tf)
      for (std::size_t th = 0; th < g.grid_h(); ++th)
        for (std::size_t tw = 0; tw < g.grid_w(); ++tw, ++p)
          for (std::size_t out = 0; out < d; ++out) {
            double acc = 0;
            std::size_t col = 0;
            for (std::size_t df = 0; df < 2; ++df)
              for (std::size_t dr = 0; dr < 3; ++dr)
                for (std::size_t dc = 0; dc < 2; ++dc)
                  for (std::size_t ch = 0; ch < 2; ++ch, ++col)
                    acc += E.at(out, col) *
                           raw[(((tf * 2 + df) * 6 + th * 3 + dr) * 4 + tw * 2 + dc) * 2 +
                               ch];
            CHECK(tokens.at(p, out) == doctest::Approx(acc).epsilon(1e-10));
          }
  }
}

TEST_CASE("tokenize with zero kernel and class token returns the positional table") {
  Rng rng(5);
  ModalityGeometry g = image_geom(4, 4, 1, 2, 2);
  ModalitySpec<double> spec;
  spec.geometry = g;
  spec.width = 6;
  spec.embed = Tensor<double>::zeros({6, g.patch_dim()});
  spec.cls = Tensor<double>::zeros({1, 6});
  spec.pos = random_tensor({g.seq_len(), 6}, rng);
  spec.validate();
  EvalContext<double> ctx;
  const auto z = polyvit::tokenize(ctx, spec, random_tensor({4, 4, 1}, rng));
  CHECK(polyvit::same_values(z, spec.pos));
}

TEST_CASE("tokenize is linear in the input when cls and pos are zero") {
  Rng rng(6);
  ModalityGeometry g = image_geom(6, 4, 2, 3, 2);
  ModalitySpec<double> spec;
  spec.geometry = g;
  spec.width = 5;
  spec.embed = random_tensor({5, g.patch_dim()}, rng);
  spec.cls = Tensor<double>::zeros({1, 5});
  spec.pos = Tensor<double>::zeros({g.seq_len(), 5});
  auto raw = random_tensor({6, 4, 2}, rng);
  EvalContext<double> ctx;
  const auto z1 = polyvit::tokenize(ctx, spec, raw);
  const auto z2 = polyvit::tokenize(ctx, spec, polyvit::kernels::scale(raw, 3.0));
  CHECK(polyvit::max_abs_diff(polyvit::kernels::scale(z1, 3.0), z2) < 1e-6);
}

TEST_CASE("permuting input patches permutes token rows when pos is zero") {
  Rng rng(7);
  ModalityGeometry g = image_geom(4, 4, 1, 2, 2);  // 4 patches
  ModalitySpec<double> spec;
  spec.geometry = g;
  spec.width = 3;
  spec.embed = random_tensor({3, 4}, rng);
  spec.cls = random_tensor({1, 3}, rng);
  spec.pos = Tensor<double>::zeros({5, 3});
  auto raw = random_tensor({4, 4, 1}, rng);
  // Swap the two top patches by swapping input column blocks.
  std::vector<double> sw(raw.begin(), raw.end());
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) std::swap(sw[r * 4 + c], sw[r * 4 + c + 2]);
  EvalContext<double> ctx;
  const auto z = polyvit::tokenize(ctx, spec, raw);
  const auto zs = polyvit::tokenize(ctx, spec, Tensor<double>({4, 4, 1}, sw));
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(zs.at(1, j) == doctest::Approx(z.at(2, j)));
    CHECK(zs.at(2, j) == doctest::Approx(z.at(1, j)));
    CHECK(zs.at(0, j) == doctest::Approx(z.at(0, j)));
    CHECK(zs.at(3, j) == doctest::Approx(z.at(3, j)));
  }
}

TEST_CASE("tokenize output length matches seq_len over a geometry grid") {
  Rng rng(8);
  for (std::size_t H : {2, 4, 6})
    for (std::size_t h : {1, 2}) {
      ModalityGeometry g = image_geom(H, 4, 1, h, 2);
      ModalitySpec<double> spec;
      spec.geometry = g;
      spec.width = 4;
      spec.embed = random_tensor({4, g.patch_dim()}, rng);
      spec.cls = random_tensor({1, 4}, rng);
      spec.pos = random_tensor({g.seq_len(), 4}, rng);
      EvalContext<double> ctx;
      const auto z = polyvit::tokenize(ctx, spec, random_tensor({H, 4, 1}, rng));
      CHECK(z.extent(0) == g.seq_len());
    }
}

TEST_CASE("wrong input shape names both shapes") {
  ModalityGeometry g = image_geom(4, 4, 1, 2, 2);
  CHECK_THROWS_WITH_AS(
      polyvit::patchify(Tensor<double>::zeros({4, 4, 3}), g),
      doctest::Contains("does not match"), std::invalid_argument);
}
