#pragma once

// Synthetic classification tasks and their on-disk form. Every class is one
// orthonormal template direction in raw-input space, examples are template
// plus i.i.d. Gaussian noise, so with zero noise a linear map on raw values
// separates the classes exactly. Labels are balanced within one example per
// class, multilabel examples sum their active templates, and every stream is
// a pure function of the task seed.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polyvit/bytes.hpp"
#include "polyvit/model.hpp"
#include "polyvit/rng.hpp"
#include "polyvit/tensor.hpp"
#include "polyvit/tokenizer.hpp"

namespace polyvit {

struct SyntheticTaskConfig {
  ModalityGeometry geometry;
  std::size_t num_classes = 2;
  double noise = 0.1;
  std::size_t train_size = 32;
  std::size_t val_size = 16;
  std::size_t test_size = 16;
  std::uint64_t seed = 0;
  bool multilabel = false;

  void validate() const {
    geometry.validate();
    if (num_classes < 2) throw std::invalid_argument("synthetic task needs at least 2 classes");
    if (train_size < 1 || val_size < 1 || test_size < 1)
      throw std::invalid_argument("synthetic split sizes must be at least 1");
    if (noise < 0) throw std::invalid_argument("synthetic noise must be non-negative");
  }
};

template <typename T>
struct Dataset {
  SyntheticTaskConfig config;
  std::vector<Example<T>> train, val, test;
};

// One orthonormal direction per class, scaled so each raw value has unit
// scale on average. Orthogonality is what keeps zero-noise classes exactly
// linearly separable.
template <typename T>
std::vector<std::vector<T>> class_templates(const SyntheticTaskConfig& cfg) {
  const std::size_t n = shape_numel(cfg.geometry.input);
  if (cfg.num_classes > n)
    throw std::invalid_argument("cannot fit " + std::to_string(cfg.num_classes) +
                                " orthogonal templates in " + std::to_string(n) + " values");
  Rng rng(cfg.seed, "templates");
  std::vector<std::vector<double>> basis;
  while (basis.size() < cfg.num_classes) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < n; ++i) v[i] -= dot * b[i];
    }
    double norm2 = 0;
    for (double x : v) norm2 += x * x;
    if (norm2 < 1e-12) continue;  // degenerate draw; redraw
    const double scale = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= scale;
    basis.push_back(std::move(v));
  }
  const double amp = std::sqrt(static_cast<double>(n));
  std::vector<std::vector<T>> out(cfg.num_classes, std::vector<T>(n));
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    for (std::size_t i = 0; i < n; ++i)
      out[c][i] = static_cast<T>(amp * basis[c][i]);
  return out;
}

namespace detail {

template <typename T>
std::vector<Example<T>> synth_split(const SyntheticTaskConfig& cfg,
                                    const std::vector<std::vector<T>>& templates,
                                    const std::string& split, std::size_t count) {
  const std::size_t n = shape_numel(cfg.geometry.input);
  const std::size_t c = cfg.num_classes;
  Rng order_rng(cfg.seed, split + "/order");
  Rng noise_rng(cfg.seed, split + "/noise");
  Rng label_rng(cfg.seed, split + "/labels");

  std::vector<std::vector<T>> targets(count, std::vector<T>(c, T{0}));
  if (cfg.multilabel) {
    std::vector<bool> covered(c, false);
    for (std::size_t i = 0; i < count; ++i) {
      bool any = false;
      while (!any)
        for (std::size_t j = 0; j < c; ++j) {
          const bool on = label_rng.uniform() < 0.5;
          targets[i][j] = on ? T{1} : T{0};
          any = any || on;
        }
      for (std::size_t j = 0; j < c; ++j)
        if (targets[i][j] == T{1}) covered[j] = true;
    }
    // Guarantee every class appears somewhere, deterministically.
    for (std::size_t j = 0; j < c; ++j)
      if (!covered[j]) targets[j % count][j] = T{1};
  } else {
    std::vector<std::size_t> classes(count);
    for (std::size_t i = 0; i < count; ++i) classes[i] = i % c;
    order_rng.shuffle(classes);
    for (std::size_t i = 0; i < count; ++i) targets[i][classes[i]] = T{1};
  }

  std::vector<Example<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<T> vals(n, T{0});
    for (std::size_t j = 0; j < c; ++j)
      if (targets[i][j] == T{1})
        for (std::size_t k = 0; k < n; ++k) vals[k] += templates[j][k];
    if (cfg.noise > 0)
      for (std::size_t k = 0; k < n; ++k)
        vals[k] += static_cast<T>(cfg.noise * noise_rng.normal());
    out.push_back({Tensor<T>(cfg.geometry.input, std::move(vals)),
                   Tensor<T>({c}, targets[i])});
  }
  return out;
}

}  // namespace detail

template <typename T>
Dataset<T> generate(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  const auto templates = class_templates<T>(cfg);
  Dataset<T> ds;
  ds.config = cfg;
  ds.train = detail::synth_split(cfg, templates, "train", cfg.train_size);
  ds.val = detail::synth_split(cfg, templates, "val", cfg.val_size);
  ds.test = detail::synth_split(cfg, templates, "test", cfg.test_size);
  return ds;
}

// --- flat binary dataset files ---
// Layout: magic "PVDS", u32 version, u32 modality, u32 rank, u64 extents,
// u32 classes, u64 example count; then per example the raw input as 32-bit
// floats followed by the dense target row, all little-endian.

inline constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void save_examples(const std::string& path, Modality modality, const Shape& input,
                   std::size_t classes, const std::vector<Example<T>>& examples) {
  std::string out;
  out += "PVDS";
  detail::put_u32(out, kDatasetVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(modality));
  detail::put_u32(out, static_cast<std::uint32_t>(input.size()));
  for (std::size_t e : input) detail::put_u64(out, e);
  detail::put_u32(out, static_cast<std::uint32_t>(classes));
  detail::put_u64(out, examples.size());
  const std::size_t n = shape_numel(input);
  for (const auto& ex : examples) {
    if (ex.input.numel() != n || ex.target.numel() != classes)
      throw std::invalid_argument("example does not match the declared extents");
    for (std::size_t i = 0; i < n; ++i) detail::put_f32(out, static_cast<float>(ex.input[i]));
    for (std::size_t i = 0; i < classes; ++i)
      detail::put_f32(out, static_cast<float>(ex.target[i]));
  }
  detail::write_file_atomic(path, out);
}

template <typename T>
struct LoadedExamples {
  Modality modality = Modality::image;
  Shape input;
  std::size_t classes = 0;
  std::vector<Example<T>> examples;
};

template <typename T>
LoadedExamples<T> load_examples(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r(buf, "dataset file");
  r.need(4);
  if (buf.compare(0, 4, "PVDS") != 0)
    throw std::runtime_error(path + " is not a dataset file (bad magic)");
  r.pos = 4;
  const auto version = r.u32();
  if (version != kDatasetVersion)
    throw std::runtime_error("dataset version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kDatasetVersion) + ")");
  LoadedExamples<T> out;
  const auto mod = r.u32();
  if (mod > 2) throw std::runtime_error("dataset names unknown modality tag " +
                                        std::to_string(mod));
  out.modality = static_cast<Modality>(mod);
  const auto rank = r.u32();
  if (rank == 0 || rank > 4) throw std::runtime_error("dataset input rank is out of range");
  out.input.resize(rank);
  for (auto& e : out.input) e = r.u64();
  out.classes = r.u32();
  const auto count = r.u64();
  const std::size_t n = shape_numel(out.input);
  out.examples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::vector<T> vals(n);
    for (auto& v : vals) v = static_cast<T>(r.f32());
    std::vector<T> target(out.classes);
    for (auto& v : target) v = static_cast<T>(r.f32());
    out.examples.push_back(
        {Tensor<T>(out.input, std::move(vals)), Tensor<T>({out.classes}, std::move(target))});
  }
  if (r.pos != buf.size())
    throw std::runtime_error("dataset file has " + std::to_string(buf.size() - r.pos) +
                             " trailing bytes");
  return out;
}

}  // namespace polyvit
