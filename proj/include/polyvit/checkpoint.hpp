#pragma once
// Checkpoint files: every model parameter by canonical name, an optional
// optimizer section (momentum buffers plus step counters), and caller-owned
// metadata. Values are stored at the model's own precision with no
// conversion in either direction, and each payload carries a checksum, so a
// load is either bit-exact or an error. Layout (little-endian):
//   "PVCK"  u32 version
//   u32 metadata count, then (string key, string value) pairs
//   u64 parameter count, then tensor records
//   u32 optimizer flag; if set: u64 global step, u32 task count with
//     (i64 task id, u64 steps) pairs, u64 momentum count, tensor records
// A tensor record is: string name, u32 rank, u64 extents, a u32 dtype tag
// (0 = f32, 1 = f64), the payload, and the 64-bit FNV-1a hash of the
// payload bytes.

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "polyvit/bytes.hpp"
#include "polyvit/model.hpp"
#include "polyvit/tensor.hpp"
#include "polyvit/trainer.hpp"

namespace polyvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// 64-bit FNV-1a over a byte range.
std::uint64_t fnv1a(const char* data, std::size_t size);

namespace detail {

template <typename T>
constexpr std::uint32_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "checkpoints store f32 or f64 tensors");
  return std::is_same_v<T, float> ? 0u : 1u;
}

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  put_str(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) put_u64(out, t.extent(i));
  put_u32(out, dtype_tag<T>());
  const std::size_t payload_start = out.size();
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if constexpr (std::is_same_v<T, float>) put_f32(out, t[i]);
    else put_f64(out, t[i]);
  }
  put_u64(out, fnv1a(out.data() + payload_start, out.size() - payload_start));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(ByteReader& r) {
  const std::string name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank > 4)
    throw std::runtime_error("checkpoint tensor " + name + " has rank " +
                             std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = r.u64();
  const std::uint32_t dtype = r.u32();
  if (dtype > 1)
    throw std::runtime_error("checkpoint tensor " + name +
                             " has unknown dtype tag " + std::to_string(dtype));
  if (dtype != dtype_tag<T>())
    throw std::runtime_error("checkpoint tensor " + name + " stores " +
                             (dtype == 0 ? "f32" : "f64") +
                             " values but the model uses " +
                             (dtype_tag<T>() == 0 ? "f32" : "f64"));
  const std::size_t n = shape_numel(shape);
  const std::size_t payload_start = r.pos;
  std::vector<T> vals(n);
  for (auto& v : vals) {
    if constexpr (std::is_same_v<T, float>) v = r.f32();
    else v = r.f64();
  }
  const std::uint64_t stored = r.u64();
  const std::uint64_t computed =
      fnv1a(r.buf.data() + payload_start, r.pos - 8 - payload_start);
  if (stored != computed)
    throw std::runtime_error("checkpoint tensor " + name +
                             " fails its checksum; the file is corrupt");
  return {name, Tensor<T>(std::move(shape), std::move(vals))};
}

}  // namespace detail

using CheckpointMetadata = std::vector<std::pair<std::string, std::string>>;

// Reads only the header and metadata block, leaving the tensors untouched.
// Loading proper needs a structurally matching model, and building one
// requires the configuration echoed in the metadata, so this runs first.
inline CheckpointMetadata read_checkpoint_metadata(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r(buf, "checkpoint");
  r.need(4);
  if (buf.compare(0, 4, "PVCK") != 0)
    throw std::runtime_error(path + " is not a checkpoint (bad magic)");
  r.pos = 4;
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  CheckpointMetadata metadata;
  const auto count = r.u32();
  metadata.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    metadata.emplace_back(std::move(k), std::move(v));
  }
  return metadata;
}

template <typename T>
void save_checkpoint(const std::string& path, const PolyViT<T>& model,
                     const OptimizerState<std::type_identity_t<T>>* state = nullptr,
                     const CheckpointMetadata& metadata = {}) {
  std::string out;
  out += "PVCK";
  detail::put_u32(out, kCheckpointVersion);

  detail::put_u32(out, static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }

  std::size_t count = 0;
  visit_params(model, [&](const std::string&, const Tensor<T>&) { ++count; });
  detail::put_u64(out, count);
  visit_params(model, [&](const std::string& name, const Tensor<T>& t) {
    detail::put_tensor(out, name, t);
  });

  detail::put_u32(out, state != nullptr ? 1u : 0u);
  if (state != nullptr) {
    detail::put_u64(out, state->global_step);
    detail::put_u32(out, static_cast<std::uint32_t>(state->task_steps.size()));
    for (const auto& [id, steps] : state->task_steps) {
      detail::put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(id)));
      detail::put_u64(out, steps);
    }
    detail::put_u64(out, state->momentum.size());
    for (const auto& [name, t] : state->momentum)
      detail::put_tensor(out, name, t);
  }

  detail::write_file_atomic(path, out);
}

// Fills a structurally matching model (and optionally optimizer state) from
// a checkpoint and returns the stored metadata. The file must cover exactly
// the model's parameter set: a missing, unknown, or reshaped tensor is an
// error, never a partial load.
template <typename T>
CheckpointMetadata load_checkpoint(const std::string& path, PolyViT<T>& model,
                                   OptimizerState<std::type_identity_t<T>>* state = nullptr) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r(buf, "checkpoint");
  r.need(4);
  if (buf.compare(0, 4, "PVCK") != 0)
    throw std::runtime_error(path + " is not a checkpoint (bad magic)");
  r.pos = 4;
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");

  CheckpointMetadata metadata;
  const auto meta_count = r.u32();
  metadata.reserve(meta_count);
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    metadata.emplace_back(std::move(k), std::move(v));
  }

  std::set<std::string> expected;
  visit_params(model, [&](const std::string& name, const Tensor<T>&) {
    if (!expected.insert(name).second)
      throw std::logic_error("model has duplicate parameter name " + name);
  });

  const auto param_count = r.u64();
  std::set<std::string> filled;
  for (std::uint64_t i = 0; i < param_count; ++i) {
    auto [name, tensor] = detail::read_tensor<T>(r);
    Tensor<T>* slot = find_param(model, name);
    if (slot == nullptr)
      throw std::runtime_error("checkpoint names unknown parameter " + name);
    if (!filled.insert(name).second)
      throw std::runtime_error("checkpoint repeats parameter " + name);
    if (slot->shape() != tensor.shape())
      throw std::runtime_error("checkpoint parameter " + name +
                               " does not match the model's shape");
    *slot = Tensor<T>(tensor.shape(),
                      std::vector<T>(tensor.begin(), tensor.end()),
                      slot->requires_grad());
  }
  if (filled.size() != expected.size())
    throw std::runtime_error("checkpoint covers " + std::to_string(filled.size()) +
                             " of " + std::to_string(expected.size()) +
                             " model parameters");

  const auto has_optimizer = r.u32();
  if (has_optimizer > 1)
    throw std::runtime_error("checkpoint optimizer flag is corrupt");
  if (has_optimizer == 1) {
    OptimizerState<T> loaded;
    loaded.global_step = r.u64();
    const auto tasks = r.u32();
    for (std::uint32_t i = 0; i < tasks; ++i) {
      const int id = static_cast<int>(static_cast<std::int64_t>(r.u64()));
      loaded.task_steps[id] = r.u64();
    }
    const auto buffers = r.u64();
    for (std::uint64_t i = 0; i < buffers; ++i) {
      auto [name, tensor] = detail::read_tensor<T>(r);
      if (find_param(model, name) == nullptr)
        throw std::runtime_error("checkpoint momentum names unknown parameter " +
                                 name);
      loaded.momentum.emplace(std::move(name), std::move(tensor));
    }
    if (state != nullptr) *state = std::move(loaded);
  } else if (state != nullptr) {
    throw std::runtime_error("checkpoint has no optimizer state to resume from");
  }

  if (r.pos != buf.size())
    throw std::runtime_error("checkpoint has " + std::to_string(buf.size() - r.pos) +
                             " trailing bytes");
  return metadata;
}

}  // namespace polyvit
