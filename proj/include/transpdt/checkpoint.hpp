#pragma once

// Tensor container file, used for parameter checkpoints and mobility tensors.
//
// Layout (all integers and floats little-endian):
//   magic    8 bytes  "TPDTCKPT"
//   version  u32      currently 1
//   count    u32      number of entries
//   entry*   count times:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64 * rank
//     values   f64 * prod(dims), row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "transpdt/autodiff.hpp"

namespace transpdt {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'T', 'P', 'D', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("truncated tensor container: " + path);
  return v;
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const NamedTensors& entries) {
  os.write(kContainerMagic, sizeof(kContainerMagic));
  detail::put<std::uint32_t>(os, kContainerVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

inline void save_tensors(const std::string& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  write_tensors(os, entries);
  if (!os) throw Error("write failed: " + path);
}

inline NamedTensors read_tensors(std::istream& is, const std::string& path = "<stream>") {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0)
    throw ParseError("not a tensor container: " + path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kContainerVersion)
    throw ParseError("unsupported tensor container version " + std::to_string(version) + ": " + path);
  const auto count = detail::get<std::uint32_t>(is, path);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = detail::get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = detail::get<std::uint32_t>(is, path);
    if (rank == 0 || rank > 8) throw ParseError("bad rank for entry '" + name + "' in " + path);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(is, path);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw ParseError("truncated values for entry '" + name + "' in " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path);
  return read_tensors(is, path);
}

inline NamedTensors to_named(const ParameterStore& store) {
  NamedTensors out;
  for (const auto& p : store) out.emplace_back(p.name, p.value);
  return out;
}

// Copies container entries into an existing store. Every parameter must be
// present with an identical shape; extra entries are rejected too.
inline void assign_from(ParameterStore& store, const NamedTensors& entries) {
  if (entries.size() != store.size())
    throw ValidationError("checkpoint has " + std::to_string(entries.size()) + " entries, model expects " +
                          std::to_string(store.size()));
  for (const auto& [name, t] : entries) {
    if (!store.contains(name)) throw ValidationError("checkpoint entry not in model: " + name);
    auto& p = store.get(name);
    if (p.value.shape() != t.shape())
      throw ValidationError("shape mismatch for " + name + ": checkpoint " + shape_str(t.shape()) + ", model " +
                            shape_str(p.value.shape()));
    if (!t.all_finite()) throw NumericError("non-finite values in checkpoint entry " + name);
    p.value = t;
  }
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store) { save_tensors(path, to_named(store)); }

inline void load_checkpoint(const std::string& path, ParameterStore& store) { assign_from(store, load_tensors(path)); }

}  // namespace transpdt
