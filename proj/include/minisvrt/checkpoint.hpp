#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "minisvrt/errors.hpp"
#include "minisvrt/tensor.hpp"

namespace minisvrt {

// Versioned binary parameter container:
//   magic "MNSVCKPT", u32 version, u32 count,
//   then per entry: u32 name_len, name bytes, u8 trainable, u32 rank,
//   u64 extents[rank], f64 values[numel], all little-endian.
// Values are stored as f64 regardless of the in-memory precision; float
// parameters round-trip exactly.

inline constexpr char kCheckpointMagic[8] = {'M', 'N', 'S', 'V', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  bool trainable = true;
  Tensor<double> value;
};

namespace detail {

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in, const char* what) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (in.gcount() != sizeof(V))
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::vector<const Parameter<T>*>& params,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    detail::write_pod(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_pod(out, static_cast<std::uint8_t>(p->trainable ? 1 : 0));
    detail::write_pod(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d = 0; d < p->value.rank(); ++d)
      detail::write_pod(out, static_cast<std::uint64_t>(p->value.dim(d)));
    for (std::size_t i = 0; i < p->value.numel(); ++i)
      detail::write_pod(out, static_cast<double>(p->value[i]));
  }
  if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw FormatError("load_checkpoint: bad magic in " + path.string());
  auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw FormatError("load_checkpoint: unsupported version in " + path.string());
  auto count = detail::read_pod<std::uint32_t>(in, "count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    auto name_len = detail::read_pod<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw FormatError("load_checkpoint: truncated name in " + path.string());
    auto trainable = detail::read_pod<std::uint8_t>(in, "trainable flag");
    auto rank = detail::read_pod<std::uint32_t>(in, "rank");
    if (rank > 8) throw FormatError("load_checkpoint: implausible rank in " + path.string());
    std::vector<std::size_t> shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<std::size_t>(detail::read_pod<std::uint64_t>(in, "extent")));
    Tensor<double> value(shape);
    for (std::size_t i = 0; i < value.numel(); ++i)
      value[i] = detail::read_pod<double>(in, "value");
    entries.push_back({std::move(name), trainable != 0, std::move(value)});
  }
  return entries;
}

}  // namespace minisvrt
