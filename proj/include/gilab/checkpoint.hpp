#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gilab/tensor.hpp"

namespace gilab {

// Flat binary container of named float32 arrays.
//
//   "GILAB001" | count:u32 | entries...
//   entry: name_len:u32 | name bytes | rank:u32 | extents:u32[rank] | f32 data
//
// All integers and floats little-endian.

struct CheckpointEntry {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const Tensor<float> *find(const std::string &name) const {
    for (const auto &e : entries)
      if (e.name == name)
        return &e.tensor;
    return nullptr;
  }
  const Tensor<float> &get(const std::string &name) const {
    const Tensor<float> *t = find(name);
    require(t != nullptr, "checkpoint: missing entry '", name, "'");
    return *t;
  }
  void add(std::string name, Tensor<float> t) {
    entries.push_back({std::move(name), std::move(t)});
  }
};

namespace detail {

inline void write_u32(std::ostream &os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char *>(b), 4);
}

inline std::uint32_t read_u32(std::istream &is, const char *what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char *>(b), 4);
  require(bool(is), "checkpoint: truncated while reading ", what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void write_f32_le(std::ostream &os, const float *data, std::size_t n) {
  static_assert(sizeof(float) == 4);
  // Host is little-endian on every target we build for; raw write.
  os.write(reinterpret_cast<const char *>(data), std::streamsize(n * 4));
}

} // namespace detail

inline constexpr char kCheckpointMagic[8] = {'G', 'I', 'L', 'A', 'B', '0', '0', '1'};

inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "checkpoint: cannot open '", path.string(), "' for writing");
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, std::uint32_t(ck.entries.size()));
  for (const auto &e : ck.entries) {
    detail::write_u32(os, std::uint32_t(e.name.size()));
    os.write(e.name.data(), std::streamsize(e.name.size()));
    detail::write_u32(os, std::uint32_t(e.tensor.rank()));
    for (int i = 0; i < e.tensor.rank(); ++i)
      detail::write_u32(os, std::uint32_t(e.tensor.dim(i)));
    detail::write_f32_le(os, e.tensor.data.data(), e.tensor.data.size());
  }
  require(bool(os), "checkpoint: write to '", path.string(), "' failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint: cannot open '", path.string(), "'");
  char magic[8];
  is.read(magic, 8);
  require(bool(is) && std::memcmp(magic, kCheckpointMagic, 8) == 0,
          "checkpoint: '", path.string(), "' has bad magic");
  Checkpoint ck;
  const std::uint32_t count = detail::read_u32(is, "entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = detail::read_u32(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    require(bool(is), "checkpoint: truncated name in '", path.string(), "'");
    const std::uint32_t rank = detail::read_u32(is, "rank");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      shape[i] = detail::read_u32(is, "extent");
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char *>(t.data.data()), std::streamsize(t.data.size() * 4));
    require(bool(is), "checkpoint: truncated data for entry '", name, "' in '",
            path.string(), "'");
    ck.add(std::move(name), std::move(t));
  }
  return ck;
}

} // namespace gilab
