#pragma once

// Versioned binary checkpoints: 4-byte magic, u32 version, then per
// parameter (u32 name length, name bytes, u32 rank, u32 dims..., f32 data),
// all little-endian, read until EOF.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "founddiff/errors.hpp"
#include "founddiff/tensor.hpp"

namespace founddiff {

using NamedParams = std::vector<std::pair<std::string, numcore::Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const char magic[4],
                            const NamedParams& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(magic, 4);
  const std::uint32_t version = kCheckpointVersion;
  f.write(reinterpret_cast<const char*>(&version), 4);
  for (const auto& [name, tensor] : params) {
    const auto len = static_cast<std::uint32_t>(name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(name.data(), len);
    const auto rank = static_cast<std::uint32_t>(tensor.shape().size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : tensor.shape()) {
      const auto dim = static_cast<std::uint32_t>(d);
      f.write(reinterpret_cast<const char*>(&dim), 4);
    }
    std::vector<float> data(tensor.values().begin(), tensor.values().end());
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  }
  if (!f) throw DataError("short write on checkpoint: " + path);
}

// Loads values into the given parameter list; every parameter must be
// present with a matching shape.
inline void load_checkpoint(const std::string& path, const char magic[4],
                            NamedParams& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char got[4];
  f.read(got, 4);
  if (!f || std::string(got, 4) != std::string(magic, 4))
    throw DataError("checkpoint magic mismatch in " + path);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version in " + path);

  struct Entry {
    std::vector<int> shape;
    std::vector<float> data;
  };
  std::unordered_map<std::string, Entry> entries;
  while (true) {
    std::uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    if (f.eof()) break;
    if (!f || len > 4096) throw DataError("corrupt checkpoint: " + path);
    std::string name(len, '\0');
    f.read(name.data(), len);
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || rank > 8) throw DataError("corrupt checkpoint: " + path);
    Entry e;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t dim = 0;
      f.read(reinterpret_cast<char*>(&dim), 4);
      e.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    e.data.resize(numel);
    f.read(reinterpret_cast<char*>(e.data.data()),
           static_cast<std::streamsize>(numel * sizeof(float)));
    if (!f) throw DataError("truncated checkpoint: " + path);
    entries.emplace(std::move(name), std::move(e));
  }

  for (auto& [name, tensor] : params) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw DataError("checkpoint " + path + " missing parameter " + name);
    if (it->second.shape != tensor.shape())
      throw DataError("checkpoint " + path + " shape mismatch for " + name);
    auto& v = tensor.raw_values();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<double>(it->second.data[i]);
  }
}

}  // namespace founddiff
