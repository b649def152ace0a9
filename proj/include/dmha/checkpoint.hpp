#pragma once

// Binary checkpoint, little-endian:
//
//   "DMHA"  u32 version
//   u32 config_bytes, then that many bytes of UTF-8 "key=value\n" lines
//   u32 tensor_count, then per tensor:
//     u32 name_bytes, name, u32 rank, rank x u64 dims, product(dims) x f64
//
// Entries keep their insertion order, so save -> load -> save reproduces the
// same bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dmha/config.hpp"
#include "dmha/tensor.hpp"

namespace dmha {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  KeyValues config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  // Throws std::out_of_range when absent.
  const std::string& value(std::string_view key) const;
  const Tensor& tensor(std::string_view name) const;
  bool has_tensor(std::string_view name) const;

  std::string serialize() const;
  static Checkpoint parse(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace dmha
