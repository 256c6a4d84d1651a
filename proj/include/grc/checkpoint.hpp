#pragma once

#include <cstdint>
#include <filesystem>

#include "grc/run_config.hpp"

// Checkpoint layout (little-endian):
//   "GRCCKPT\0"  u32 version  u8 value width (4 or 8)
//   string run config (key = value text)
//   u64 step  string train-stream RNG  string dropout RNG
//   u64 n, then n x (string name, u64 count, values)   parameters outside caches
//   u64 n, then n cache blocks (GrcCache::save layout)
//   optimizer: u64 steps, u64 n, then n x (u64 count, m values, v values)
// Strings are u64 length + bytes.

namespace grc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::uint32_t version = 0;
  Precision precision = Precision::Float32;
  RunConfig config;  // resolved
  std::uint64_t step = 0;
};

/// Reads only the header; throws IoError for a bad magic or version.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace grc
