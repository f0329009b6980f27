#pragma once

// Self-describing binary container for a training state.
//
// Layout (little-endian):
//   "SRDITCKP" | u32 version | u64 config length | config text | i64 step |
//   u32 array count | per array: u32 name length, name, u32 rows, u32 cols,
//   rows*cols float32 | u64 FNV-1a of all preceding bytes

#include "srdit/trainer.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>

namespace srdit::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const TrainState& state);

/// Rebuilds the state described by the file. Throws CheckpointError on a bad
/// magic, version, checksum, truncation or tensor shape.
TrainState load_checkpoint(const std::string& path);

/// FNV-1a over the checkpoint bytes the state would produce.
std::uint64_t state_hash(const TrainState& state);

}  // namespace srdit::harness
