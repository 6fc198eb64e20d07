#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "acflow/model.hpp"

namespace acflow {

struct CheckpointMeta {
  std::string config_digest;
  std::uint64_t epoch = 0;
  double best_valid = 0.0;
  std::vector<std::string> names;  // column names of the training data; may be empty
};

struct LoadedCheckpoint {
  AcflowModel model;
  CheckpointMeta meta;
};

inline constexpr std::uint32_t checkpoint_version = 1;

// Layout, all integers and doubles little-endian:
//   "ACFW" u32 version
//   str architecture  str mode  str config_digest  u64 epoch  f64 best_valid
//   u32 name count, str names[count]
//   u32 tensor count, then per tensor: str name, u32 rank, u64 dims[rank],
//   f64 data[prod(dims)]
// where str is a u32 byte length followed by the bytes.  The standardizer
// is stored as the tensors "standardizer.mean" and "standardizer.std".
std::string serialize_checkpoint(const AcflowModel& model, const CheckpointMeta& meta);
LoadedCheckpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const AcflowModel& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);
// Throws LoadError on a missing file, bad magic, unsupported version,
// truncation or a parameter set that does not match the architecture.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace acflow
