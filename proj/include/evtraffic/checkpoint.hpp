#pragma once

// Checkpoint file layout (little-endian):
//   "EVTM" u32 version
//   model config (fixed field order, i32 and f64)
//   u64 seed, u64 iteration, u64 config_hash
//   graph record
//   u32 block count, then per block: name, u32 rank, u64 dims[rank], f32 values
// Blocks are the parameters followed by "adam.m/<name>" and "adam.v/<name>".

#include <filesystem>
#include <iosfwd>

#include "evtraffic/train.hpp"

namespace evtraffic {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const ModelCheckpoint& c, std::ostream& out);
/// Rejects unknown versions, hash mismatches and parameter shapes that do not
/// match the stored config and graph.
ModelCheckpoint read_checkpoint(std::istream& in, const std::string& source = "<checkpoint>");
void save_checkpoint(const ModelCheckpoint& c, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evtraffic
