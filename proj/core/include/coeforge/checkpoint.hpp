#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "coeforge/model.hpp"

namespace coeforge {

/// Binary checkpoint layout (all integers and floats little-endian):
///
///   offset 0   "COEF"
///   offset 4   u32 version
///   offset 8   u32 layers, heads, dim, ff_dim, context, vocab, adapter_rank, adapter_alpha, flags
///   offset 44  u32 block count
///   offset 48  u64 directory offset (always kDirectoryOffset)
///   offset 56  u64 total file size
///   offset 64  directory: one 64-byte entry per block
///                { char name[40] (NUL padded), u32 rows, u32 cols, u64 data offset, u32 kind, u32 reserved }
///              kind 0 = base weight, 1 = adapter factor
///   then       row-major f64 data for each block, in directory order
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint64_t kDirectoryOffset = 64;
inline constexpr std::size_t kDirectoryEntrySize = 64;
inline constexpr std::size_t kBlockNameSize = 40;

std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
/// Throws LoadError on a missing file, bad magic, version mismatch, or truncation.
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace coeforge
