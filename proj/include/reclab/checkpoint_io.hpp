#pragma once

#include <cstdint>
#include <string>
#include <variant>

#include "reclab/config.hpp"

namespace reclab {

/// Binary layout, little-endian:
///   "RCLB" | u32 version | u32 header bytes | u32 header crc32 | header | payload
/// The header is key=value text holding the file kind, the ModelConfig,
/// lineage metadata and one directory line per segment:
///   segment.<i>=<name>|<dtype>|<offset>|<bytes>|<crc32>|<d0>x<d1>...
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class FileKind : std::uint8_t { checkpoint, full_delta, adapter_delta };
const char* file_kind_name(FileKind k);

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Checkpoint& ckpt);
void save_delta(const std::string& path, const ModelConfig& cfg, const AdaptedWeights& delta);

struct LoadedCheckpoint {
  ModelConfig config;
  Checkpoint checkpoint;
};

struct LoadedDelta {
  ModelConfig config;
  AdaptedWeights delta;
};

/// Dispatches on the header's kind field.
/// MissingInputError (no file), FormatError (not an RCLB file or malformed
/// header), VersionError, ChecksumError (names the segment), TruncationError.
std::variant<LoadedCheckpoint, LoadedDelta> load_file(const std::string& path);

/// As load_file, with FormatError when the file holds the other kind.
LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedDelta load_delta(const std::string& path);

/// crc32 (zlib polynomial) of a byte range.
std::uint32_t crc32_of(const void* data, std::size_t n);

}  // namespace reclab
