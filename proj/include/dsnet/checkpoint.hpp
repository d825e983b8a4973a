#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

#include "dsnet/builder.hpp"
#include "dsnet/graph.hpp"
#include "dsnet/params.hpp"

namespace dsnet {

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'N', '1'};
inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

struct Checkpoint {
  NetworkConfig config;
  GraphSpec graph;
  ParamStore<float> params;
  nlohmann::json meta = nlohmann::json::object();
};

/// Container layout:
///   bytes 0-3   magic "DSN1"
///   bytes 4-7   little-endian u32 header length L
///   bytes 8..   UTF-8 JSON header {format_version, network_config, graph,
///               tensors: [{name, shape, dtype, byte_offset, byte_length}], meta},
///               space-padded so the payload starts on a 64-byte boundary
///   payload     little-endian IEEE-754 values; each tensor starts at a
///               64-byte aligned offset relative to the payload start,
///               gaps are zero-filled
/// Encoding is deterministic: equal inputs give identical bytes.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes to "<path>.tmp" and renames over `path` once complete.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsnet
