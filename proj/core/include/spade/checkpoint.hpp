#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "spade/model.hpp"

namespace spade {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container layout (all integers little-endian):
///   "SPADECKP" | u32 version | 7 x u64 config fields
///   (vocab, d_model, heads, layers, d_ff, max_seq_len, seed) | u64 tensor count
///   per tensor: u32 name length | name | u32 rank | u64 dims... | u64 payload offset
///   payload: float64 values, little-endian, in index order.
std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the serialised bytes, rendered as 16 hex digits.
std::string model_fingerprint(const ModelParams& params);
std::string hash_bytes(const std::string& bytes);

}  // namespace spade
