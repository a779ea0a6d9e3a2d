#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stclip/param_store.hpp"

namespace stclip {

// Binary layout, little-endian throughout:
//   "STCK" | u32 version | u32 count
//   count × { u16 name_len | name | u8 ndim | ndim × u32 dim | float32 payload }
//   u32 CRC-32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ParamStore& store);

struct LoadedCheckpoint {
  ParamStore store;  // every entry loads as trainable
  std::vector<std::string> warnings;
};

// Throws FormatError carrying the byte offset of the first problem. Tensors
// with unrecognised name prefixes are kept and reported as warnings.
LoadedCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stclip
