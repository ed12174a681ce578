#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ugp/net.hpp"
#include "ugp/tensor.hpp"

namespace ugp {

/// Named tensors stored in a checkpoint container, ordered by name.
using TensorArchive = std::map<std::string, Tensor, std::less<>>;

inline constexpr char kCheckpointMagic[4] = {'U', 'G', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Container layout: magic "UGPC", u32 format version, then per tensor (in
/// lexicographic name order) u16 name length, UTF-8 name, u8 rank, u32 dims,
/// little-endian f64 payload. Everything little-endian.
std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(std::span<const std::uint8_t> bytes);

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

/// Adds every parameter tensor plus `_meta/version` and the architecture
/// description under `_meta/`.
void export_network(const NetworkParams& params, TensorArchive& archive);
NetworkParams import_network(const TensorArchive& archive);

const Tensor& archive_at(const TensorArchive& archive, std::string_view name);

}  // namespace ugp
