#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pvc/network.hpp"

namespace pvc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "PVCK" little-endian binary: magic, version, config JSON, then every
/// parameter as (name, rank, extents, f32 values) in parameters() order.
std::vector<std::uint8_t> encode_checkpoint(Network<float>& net);
void save_checkpoint(Network<float>& net, const std::filesystem::path& path);

NetworkConfig checkpoint_config(const std::vector<std::uint8_t>& bytes);

/// Builds a network from the stored config and loads its parameters.
Network<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
Network<float> load_checkpoint(const std::filesystem::path& path);

/// Loads parameters into an existing network; a name, shape, or config
/// mismatch raises ConfigError.
void apply_checkpoint(Network<float>& net, const std::vector<std::uint8_t>& bytes);

}  // namespace pvc
