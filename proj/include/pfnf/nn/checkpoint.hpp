#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "pfnf/nn/params.hpp"

namespace pfnf::nn {

inline constexpr std::array<char, 4> kCheckpointMagic{'P', 'F', 'N', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary checkpoint layout (all integers little-endian):
//   "PFNF" | u32 version | u64 metadata length | metadata JSON bytes |
//   float32 parameter blocks in declaration order.
// The metadata always carries a "parameters" array of {name, shape}; callers
// add their own keys (architecture, seed, step, ...).
struct Checkpoint {
  nlohmann::json metadata;
  ParameterSet<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& metadata,
                     const ParameterSet<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pfnf::nn
