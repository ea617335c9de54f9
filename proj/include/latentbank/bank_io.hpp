#pragma once

#include <optional>
#include <string>

#include "latentbank/adapters.hpp"

namespace latentbank {

// BankFile: "LMB1" | version u16 | method u8 | capacity u8 | rows u32 |
// cols u32 | turn_counter u64 | payload f32[rows*cols] | crc32(payload) u32.
// All integers and floats little-endian; payload row-major float32 on disk
// regardless of the in-memory precision.
inline constexpr uint16_t kBankVersion = 1;

void save_bank(const MemoryState<float>& state, int capacity_scale, const std::string& path);

struct LoadedBank {
    MemoryState<float> state;
    int capacity_scale = 0;
};

// CRC, version and (when given) method id are enforced; a bad file never
// yields a usable state.
LoadedBank load_bank(const std::string& path,
                     std::optional<MethodId> expected_method = std::nullopt);

// Adapter parameter file: trainable + frozen tensors with their names, the
// memory hyper-parameters and the backbone configuration they were trained
// against. Same endianness and CRC rules as the bank file.
inline constexpr uint16_t kParamsVersion = 1;

void save_params(const AdapterParams<float>& params, const BackboneConfig& backbone,
                 const std::string& path);

struct LoadedParams {
    AdapterParams<float> params;
    BackboneConfig backbone;
};

LoadedParams load_params(const std::string& path,
                         std::optional<MethodId> expected_method = std::nullopt);

} // namespace latentbank
