#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinp/tensor.hpp"

namespace dinp {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'N', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume training or to serve the EMA weights.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::int64_t step = 0;
  ParamMap<float> live;
  ParamMap<float> ema;
  ParamMap<float> adam_m;
  ParamMap<float> adam_v;
  std::string rng_state;
  nlohmann::json metrics = nlohmann::json::array();
};

/// Layout: magic, u32 version, u64 manifest length, JSON manifest, float32
/// little-endian payloads, u32 CRC-32 of all preceding bytes.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Validated manifest without decoding the payload tensors.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace dinp
