#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dinp/diffusion.hpp"
#include "dinp/phantom.hpp"
#include "dinp/roi.hpp"
#include "dinp/unet.hpp"

namespace dinp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DiffusionConfig {
  ScheduleKind schedule = ScheduleKind::cosine;
  int steps = 200;

  void validate() const;
  bool operator==(const DiffusionConfig&) const = default;
};

struct AugmentOptions {
  bool flips = true;
  bool rotations = true;
  double max_rotation_deg = 15.0;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int total_steps = 5000;
  double ema_decay = 0.995;
  double grad_clip = 1.0;
  AugmentOptions augment;
  int validate_every = 500;
  int validation_samples = 512;
  int checkpoint_every = 1000;
  int oversample_factor = 2;
  std::uint64_t seed = 0;
  ScenarioPolicy policy;

  void validate() const;
};

struct RunConfig {
  PhantomSpec phantom;
  DiffusionConfig diffusion;
  UNetConfig unet;
  TrainConfig train;
  SamplerConfig sampler;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys and out-of-range values raise ConfigError naming the key.
/// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const UNetConfig& c);
UNetConfig unet_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DiffusionConfig& c);
DiffusionConfig diffusion_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

}  // namespace dinp
