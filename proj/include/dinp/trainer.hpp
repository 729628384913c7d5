#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dinp/checkpoint.hpp"
#include "dinp/config.hpp"
#include "dinp/diffusion.hpp"
#include "dinp/phantom.hpp"
#include "dinp/roi.hpp"
#include "dinp/unet.hpp"

namespace dinp {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Same geometric transform on both rasters: optional vertical and horizontal
/// flips, then a rotation uniform in ±max_rotation_deg (bilinear for the
/// image, nearest for the label; outside pixels become 0).
std::pair<SliceImage, LabelMask> augment(const SliceImage& image, const LabelMask& label, const AugmentOptions& options,
                                         Rng& rng);

struct Batch {
  Tensor<float> input;  // [B, 6, S, S]
  Tensor<float> noise;  // [B, 1, S, S]
  Tensor<float> mask;   // [B, 1, S, S]
  std::vector<int> timesteps;
  std::vector<ConditioningVector> cvs;
  std::vector<std::string> sources;  // per-sample provenance for diagnostics

  std::size_t size() const { return timesteps.size(); }
};

Batch collate(const std::vector<TrainingSample>& samples, const std::vector<std::string>& sources = {});

/// Mean over the batch of per-sample masked MSE, no gradient.
double batch_loss(const Denoiser& net, const ParamMap<float>& params, const Batch& batch);

struct AdamState {
  ParamMap<float> m;
  ParamMap<float> v;
  std::int64_t steps = 0;
};

AdamState make_adam_state(const ParamMap<float>& params);
/// β = (0.9, 0.999), ε = 1e-8, bias-corrected, no weight decay.
void adam_update(ParamMap<float>& params, const ParamMap<float>& grads, AdamState& state, double lr);
/// Scales gradients in place to global L2 norm ≤ max_norm; returns the norm before scaling.
double clip_global_norm(ParamMap<float>& grads, double max_norm);
/// ema ← decay·ema + (1 − decay)·live
void ema_update(ParamMap<float>& ema, const ParamMap<float>& live, double decay);

struct MetricRecord {
  std::int64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_mse;
  double lr = 0.0;
};

nlohmann::json to_json(const MetricRecord& r);

struct TrainState {
  std::int64_t step = 0;
  ParamMap<float> live;
  ParamMap<float> ema;
  AdamState adam;
  Rng rng;
  std::vector<MetricRecord> history;
};

TrainState make_train_state(const Denoiser& net, std::uint64_t seed);

/// One optimizer update on `batch`; returns the loss before the update.
/// Throws TrainingError naming the offending sample on a non-finite loss.
double train_step(TrainState& state, const Denoiser& net, const Batch& batch, const TrainConfig& config);

/// Fixed validation draw: each sample's pipeline seed is frozen, so the set is
/// identical across runs and checkpoints.
std::vector<TrainingSample> make_validation_set(const SliceDataset& data, const std::vector<std::size_t>& records,
                                                const NoiseSchedule& schedule, const ScenarioPolicy& policy,
                                                int count, std::uint64_t seed);
double validation_mse(const Denoiser& net, const ParamMap<float>& params, const std::vector<TrainingSample>& samples,
                      int chunk = 16);

Checkpoint to_checkpoint(const TrainState& state, const RunConfig& config);

struct FitOptions {
  std::filesystem::path out_dir;
  /// Called after every step with the newest record.
  std::function<void(const MetricRecord&)> on_step;
};

struct FitResult {
  TrainState state;
  std::vector<std::filesystem::path> checkpoints;
};

/// Trains on the train split, validating on the validation split with EMA
/// parameters. Writes step-NNNNNN.ckpt files and metrics.jsonl to out_dir.
FitResult fit(const RunConfig& config, const SliceDataset& data, const SplitAssignment& splits,
              const FitOptions& options);

std::string checkpoint_filename(std::int64_t step);

}  // namespace dinp
