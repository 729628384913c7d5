#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinp/checkpoint.hpp"
#include "dinp/config.hpp"
#include "dinp/diffusion.hpp"
#include "dinp/roi.hpp"
#include "dinp/unet.hpp"

namespace dinp {

class InpaintError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Read-only inference weights. Built only from a checkpoint's EMA tensors,
/// so sampling can never see the live training parameters.
class InferenceModel {
 public:
  static std::shared_ptr<const InferenceModel> from_checkpoint(const Checkpoint& ckpt);
  static std::shared_ptr<const InferenceModel> load(const std::filesystem::path& path);

  const Denoiser& denoiser() const noexcept { return net_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const ParamMap<float>& params() const noexcept { return params_; }
  std::int64_t step() const noexcept { return step_; }
  int image_size() const noexcept { return net_.config().image_size; }

  Tensor<float> predict_eps(const Tensor<float>& x6, int t, const ConditioningVector& cv) const;

 private:
  InferenceModel(Denoiser net, NoiseSchedule schedule, ParamMap<float> params, std::int64_t step)
      : net_(std::move(net)), schedule_(std::move(schedule)), params_(std::move(params)), step_(step) {}

  Denoiser net_;
  NoiseSchedule schedule_;
  ParamMap<float> params_;
  std::int64_t step_;
};

struct InpaintRequest {
  SliceImage image;  // [0,1]
  RoiTensor roi;
  ConditioningVector cv;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
};

struct InpaintResult {
  SliceImage image;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
  ConditioningVector cv;
  int steps_executed = 0;
  double seconds = 0.0;
};

/// Throws InpaintError on empty union, size mismatch, or inconsistent codes.
void validate_request(const InpaintRequest& request, const InferenceModel& model);

/// Optional per-step observer: (t, current model-space state).
using StepObserver = std::function<void(int, const Tensor<float>&)>;

InpaintResult inpaint(const InferenceModel& model, const InpaintRequest& request, const StepObserver& observer = {});

enum class ScenarioKind { components, merged_tumor, normal_tissue, simultaneous };
std::string to_string(ScenarioKind k);
ScenarioKind parse_scenario_kind(const std::string& name);

/// Builds the request for one of the evaluation scenarios from a labeled
/// slice. `bbox` selects bounding-box mode for every filled channel.
/// simultaneous: channel 0 covers the tumor (removal) and the merged channel
/// places a tumor-shaped region elsewhere in the brain.
InpaintRequest scenario_preset(ScenarioKind kind, const SliceImage& image, const LabelMask& label, bool bbox,
                               const SamplerConfig& sampler, std::uint64_t seed);

/// One result per weight with the same seed, hence the same noise draws.
std::vector<InpaintResult> weight_sweep(const InferenceModel& model, const InpaintRequest& request,
                                        const std::vector<double>& weights);
std::vector<InpaintResult> seed_sweep(const InferenceModel& model, const InpaintRequest& request,
                                      const std::vector<std::uint64_t>& seeds);

}  // namespace dinp
