#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "dinp/diffusion.hpp"
#include "dinp/image.hpp"
#include "dinp/rng.hpp"
#include "dinp/tensor.hpp"

namespace dinp {

class RoiError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kRoiChannels = 5;

/// Channel order of the ROI tensor.
enum class RoiChannel : int { normal = 0, core = 1, edema = 2, enhancement = 3, merged = 4 };

struct RoiTensor {
  std::array<Mask, kRoiChannels> channels;

  RoiTensor() = default;
  RoiTensor(int height, int width);

  int height() const { return channels[0].height; }
  int width() const { return channels[0].width; }
  Mask& operator[](RoiChannel c) { return channels[static_cast<int>(c)]; }
  const Mask& operator[](RoiChannel c) const { return channels[static_cast<int>(c)]; }
  Mask union_mask() const;
  /// Throws RoiError on size mismatch, non-binary values, or when both
  /// component channels and the merged channel are filled.
  void validate() const;
  bool operator==(const RoiTensor&) const = default;
};

/// Mode codes; 0 is reserved for the dropped-out (unconditional) vector.
enum class ChannelMode : std::uint8_t { empty = 1, freeform = 2, bbox = 3 };
std::string to_string(ChannelMode m);
ChannelMode parse_channel_mode(const std::string& name);

struct ConditioningVector {
  std::array<std::uint8_t, kRoiChannels> codes{1, 1, 1, 1, 1};

  static ConditioningVector dropped() { return ConditioningVector{{0, 0, 0, 0, 0}}; }
  bool is_dropped() const;
  /// Throws RoiError if any code lies outside {0,1,2,3}.
  void validate() const;
  std::string to_string() const;
  bool operator==(const ConditioningVector&) const = default;
};

/// Per-channel bounding-box flags; false means free-form.
using BoxFlags = std::array<bool, kRoiChannels>;

/// Tight filled rectangle around the set pixels. Throws RoiError on an empty mask.
Mask to_bounding_box(const Mask& mask);

enum class TumorScenario { none, components, merged };

struct Scenario {
  TumorScenario tumor = TumorScenario::none;
  bool normal_roi = false;
};

struct NormalRoiGeometry {
  int min_shapes = 1;
  int max_shapes = 3;
  double min_radius = 0.04;  // fraction of the image side
  double max_radius = 0.25;
  int max_tries = 50;
};

/// Fills channels per scenario. Normal-tissue shapes are circles (free-form)
/// or rectangles of equal area (bbox flag on channel 0), placed wholly inside
/// `brain` and off the tumor.
RoiTensor build_roi_tensor(const LabelMask& label, Scenario scenario, const BoxFlags& bbox, const Mask& brain, Rng& rng,
                           const NormalRoiGeometry& geometry = {});

/// Throws RoiError if a bbox flag is set on an empty channel.
ConditioningVector build_conditioning_vector(const RoiTensor& roi, const BoxFlags& bbox);

/// Consistency between codes and channel occupancy; dropped vectors pass.
void check_conditioning(const RoiTensor& roi, const ConditioningVector& cv);

/// With probability p the whole vector becomes zero.
ConditioningVector apply_guidance_dropout(const ConditioningVector& cv, double p, Rng& rng);

/// Geometry and intensity range needed to undo normalize_and_pad.
struct Normalization {
  float lo = 0.0f;
  float hi = 0.0f;
  int height = 0;
  int width = 0;
  int side = 0;
  int pad_top = 0;
  int pad_left = 0;
};

struct ModelImage {
  Tensor<float> pixels;  // [side, side], values in [-1, 1]
  Normalization norm;
};

/// Min-max to [0,1] (constant → 0), centered zero-pad to square, v → 2v − 1.
ModelImage normalize_and_pad(const SliceImage& image);
Mask pad_mask(const Mask& mask, const Normalization& norm);
RoiTensor pad_roi(const RoiTensor& roi, const Normalization& norm);
/// Crops the padding, inverts both normalization stages and clips to [0,1].
SliceImage denormalize(const Tensor<float>& pixels, const Normalization& norm);

Tensor<float> mask_tensor(const Mask& mask);
/// [6, H, W]: composite followed by the five ROI planes.
Tensor<float> model_input(const Tensor<float>& composite, const RoiTensor& roi);

struct ScenarioPolicy {
  double components = 0.4;
  double merged = 0.4;
  double normal_alone = 0.2;
  /// Chance that a tumor scenario also gets normal-tissue ROIs.
  double add_normal = 0.5;
  double bbox_probability = 0.5;
  double dropout = 0.1;
  bool normal_roi_enabled = true;
  NormalRoiGeometry geometry;

  void validate() const;
};

/// Tumor-free slices always get normal-tissue ROIs alone.
Scenario sample_scenario(const ScenarioPolicy& policy, bool has_tumor, Rng& rng);

struct TrainingSample {
  Tensor<float> clean;       // [S, S] model space
  Tensor<float> composite;   // x_t inside the union mask, clean elsewhere
  RoiTensor roi;             // padded to [S, S]
  ConditioningVector cv;     // after dropout
  int t = 0;
  Tensor<float> noise;       // [S, S]
  Tensor<float> union_mask;  // [S, S], 0/1
};

TrainingSample make_training_sample(const SliceImage& image, const LabelMask& label, const NoiseSchedule& schedule,
                                    const ScenarioPolicy& policy, Rng& rng);

}  // namespace dinp
