#include "dinp/roi.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dinp/phantom.hpp"

namespace dinp {

RoiTensor::RoiTensor(int height, int width) {
  for (auto& c : channels) c = Mask(height, width);
}

Mask RoiTensor::union_mask() const {
  Mask u(height(), width());
  for (const auto& c : channels) u |= c;
  return u;
}

void RoiTensor::validate() const {
  for (int c = 0; c < kRoiChannels; ++c) {
    if (!channels[c].same_size(channels[0]) || channels[c].size() != static_cast<std::size_t>(height()) * width())
      throw RoiError("ROI channel " + std::to_string(c) + " has a different size");
    for (auto b : channels[c].bits)
      if (b > 1) throw RoiError("ROI channel " + std::to_string(c) + " is not binary");
  }
  const bool components = channels[1].any() || channels[2].any() || channels[3].any();
  if (components && channels[4].any())
    throw RoiError("component channels 1-3 and the merged channel 4 cannot both be filled");
}

std::string to_string(ChannelMode m) {
  switch (m) {
    case ChannelMode::empty: return "empty";
    case ChannelMode::freeform: return "freeform";
    case ChannelMode::bbox: return "bbox";
  }
  return "?";
}

ChannelMode parse_channel_mode(const std::string& name) {
  if (name == "empty") return ChannelMode::empty;
  if (name == "freeform") return ChannelMode::freeform;
  if (name == "bbox") return ChannelMode::bbox;
  throw std::invalid_argument("unknown channel mode '" + name + "' (expected empty|freeform|bbox)");
}

bool ConditioningVector::is_dropped() const {
  return std::all_of(codes.begin(), codes.end(), [](auto c) { return c == 0; });
}

void ConditioningVector::validate() const {
  for (int c = 0; c < kRoiChannels; ++c)
    if (codes[c] > 3) throw RoiError("conditioning code " + std::to_string(codes[c]) + " at position " +
                                     std::to_string(c) + " outside {0,1,2,3}");
}

std::string ConditioningVector::to_string() const {
  std::string s = "(";
  for (int c = 0; c < kRoiChannels; ++c) {
    if (c) s += ",";
    s += std::to_string(codes[c]);
  }
  return s + ")";
}

Mask to_bounding_box(const Mask& mask) {
  int r0 = mask.height, r1 = -1, c0 = mask.width, c1 = -1;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (mask.at(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) throw RoiError("cannot fit a bounding box around an empty mask");
  Mask out(mask.height, mask.width);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) out.at(r, c) = 1;
  return out;
}

namespace {

// Rasterizes one candidate shape; returns false if it leaves `allowed`.
bool place_shape(Mask& out, const Mask& allowed, double cy, double cx, double radius, bool rectangle, double aspect) {
  const int n_r = allowed.height, n_c = allowed.width;
  Mask shape(n_r, n_c);
  double hh = radius, hw = radius;
  if (rectangle) {
    const double area = std::numbers::pi * radius * radius;
    hh = std::sqrt(area * aspect) / 2.0;
    hw = area / (2.0 * hh) / 2.0;
  }
  bool any = false;
  for (int r = std::max(0, static_cast<int>(cy - hh) - 1); r <= std::min(n_r - 1, static_cast<int>(cy + hh) + 1); ++r)
    for (int c = std::max(0, static_cast<int>(cx - hw) - 1); c <= std::min(n_c - 1, static_cast<int>(cx + hw) + 1);
         ++c) {
      const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
      const bool inside =
          rectangle ? (std::abs(dy) <= hh && std::abs(dx) <= hw) : (dy * dy + dx * dx <= radius * radius);
      if (!inside) continue;
      if (!allowed.at(r, c)) return false;
      shape.at(r, c) = 1;
      any = true;
    }
  // Shapes running off the frame count as leaving the allowed region.
  if (cy - hh < 0 || cx - hw < 0 || cy + hh > n_r || cx + hw > n_c) return false;
  if (!any) return false;
  out |= shape;
  return true;
}

void add_normal_shapes(Mask& out, const Mask& allowed, bool rectangles, Rng& rng, const NormalRoiGeometry& g) {
  const int side = std::max(allowed.height, allowed.width);
  const int shapes = static_cast<int>(rng.uniform_int(g.min_shapes, g.max_shapes));
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < allowed.bits.size(); ++i)
    if (allowed.bits[i]) candidates.push_back(i);
  if (candidates.empty()) throw RoiError("no normal tissue available for a normal-tissue ROI");
  for (int s = 0; s < shapes; ++s) {
    for (int attempt = 0; attempt < g.max_tries; ++attempt) {
      const std::size_t i = candidates[static_cast<std::size_t>(rng.uniform_int(0, candidates.size() - 1))];
      const double cy = static_cast<double>(i / allowed.width) + 0.5;
      const double cx = static_cast<double>(i % allowed.width) + 0.5;
      const double radius = rng.uniform(g.min_radius, g.max_radius) * side;
      const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
      if (place_shape(out, allowed, cy, cx, radius, rectangles, aspect)) break;
    }
  }
  if (out.none()) {
    // Every random draw failed: fall back to the smallest shape anywhere it fits.
    const double radius = g.min_radius * side;
    std::shuffle(candidates.begin(), candidates.end(), rng.engine());
    for (std::size_t i : candidates) {
      const double cy = static_cast<double>(i / allowed.width) + 0.5;
      const double cx = static_cast<double>(i % allowed.width) + 0.5;
      if (place_shape(out, allowed, cy, cx, radius, rectangles, 1.0)) return;
    }
    throw RoiError("no room for a normal-tissue ROI inside the brain region");
  }
}

}  // namespace

RoiTensor build_roi_tensor(const LabelMask& label, Scenario scenario, const BoxFlags& bbox, const Mask& brain, Rng& rng,
                           const NormalRoiGeometry& geometry) {
  if (brain.height != label.height || brain.width != label.width)
    throw RoiError("brain region and label differ in size");
  RoiTensor roi(label.height, label.width);
  const Mask tumor = label.tumor();
  if (scenario.tumor != TumorScenario::none && tumor.none())
    throw RoiError("scenario needs a tumor but the label has none");
  auto fill = [&](RoiChannel ch, const Mask& m) {
    const int c = static_cast<int>(ch);
    if (m.none()) return;
    roi.channels[c] = bbox[c] ? to_bounding_box(m) : m;
  };
  if (scenario.tumor == TumorScenario::components) {
    fill(RoiChannel::core, label.indicator(LabelMask::kCore));
    fill(RoiChannel::edema, label.indicator(LabelMask::kEdema));
    fill(RoiChannel::enhancement, label.indicator(LabelMask::kEnhancement));
  } else if (scenario.tumor == TumorScenario::merged) {
    fill(RoiChannel::merged, tumor);
  }
  if (scenario.normal_roi) {
    Mask allowed = brain;
    for (std::size_t i = 0; i < allowed.bits.size(); ++i)
      if (tumor.bits[i]) allowed.bits[i] = 0;
    add_normal_shapes(roi[RoiChannel::normal], allowed, bbox[0], rng, geometry);
  }
  return roi;
}

ConditioningVector build_conditioning_vector(const RoiTensor& roi, const BoxFlags& bbox) {
  ConditioningVector cv;
  for (int c = 0; c < kRoiChannels; ++c) {
    const bool filled = roi.channels[c].any();
    if (!filled && bbox[c]) throw RoiError("bbox mode requested for empty channel " + std::to_string(c));
    cv.codes[c] = static_cast<std::uint8_t>(!filled ? ChannelMode::empty
                                                    : (bbox[c] ? ChannelMode::bbox : ChannelMode::freeform));
  }
  return cv;
}

void check_conditioning(const RoiTensor& roi, const ConditioningVector& cv) {
  cv.validate();
  if (cv.is_dropped()) return;
  for (int c = 0; c < kRoiChannels; ++c) {
    const bool filled = roi.channels[c].any();
    if (cv.codes[c] == 0) throw RoiError("partial zero code at channel " + std::to_string(c));
    if (filled != (cv.codes[c] != static_cast<std::uint8_t>(ChannelMode::empty)))
      throw RoiError("conditioning code " + std::to_string(cv.codes[c]) + " disagrees with channel " +
                     std::to_string(c) + (filled ? " (filled)" : " (empty)"));
  }
}

ConditioningVector apply_guidance_dropout(const ConditioningVector& cv, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dropout probability must lie in [0,1]");
  return rng.bernoulli(p) ? ConditioningVector::dropped() : cv;
}

ModelImage normalize_and_pad(const SliceImage& image) {
  if (image.pixels.empty()) throw std::invalid_argument("cannot normalize an empty image");
  const auto [mn, mx] = std::minmax_element(image.pixels.begin(), image.pixels.end());
  ModelImage out;
  auto& n = out.norm;
  n.lo = *mn;
  n.hi = *mx;
  n.height = image.height;
  n.width = image.width;
  n.side = std::max(image.height, image.width);
  n.pad_top = (n.side - image.height) / 2;
  n.pad_left = (n.side - image.width) / 2;
  const float range = n.hi - n.lo;
  out.pixels = Tensor<float>({n.side, n.side}, -1.0f);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const float v = range > 0.0f ? (image.at(r, c) - n.lo) / range : 0.0f;
      out.pixels[static_cast<std::size_t>(r + n.pad_top) * n.side + c + n.pad_left] = 2.0f * v - 1.0f;
    }
  return out;
}

Mask pad_mask(const Mask& mask, const Normalization& n) {
  if (mask.height != n.height || mask.width != n.width) throw RoiError("mask does not match the image size");
  Mask out(n.side, n.side);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) out.at(r + n.pad_top, c + n.pad_left) = mask.at(r, c) ? 1 : 0;
  return out;
}

RoiTensor pad_roi(const RoiTensor& roi, const Normalization& n) {
  RoiTensor out;
  for (int c = 0; c < kRoiChannels; ++c) out.channels[c] = pad_mask(roi.channels[c], n);
  return out;
}

SliceImage denormalize(const Tensor<float>& pixels, const Normalization& n) {
  if (pixels.shape() != Shape{n.side, n.side}) throw ShapeError("denormalize: unexpected shape " + shape_string(pixels.shape()));
  SliceImage out(n.height, n.width);
  const float range = n.hi - n.lo;
  for (int r = 0; r < n.height; ++r)
    for (int c = 0; c < n.width; ++c) {
      const float v = (pixels[static_cast<std::size_t>(r + n.pad_top) * n.side + c + n.pad_left] + 1.0f) * 0.5f;
      out.at(r, c) = std::clamp(n.lo + v * range, 0.0f, 1.0f);
    }
  return out;
}

Tensor<float> mask_tensor(const Mask& mask) {
  Tensor<float> t({mask.height, mask.width});
  for (std::size_t i = 0; i < mask.bits.size(); ++i) t[i] = mask.bits[i] ? 1.0f : 0.0f;
  return t;
}

Tensor<float> model_input(const Tensor<float>& composite, const RoiTensor& roi) {
  const std::int64_t h = roi.height(), w = roi.width();
  if (composite.shape() != Shape{h, w}) throw ShapeError("model_input: composite " + shape_string(composite.shape()) +
                                                         " does not match ROI size");
  Tensor<float> x({6, h, w});
  const std::size_t plane = static_cast<std::size_t>(h * w);
  std::copy(composite.data(), composite.data() + plane, x.data());
  for (int c = 0; c < kRoiChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i) x[(c + 1) * plane + i] = roi.channels[c].bits[i] ? 1.0f : 0.0f;
  return x;
}

void ScenarioPolicy::validate() const {
  for (double p : {components, merged, normal_alone, add_normal, bbox_probability, dropout})
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("scenario probabilities must lie in [0,1]");
  if (std::abs(components + merged + normal_alone - 1.0) > 1e-9)
    throw std::invalid_argument("components + merged + normal_alone must sum to 1");
  if (!normal_roi_enabled && components + merged <= 0.0)
    throw std::invalid_argument("policy admits no scenario");
  if (geometry.min_shapes < 1 || geometry.max_shapes < geometry.min_shapes)
    throw std::invalid_argument("normal ROI shape counts must satisfy 1 <= min <= max");
  if (!(geometry.min_radius > 0.0 && geometry.max_radius >= geometry.min_radius && geometry.max_radius <= 0.5))
    throw std::invalid_argument("normal ROI radius range invalid");
  if (geometry.max_tries < 1) throw std::invalid_argument("normal ROI max_tries must be >= 1");
}

Scenario sample_scenario(const ScenarioPolicy& policy, bool has_tumor, Rng& rng) {
  if (!has_tumor) {
    if (!policy.normal_roi_enabled) throw RoiError("tumor-free slice admits no scenario with normal ROIs disabled");
    return {TumorScenario::none, true};
  }
  double w_comp = policy.components, w_merged = policy.merged;
  double w_alone = policy.normal_roi_enabled ? policy.normal_alone : 0.0;
  const double u = rng.uniform() * (w_comp + w_merged + w_alone);
  if (u < w_alone) return {TumorScenario::none, true};
  const auto kind = u < w_alone + w_comp ? TumorScenario::components : TumorScenario::merged;
  const bool extra = policy.normal_roi_enabled && rng.bernoulli(policy.add_normal);
  return {kind, extra};
}

TrainingSample make_training_sample(const SliceImage& image, const LabelMask& label, const NoiseSchedule& schedule,
                                    const ScenarioPolicy& policy, Rng& rng) {
  if (image.height != label.height || image.width != label.width)
    throw RoiError("image and label differ in size");
  const Scenario scenario = sample_scenario(policy, label.has_tumor(), rng);
  BoxFlags bbox{};
  for (auto& f : bbox) f = rng.bernoulli(policy.bbox_probability);
  const Mask brain = brain_region(image);
  RoiTensor roi = build_roi_tensor(label, scenario, bbox, brain, rng, policy.geometry);
  for (int c = 0; c < kRoiChannels; ++c)
    if (roi.channels[c].none()) bbox[c] = false;
  const ConditioningVector cv = build_conditioning_vector(roi, bbox);

  TrainingSample s;
  const ModelImage m = normalize_and_pad(image);
  s.clean = m.pixels;
  s.roi = pad_roi(roi, m.norm);
  s.cv = apply_guidance_dropout(cv, policy.dropout, rng);
  s.t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
  s.noise = Tensor<float>(s.clean.shape());
  for (auto& v : s.noise.values()) v = static_cast<float>(rng.normal());
  const Mask u = s.roi.union_mask();
  if (u.none()) throw RoiError("training sample has an empty union mask");
  s.union_mask = mask_tensor(u);
  const Tensor<float> noisy = forward_diffuse(s.clean, s.t, s.noise, schedule);
  s.composite = s.clean;
  for (std::size_t i = 0; i < u.bits.size(); ++i)
    if (u.bits[i]) s.composite[i] = noisy[i];
  return s;
}

}  // namespace dinp
