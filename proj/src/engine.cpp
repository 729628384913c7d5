#include "dinp/engine.hpp"

#include <chrono>
#include <cmath>
#include <utility>

#include "dinp/phantom.hpp"

namespace dinp {

std::shared_ptr<const InferenceModel> InferenceModel::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.config.is_object()) throw CheckpointError("checkpoint carries no configuration");
  UNetConfig unet;
  DiffusionConfig diffusion;
  try {
    unet = unet_config_from_json(ckpt.config.at("unet"));
    diffusion = diffusion_config_from_json(ckpt.config.at("diffusion"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint configuration incomplete: ") + e.what());
  }
  Denoiser net(unet);
  try {
    net.check_params(ckpt.ema);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint EMA weights do not match its configuration: ") + e.what());
  }
  for (const auto& [name, t] : ckpt.ema)
    if (!all_finite(t.values())) throw CheckpointError("checkpoint EMA tensor '" + name + "' is not finite");
  auto schedule = make_schedule(diffusion.schedule, diffusion.steps);
  return std::shared_ptr<const InferenceModel>(
      new InferenceModel(std::move(net), std::move(schedule), ckpt.ema, ckpt.step));
}

std::shared_ptr<const InferenceModel> InferenceModel::load(const std::filesystem::path& path) {
  return from_checkpoint(load_checkpoint(path));
}

Tensor<float> InferenceModel::predict_eps(const Tensor<float>& x6, int t, const ConditioningVector& cv) const {
  const Shape s = x6.shape();
  Tensor<float> eps = net_.predict(params_, x6.reshaped({1, s.at(0), s.at(1), s.at(2)}), {t}, {cv});
  return std::move(eps).reshaped({s.at(1), s.at(2)});
}

void validate_request(const InpaintRequest& req, const InferenceModel& model) {
  const auto& img = req.image;
  if (img.height <= 0 || img.width <= 0 || img.pixels.size() != static_cast<std::size_t>(img.height) * img.width)
    throw InpaintError("image is empty or malformed");
  for (float v : img.pixels)
    if (!(v >= 0.0f && v <= 1.0f)) throw InpaintError("image intensities must lie in [0,1]");
  for (int c = 0; c < kRoiChannels; ++c) {
    const Mask& m = req.roi.channels[c];
    if (m.height != img.height || m.width != img.width)
      throw InpaintError("mask channel " + std::to_string(c) + " is " + std::to_string(m.height) + "x" +
                         std::to_string(m.width) + " but the image is " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
  }
  if (std::max(img.height, img.width) != model.image_size())
    throw InpaintError("image side " + std::to_string(std::max(img.height, img.width)) +
                       " does not match the model size " + std::to_string(model.image_size()));
  try {
    req.roi.validate();
    check_conditioning(req.roi, req.cv);
    req.sampler.validate(model.schedule().steps());
  } catch (const std::invalid_argument& e) {
    throw InpaintError(e.what());
  }
  if (req.roi.union_mask().none()) throw InpaintError("empty union mask: no ROI pixels to inpaint");
}

InpaintResult inpaint(const InferenceModel& model, const InpaintRequest& req, const StepObserver& observer) {
  validate_request(req, model);
  const auto start = std::chrono::steady_clock::now();
  const NoiseSchedule& sched = model.schedule();
  const SamplerConfig& sc = req.sampler;

  const ModelImage m = normalize_and_pad(req.image);
  const RoiTensor roi = pad_roi(req.roi, m.norm);
  const Mask u = roi.union_mask();
  const Tensor<float>& clean = m.pixels;

  Rng rng(req.seed);
  Tensor<float> x = clean;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto z = static_cast<float>(rng.normal());
    if (u.bits[i]) x[i] = z;
  }

  std::vector<std::pair<int, int>> steps;
  if (sc.kind == SamplerKind::ddpm) {
    for (int t = sched.steps(); t >= 1; --t) steps.emplace_back(t, t - 1);
  } else {
    steps = make_step_subsequence(sched.steps(), sc.steps);
  }
  const bool need_uncond = !(sc.rule == GuidanceRule::standard && sc.weight == 0.0);
  const ConditioningVector uncond = ConditioningVector::dropped();

  int executed = 0;
  for (const auto& [t, t_prev] : steps) {
    const Tensor<float> input = model_input(x, roi);
    Tensor<float> eps = model.predict_eps(input, t, req.cv);
    if (need_uncond) eps = guide(eps, model.predict_eps(input, t, uncond), sc.weight, sc.rule);
    x = sc.kind == SamplerKind::ddpm ? ddpm_step(x, t, eps, sched, rng)
                                     : ddim_step(x, t, t_prev, eps, sc.eta, sched, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!u.bits[i]) x[i] = clean[i];
    if (!all_finite(std::as_const(x).values()))
      throw std::runtime_error("sampler state became non-finite at timestep " + std::to_string(t));
    ++executed;
    if (observer) observer(t, x);
  }

  const SliceImage generated = denormalize(x, m.norm);
  InpaintResult res;
  res.image = req.image;
  const Mask& unpadded_union = req.roi.union_mask();
  for (std::size_t i = 0; i < res.image.pixels.size(); ++i)
    if (unpadded_union.bits[i]) res.image.pixels[i] = generated.pixels[i];
  res.sampler = sc;
  res.seed = req.seed;
  res.cv = req.cv;
  res.steps_executed = executed;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::components: return "components";
    case ScenarioKind::merged_tumor: return "merged_tumor";
    case ScenarioKind::normal_tissue: return "normal_tissue";
    case ScenarioKind::simultaneous: return "simultaneous";
  }
  return "?";
}

ScenarioKind parse_scenario_kind(const std::string& name) {
  if (name == "components" || name == "1") return ScenarioKind::components;
  if (name == "merged_tumor" || name == "merged" || name == "2") return ScenarioKind::merged_tumor;
  if (name == "normal_tissue" || name == "normal" || name == "3") return ScenarioKind::normal_tissue;
  if (name == "simultaneous") return ScenarioKind::simultaneous;
  throw std::invalid_argument("unknown scenario '" + name + "' (expected 1|2|3|simultaneous)");
}

namespace {

Mask translate(const Mask& m, int dy, int dx) {
  Mask out(m.height, m.width);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        const int rr = r + dy, cc = c + dx;
        if (rr < 0 || cc < 0 || rr >= m.height || cc >= m.width) return Mask();
        out.at(rr, cc) = 1;
      }
  return out;
}

bool inside(const Mask& m, const Mask& region) {
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i] && !region.bits[i]) return false;
  return true;
}

// Moves `shape` to the brain location closest to its mirror image across the
// brain's vertical midline, staying inside the brain and clear of `avoid`.
Mask relocate(const Mask& shape, const Mask& brain, const Mask& avoid) {
  double shape_c = 0, brain_c = 0;
  for (int r = 0; r < shape.height; ++r)
    for (int c = 0; c < shape.width; ++c) {
      if (shape.at(r, c)) shape_c += c;
      if (brain.at(r, c)) brain_c += c;
    }
  shape_c /= static_cast<double>(shape.count());
  brain_c /= static_cast<double>(std::max<std::size_t>(1, brain.count()));
  const int mirror_dx = static_cast<int>(std::lround(2.0 * (brain_c - shape_c)));
  const int reach = std::max(shape.height, shape.width);
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -reach; dy <= reach; ++dy)
    for (int dx = -2 * reach; dx <= 2 * reach; ++dx) offsets.emplace_back(dy, dx);
  auto cost = [&](const std::pair<int, int>& o) {
    const int ex = o.second - mirror_dx;
    return o.first * o.first + ex * ex;
  };
  std::stable_sort(offsets.begin(), offsets.end(), [&](const auto& a, const auto& b) { return cost(a) < cost(b); });
  for (const auto& [dy, dx] : offsets) {
    if (dy == 0 && dx == 0) continue;
    const Mask moved = translate(shape, dy, dx);
    if (moved.bits.empty()) continue;
    if (inside(moved, brain) && !moved.intersects(avoid)) return moved;
  }
  throw RoiError("no room inside the brain to place a synthetic tumor");
}

}  // namespace

InpaintRequest scenario_preset(ScenarioKind kind, const SliceImage& image, const LabelMask& label, bool bbox,
                               const SamplerConfig& sampler, std::uint64_t seed) {
  if (image.height != label.height || image.width != label.width)
    throw RoiError("label does not match the image size");
  label.validate();
  const Mask tumor = label.tumor();
  if (tumor.none()) throw RoiError("scenario " + to_string(kind) + " needs a tumor in the label");
  InpaintRequest req;
  req.image = image;
  req.sampler = sampler;
  req.seed = seed;
  req.roi = RoiTensor(image.height, image.width);
  BoxFlags flags{};
  auto fill = [&](RoiChannel ch, const Mask& m) {
    if (m.none()) return;
    req.roi[ch] = bbox ? to_bounding_box(m) : m;
    flags[static_cast<int>(ch)] = bbox;
  };
  switch (kind) {
    case ScenarioKind::components:
      fill(RoiChannel::core, label.indicator(LabelMask::kCore));
      fill(RoiChannel::edema, label.indicator(LabelMask::kEdema));
      fill(RoiChannel::enhancement, label.indicator(LabelMask::kEnhancement));
      break;
    case ScenarioKind::merged_tumor:
      fill(RoiChannel::merged, tumor);
      break;
    case ScenarioKind::normal_tissue:
      fill(RoiChannel::normal, tumor);
      break;
    case ScenarioKind::simultaneous: {
      fill(RoiChannel::normal, tumor);
      Mask brain = brain_region(image);
      brain |= tumor;
      const Mask shape = bbox ? to_bounding_box(tumor) : tumor;
      req.roi[RoiChannel::merged] = relocate(shape, brain, req.roi[RoiChannel::normal]);
      flags[static_cast<int>(RoiChannel::merged)] = bbox;
      break;
    }
  }
  req.cv = build_conditioning_vector(req.roi, flags);
  return req;
}

std::vector<InpaintResult> weight_sweep(const InferenceModel& model, const InpaintRequest& request,
                                        const std::vector<double>& weights) {
  if (weights.empty()) throw InpaintError("weight sweep needs at least one weight");
  std::vector<InpaintResult> out;
  for (double w : weights) {
    InpaintRequest r = request;
    r.sampler.weight = w;
    out.push_back(inpaint(model, r));
  }
  return out;
}

std::vector<InpaintResult> seed_sweep(const InferenceModel& model, const InpaintRequest& request,
                                      const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InpaintError("seed sweep needs at least one seed");
  std::vector<InpaintResult> out;
  for (auto s : seeds) {
    InpaintRequest r = request;
    r.seed = s;
    out.push_back(inpaint(model, r));
  }
  return out;
}

}  // namespace dinp
