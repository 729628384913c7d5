#include "dinp/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dinp {

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "' (expected linear|cosine)");
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, std::vector<double> betas) : kind_(kind), betas_(std::move(betas)) {
  if (betas_.size() < 2) throw std::invalid_argument("noise schedule needs at least 2 steps");
  alpha_bars_.resize(betas_.size());
  posterior_variance_.resize(betas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0,1) at step " + std::to_string(i + 1));
    const double prev = prod;
    prod *= 1.0 - b;
    alpha_bars_[i] = prod;
    posterior_variance_[i] = b * (1.0 - prev) / (1.0 - prod);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1," + std::to_string(steps()) + "]");
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bars_.at(index(t));
}

NoiseSchedule make_schedule(ScheduleKind kind, int steps) {
  if (steps < 2) throw std::invalid_argument("schedule needs T >= 2, got " + std::to_string(steps));
  constexpr double kMaxBeta = 0.999;
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    const double start = 1e-4;
    const double end = 0.02 * 1000.0 / steps;
    for (int i = 0; i < steps; ++i) {
      const double b = start + (end - start) * static_cast<double>(i) / (steps - 1);
      betas[i] = std::min(b, kMaxBeta);
    }
  } else {
    auto f = [steps](double t) {
      const double c = std::cos(((t / steps + 0.008) / 1.008) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int i = 0; i < steps; ++i) {
      const double prev = f(i) / f0;
      const double cur = f(i + 1) / f0;
      betas[i] = std::min(1.0 - cur / prev, kMaxBeta);
    }
  }
  return NoiseSchedule(kind, std::move(betas));
}

void check_timestep(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1," + std::to_string(s.steps()) + "]");
}

namespace {

void require_same(const Tensor<float>& a, const Tensor<float>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

Tensor<float> gaussian_like(const Tensor<float>& like, Rng& rng) {
  Tensor<float> z(like.shape());
  for (auto& v : z.values()) v = static_cast<float>(rng.normal());
  return z;
}

}  // namespace

Tensor<float> forward_diffuse(const Tensor<float>& x0, int t, const Tensor<float>& noise, const NoiseSchedule& s) {
  check_timestep(s, t);
  require_same(x0, noise, "forward_diffuse");
  const double ab = s.alpha_bar(t);
  const float a = static_cast<float>(std::sqrt(ab));
  const float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor<float> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

Tensor<float> predict_x0(const Tensor<float>& x_t, int t, const Tensor<float>& eps, const NoiseSchedule& s, bool clip) {
  check_timestep(s, t);
  require_same(x_t, eps, "predict_x0");
  const double ab = s.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(ab);
  const double c = std::sqrt(1.0 - ab);
  Tensor<float> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = (x_t[i] - c * eps[i]) * inv;
    if (clip) v = std::clamp(v, -1.0, 1.0);
    out[i] = static_cast<float>(v);
  }
  return out;
}

Tensor<float> ddpm_step(const Tensor<float>& x_t, int t, const Tensor<float>& eps, const NoiseSchedule& s, Rng& rng,
                        bool clip_x0) {
  check_timestep(s, t);
  require_same(x_t, eps, "ddpm_step");
  const double beta = s.beta(t), alpha = s.alpha(t), ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  Tensor<float> mean(x_t.shape());
  if (clip_x0) {
    const Tensor<float> x0 = predict_x0(x_t, t, eps, s, true);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(c0 * x0[i] + ct * x_t[i]);
  } else {
    const double coef = beta / std::sqrt(1.0 - ab);
    const double inv = 1.0 / std::sqrt(alpha);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>((x_t[i] - coef * eps[i]) * inv);
  }
  if (t == 1) return mean;
  const float sigma = static_cast<float>(std::sqrt(s.posterior_variance(t)));
  for (auto& v : mean.values()) v += sigma * static_cast<float>(rng.normal());
  return mean;
}

Tensor<float> ddim_step(const Tensor<float>& x_t, int t, int t_prev, const Tensor<float>& eps, double eta,
                        const NoiseSchedule& s, Rng& rng, bool clip_x0) {
  check_timestep(s, t);
  if (t_prev < 0 || t_prev >= t)
    throw std::invalid_argument("ddim_step requires 0 <= t_prev < t, got t=" + std::to_string(t) +
                                " t_prev=" + std::to_string(t_prev));
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim eta must lie in [0,1]");
  require_same(x_t, eps, "ddim_step");
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  const double sigma =
      eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sab_prev = std::sqrt(ab_prev);
  const Tensor<float> x0 = predict_x0(x_t, t, eps, s, clip_x0);
  Tensor<float> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(sab_prev * x0[i] + dir * eps[i]);
  if (sigma > 0.0) {
    const Tensor<float> z = gaussian_like(out, rng);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<float>(sigma) * z[i];
  }
  return out;
}

std::vector<std::pair<int, int>> make_step_subsequence(int steps_total, int steps) {
  if (steps < 1 || steps > steps_total)
    throw std::invalid_argument("step count " + std::to_string(steps) + " outside [1," + std::to_string(steps_total) +
                                "]");
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    ts[k] = static_cast<int>((static_cast<std::int64_t>(k + 1) * steps_total) / steps);
  std::vector<std::pair<int, int>> out;
  out.reserve(ts.size());
  for (int k = steps - 1; k >= 0; --k) out.emplace_back(ts[k], k > 0 ? ts[k - 1] : 0);
  return out;
}

std::string to_string(GuidanceRule rule) {
  return rule == GuidanceRule::standard ? "standard" : "paper";
}

GuidanceRule parse_guidance_rule(const std::string& name) {
  if (name == "standard") return GuidanceRule::standard;
  if (name == "paper") return GuidanceRule::paper;
  throw std::invalid_argument("unknown guidance rule '" + name + "' (expected standard|paper)");
}

Tensor<float> guide(const Tensor<float>& p_cond, const Tensor<float>& p_uncond, double weight, GuidanceRule rule) {
  require_same(p_cond, p_uncond, "guide");
  if (!(weight >= 0.0)) throw std::invalid_argument("guidance weight must be >= 0");
  const double uncond_coef = rule == GuidanceRule::standard ? weight : 1.0;
  Tensor<float> out(p_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>((1.0 + weight) * p_cond[i] - uncond_coef * p_uncond[i]);
  return out;
}

std::string to_string(SamplerKind kind) {
  return kind == SamplerKind::ddpm ? "ddpm" : "ddim";
}

SamplerKind parse_sampler_kind(const std::string& name) {
  if (name == "ddpm") return SamplerKind::ddpm;
  if (name == "ddim") return SamplerKind::ddim;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected ddpm|ddim)");
}

void SamplerConfig::validate(int schedule_steps) const {
  if (kind == SamplerKind::ddpm && steps != schedule_steps)
    throw std::invalid_argument("ddpm sampling runs every step: steps must equal T = " + std::to_string(schedule_steps));
  if (steps < 1 || steps > schedule_steps)
    throw std::invalid_argument("steps must lie in [1, " + std::to_string(schedule_steps) + "]");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0,1]");
  if (!(weight >= 0.0) || !std::isfinite(weight)) throw std::invalid_argument("guidance weight must be >= 0");
}

SamplerConfig SamplerConfig::paper_faithful(int schedule_steps) {
  return SamplerConfig{SamplerKind::ddpm, schedule_steps, 0.0, 0.4, GuidanceRule::paper};
}

double masked_mse(const Tensor<float>& prediction, const Tensor<float>& target, const Tensor<float>& mask) {
  require_same(prediction, target, "masked_mse");
  require_same(prediction, mask, "masked_mse");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    if (mask[i] > 0.5f) {
      const double d = static_cast<double>(prediction[i]) - target[i];
      acc += d * d;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("masked_mse: empty mask");
  return acc / static_cast<double>(count);
}

}  // namespace dinp
