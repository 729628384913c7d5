#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dinp/rng.hpp"
#include "dinp/tensor.hpp"

namespace dinp {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

/// Noise schedule with 1-based timestep accessors; ᾱ_0 is defined as 1.
class NoiseSchedule {
 public:
  NoiseSchedule(ScheduleKind kind, std::vector<double> betas);

  ScheduleKind kind() const noexcept { return kind_; }
  int steps() const noexcept { return static_cast<int>(betas_.size()); }

  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  /// Valid for t ∈ [0, T].
  double alpha_bar(int t) const;
  double posterior_variance(int t) const { return posterior_variance_.at(index(t)); }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

 private:
  std::size_t index(int t) const;

  ScheduleKind kind_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variance_;
};

/// linear: β_t runs evenly from 1e-4 to 0.02·(1000/T) (capped at 0.999), so
/// T = 1000 spans exactly [1e-4, 0.02]. cosine: ᾱ_t = f(t)/f(0) with
/// f(t) = cos²(((t/T + 0.008)/1.008)·π/2), β capped at 0.999.
NoiseSchedule make_schedule(ScheduleKind kind, int steps);

void check_timestep(const NoiseSchedule& s, int t);

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε
Tensor<float> forward_diffuse(const Tensor<float>& x0, int t, const Tensor<float>& noise, const NoiseSchedule& s);

/// x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, optionally clipped to [−1, 1].
Tensor<float> predict_x0(const Tensor<float>& x_t, int t, const Tensor<float>& eps, const NoiseSchedule& s,
                         bool clip = true);

/// One ancestral step. With `clip_x0` the mean is formed from the clipped x̂0
/// through the posterior-mean identity; otherwise from ε̂ directly.
Tensor<float> ddpm_step(const Tensor<float>& x_t, int t, const Tensor<float>& eps, const NoiseSchedule& s, Rng& rng,
                        bool clip_x0 = false);

/// Generalized DDIM update from t to t_prev (t_prev = 0 is the final step).
Tensor<float> ddim_step(const Tensor<float>& x_t, int t, int t_prev, const Tensor<float>& eps, double eta,
                        const NoiseSchedule& s, Rng& rng, bool clip_x0 = true);

/// Pairs (t, t_prev) of S evenly spaced, strictly decreasing timesteps; the
/// last is paired with 0.
std::vector<std::pair<int, int>> make_step_subsequence(int steps_total, int steps);

enum class GuidanceRule { standard, paper };

std::string to_string(GuidanceRule rule);
GuidanceRule parse_guidance_rule(const std::string& name);

/// standard: (1+W)·p_cond − W·p_uncond. paper: (W+1)·p_cond − p_uncond.
Tensor<float> guide(const Tensor<float>& p_cond, const Tensor<float>& p_uncond, double weight, GuidanceRule rule);

enum class SamplerKind { ddpm, ddim };

std::string to_string(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& name);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddim;
  int steps = 50;
  double eta = 0.0;
  double weight = 0.4;
  GuidanceRule rule = GuidanceRule::standard;

  /// ddpm requires steps == T; ddim 1 <= steps <= T.
  void validate(int schedule_steps) const;
  /// ddpm over every step, W = 0.4, paper guidance rule.
  static SamplerConfig paper_faithful(int schedule_steps);
  bool operator==(const SamplerConfig&) const = default;
};

/// Σ_mask (ε̂ − ε)² / |mask|
double masked_mse(const Tensor<float>& prediction, const Tensor<float>& target, const Tensor<float>& mask);

}  // namespace dinp
