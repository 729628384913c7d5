#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dinp/autograd.hpp"
#include "dinp/roi.hpp"
#include "dinp/tensor.hpp"

namespace dinp {

struct UNetConfig {
  int in_channels = 6;
  int out_channels = 1;
  int base_width = 32;
  std::vector<int> multipliers{1, 2, 2};
  int res_blocks = 1;
  /// Encoder depths (0 = full resolution) that carry self-attention.
  std::set<int> attention_levels{2};
  int time_width = 128;
  int code_width = 16;
  int embed_width = 128;
  int head_width = 32;
  int image_size = 64;

  void validate() const;
  int levels() const { return static_cast<int>(multipliers.size()); }
  int width(int level) const { return base_width * multipliers.at(static_cast<std::size_t>(level)); }
  bool operator==(const UNetConfig&) const = default;
};

inline int norm_groups(std::int64_t channels) { return static_cast<int>(std::min<std::int64_t>(8, channels)); }

/// Sinusoidal embedding: sin(t·ω_i) in the first half, cos(t·ω_i) in the
/// second, ω_i = 10000^(−2i/width).
std::vector<double> time_embedding(double t, int width);

struct ParamSpec {
  std::string name;
  Shape shape;
  /// Fan-in for the 1/√fan_in normal init; 0 marks a zero-initialized tensor.
  std::int64_t fan_in = 0;
  enum class Init { normal, zeros, ones, embedding } init = Init::normal;
};

/// Conditional ε-predictor over [B, 6, H, W] inputs, emitting [B, 1, H, W].
/// Stateless apart from the configuration; parameters live in a ParamMap.
class Denoiser {
 public:
  explicit Denoiser(UNetConfig config);

  const UNetConfig& config() const noexcept { return config_; }
  const std::vector<ParamSpec>& layout() const noexcept { return layout_; }
  std::int64_t parameter_count() const;

  /// Deterministic in `seed`; the output convolution starts at zero.
  ParamMap<float> init_params(std::uint64_t seed) const;
  /// Throws if names or shapes differ from the layout.
  template <typename T>
  void check_params(const ParamMap<T>& params) const;

  template <typename T>
  Var forward(Graph<T>& g, const ParamMap<T>& params, Var x, const std::vector<int>& timesteps,
              const std::vector<ConditioningVector>& cvs) const;

  /// Inference forward without gradient tracking.
  Tensor<float> predict(const ParamMap<float>& params, const Tensor<float>& x, const std::vector<int>& timesteps,
                        const std::vector<ConditioningVector>& cvs) const;

 private:
  UNetConfig config_;
  std::vector<ParamSpec> layout_;
};

/// Stacks per-sample [6, H, W] inputs into one batch tensor.
Tensor<float> stack_inputs(const std::vector<Tensor<float>>& inputs);

}  // namespace dinp
