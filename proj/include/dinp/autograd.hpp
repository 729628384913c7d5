#pragma once

#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dinp/tensor.hpp"

namespace dinp {

/// Handle to a value recorded in a Graph.
struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Tape-based reverse-mode differentiation over NCHW tensors.
///
/// Values are recorded in creation order; backward() walks the tape in
/// reverse. Parameters are bound by name and referenced, not copied, so the
/// ParamMap passed to parameter() must outlive the graph. A graph built with
/// `track_gradients = false` records values only and is used for inference.
template <typename T>
class Graph {
 public:
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value);
  Var parameter(const std::string& name, const Tensor<T>& value);

  const Tensor<T>& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool tracking() const noexcept { return track_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Layers. Spatial tensors are [B, C, H, W].
  Var conv2d(Var x, Var weight, std::optional<Var> bias, int stride, int padding);
  Var linear(Var x, Var weight, Var bias);
  Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
  Var silu(Var x);
  Var upsample_nearest2x(Var x);
  Var attention(Var qkv, int heads);
  Var embedding(Var table, const std::vector<int>& indices);
  /// x * (1 + scale) + shift with scale_shift = [scale | shift] of shape [B, 2C].
  Var modulate(Var x, Var scale_shift);

  // Elementwise and structural.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var square(Var a);
  Var sum(Var a);
  Var concat_channels(Var a, Var b);
  Var concat_features(const std::vector<Var>& parts);

  /// Mean over the batch of per-sample masked mean squared error. Target and
  /// mask are constants; every sample's mask must be nonempty.
  Var masked_mse(Var prediction, Var target, Var mask);

  void backward(Var loss);
  /// Gradient of the last backward() w.r.t. v; zeros if v was not reached.
  Tensor<T> grad(Var v) const;
  /// One gradient per bound parameter, zero-filled where unreachable.
  ParamMap<T> parameter_gradients() const;

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    std::function<void()> backward;
    std::string op;
    bool requires_grad = false;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  Var push(Tensor<T> value, std::string op, std::initializer_list<Var> inputs);
  void set_backward(Var v, std::function<void()> fn);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  Tensor<T>& grad_ref(Var v);
  const Node& node(Var v) const;

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> params_;
};

/// A differentiable scalar function of named parameters: binds parameters
/// into the graph and returns the scalar loss.
template <typename T>
using GraphBuilder = std::function<Var(Graph<T>&, const ParamMap<T>&)>;

template <typename T>
struct Evaluation {
  T loss{};
  ParamMap<T> gradients;
};

template <typename T>
Evaluation<T> evaluate_with_gradients(const GraphBuilder<T>& builder, const ParamMap<T>& params);

template <typename T>
T evaluate(const GraphBuilder<T>& builder, const ParamMap<T>& params);

struct ParameterProbe {
  std::string name;
  std::size_t index = 0;
};

/// Central differences (f(θ+h) − f(θ−h)) / 2h for every element of every
/// parameter. 64-bit only.
template <std::same_as<double> T>
ParamMap<T> finite_difference_gradients(const GraphBuilder<T>& builder, const ParamMap<T>& params, T step);

/// Central difference for a sampled set of parameter elements.
template <std::same_as<double> T>
std::vector<T> finite_difference_probes(const GraphBuilder<T>& builder, const ParamMap<T>& params,
                                        const std::vector<ParameterProbe>& probes, T step);

/// Plain (non-recorded) 2D cross-correlation, [B,Ci,H,W] x [Co,Ci,k,k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int padding);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace dinp
