#include "dinp/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "dinp/rng.hpp"

namespace dinp {

void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("unet config: " + m); };
  if (in_channels != 6) fail("input channels must be 6");
  if (out_channels != 1) fail("output channels must be 1");
  if (base_width < 1 || multipliers.empty()) fail("base width and multipliers required");
  for (int m : multipliers) {
    if (m < 1) fail("multipliers must be >= 1");
    const int c = base_width * m;
    if (c % norm_groups(c) != 0) fail("width " + std::to_string(c) + " not divisible by its group count");
  }
  if (res_blocks < 1) fail("res_blocks must be >= 1");
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) fail("attention level " + std::to_string(l) + " outside the encoder");
    if (width(l) % head_width != 0) fail("attention width not divisible by head width");
  }
  if (time_width < 2 || time_width % 2 != 0) fail("time width must be even");
  if (code_width < 1 || embed_width < 1 || head_width < 1) fail("embedding widths must be positive");
  const int factor = 1 << (levels() - 1);
  if (image_size < factor || image_size % factor != 0)
    fail("image size " + std::to_string(image_size) + " not divisible by " + std::to_string(factor));
}

std::vector<double> time_embedding(double t, int width) {
  if (width < 2 || width % 2 != 0) throw std::invalid_argument("time embedding width must be even");
  if (t < 0.0) throw std::invalid_argument("time embedding needs t >= 0");
  const int half = width / 2;
  std::vector<double> out(static_cast<std::size_t>(width));
  for (int i = 0; i < half; ++i) {
    const double omega = std::pow(10000.0, -2.0 * i / width);
    out[i] = std::sin(t * omega);
    out[half + i] = std::cos(t * omega);
  }
  return out;
}

namespace {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(std::vector<ParamSpec>& out, int embed) : out_(out), embed_(embed) {}

  void conv(const std::string& p, std::int64_t co, std::int64_t ci, std::int64_t k, bool zero = false) {
    out_.push_back({p + ".weight", {co, ci, k, k}, ci * k * k, zero ? ParamSpec::Init::zeros : ParamSpec::Init::normal});
    out_.push_back({p + ".bias", {co}, 0, ParamSpec::Init::zeros});
  }
  void linear(const std::string& p, std::int64_t out, std::int64_t in) {
    out_.push_back({p + ".weight", {out, in}, in, ParamSpec::Init::normal});
    out_.push_back({p + ".bias", {out}, 0, ParamSpec::Init::zeros});
  }
  void norm(const std::string& p, std::int64_t c) {
    out_.push_back({p + ".gamma", {c}, 0, ParamSpec::Init::ones});
    out_.push_back({p + ".beta", {c}, 0, ParamSpec::Init::zeros});
  }
  void res(const std::string& p, std::int64_t ci, std::int64_t co) {
    norm(p + ".norm1", ci);
    conv(p + ".conv1", co, ci, 3);
    linear(p + ".emb", 2 * co, embed_);
    norm(p + ".norm2", co);
    conv(p + ".conv2", co, co, 3);
    if (ci != co) conv(p + ".skip", co, ci, 1);
  }
  void attn(const std::string& p, std::int64_t c) {
    norm(p + ".norm", c);
    conv(p + ".qkv", 3 * c, c, 1);
    conv(p + ".proj", c, c, 1);
  }
  void table(const std::string& name, std::int64_t rows, std::int64_t width) {
    out_.push_back({name, {rows, width}, 0, ParamSpec::Init::embedding});
  }

 private:
  std::vector<ParamSpec>& out_;
  int embed_;
};

std::vector<ParamSpec> build_layout(const UNetConfig& c) {
  std::vector<ParamSpec> specs;
  LayoutBuilder b(specs, c.embed_width);
  for (int i = 0; i < kRoiChannels; ++i) b.table("embed.code" + std::to_string(i), 4, c.code_width);
  b.linear("embed.proj0", c.embed_width, c.time_width + kRoiChannels * c.code_width);
  b.linear("embed.proj1", c.embed_width, c.embed_width);
  b.conv("input.conv", c.width(0), c.in_channels, 3);
  std::int64_t ch = c.width(0);
  for (int l = 0; l < c.levels(); ++l) {
    const std::string p = "down." + std::to_string(l);
    for (int j = 0; j < c.res_blocks; ++j) {
      b.res(p + ".res" + std::to_string(j), ch, c.width(l));
      ch = c.width(l);
      if (c.attention_levels.contains(l)) b.attn(p + ".attn" + std::to_string(j), ch);
    }
    if (l + 1 < c.levels()) b.conv(p + ".downsample", ch, ch, 3);
  }
  b.res("middle.res0", ch, ch);
  b.attn("middle.attn", ch);
  b.res("middle.res1", ch, ch);
  for (int l = c.levels() - 1; l >= 0; --l) {
    const std::string p = "up." + std::to_string(l);
    for (int j = 0; j < c.res_blocks; ++j) {
      b.res(p + ".res" + std::to_string(j), ch + c.width(l), c.width(l));
      ch = c.width(l);
      if (c.attention_levels.contains(l)) b.attn(p + ".attn" + std::to_string(j), ch);
    }
    if (l > 0) {
      b.conv(p + ".upsample.conv", c.width(l - 1), ch, 3);
      ch = c.width(l - 1);
    }
  }
  b.norm("output.norm", ch);
  b.conv("output.conv", c.out_channels, ch, 3, true);
  return specs;
}

template <typename T>
class Net {
 public:
  Net(Graph<T>& g, const ParamMap<T>& params, const UNetConfig& c) : g_(g), params_(params), c_(c) {}

  Var p(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("missing denoiser parameter '" + name + "'");
    return g_.parameter(name, it->second);
  }
  Var conv(const std::string& name, Var x, int stride, int padding) {
    return g_.conv2d(x, p(name + ".weight"), p(name + ".bias"), stride, padding);
  }
  Var linear(const std::string& name, Var x) { return g_.linear(x, p(name + ".weight"), p(name + ".bias")); }
  Var norm(const std::string& name, Var x) {
    return g_.group_norm(x, p(name + ".gamma"), p(name + ".beta"), norm_groups(g_.shape(x)[1]));
  }

  Var res(const std::string& name, Var x, Var emb_act) {
    Var h = conv(name + ".conv1", g_.silu(norm(name + ".norm1", x)), 1, 1);
    h = g_.modulate(norm(name + ".norm2", h), linear(name + ".emb", emb_act));
    h = conv(name + ".conv2", g_.silu(h), 1, 1);
    const std::int64_t co = g_.shape(h)[1];
    Var skip = g_.shape(x)[1] == co ? x : conv(name + ".skip", x, 1, 0);
    return g_.add(skip, h);
  }

  Var attn(const std::string& name, Var x) {
    const int heads = static_cast<int>(g_.shape(x)[1] / c_.head_width);
    Var qkv = conv(name + ".qkv", norm(name + ".norm", x), 1, 0);
    return g_.add(x, conv(name + ".proj", g_.attention(qkv, heads), 1, 0));
  }

 private:
  Graph<T>& g_;
  const ParamMap<T>& params_;
  const UNetConfig& c_;
};

}  // namespace

Denoiser::Denoiser(UNetConfig config) : config_(std::move(config)) {
  config_.validate();
  layout_ = build_layout(config_);
}

std::int64_t Denoiser::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& s : layout_) n += shape_numel(s.shape);
  return n;
}

ParamMap<float> Denoiser::init_params(std::uint64_t seed) const {
  ParamMap<float> params;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& s = layout_[i];
    Rng rng(mix_seed(seed, i));
    Tensor<float> t(s.shape);
    switch (s.init) {
      case ParamSpec::Init::zeros: break;
      case ParamSpec::Init::ones: t.fill(1.0f); break;
      case ParamSpec::Init::embedding:
        for (auto& v : t.values()) v = static_cast<float>(rng.normal());
        break;
      case ParamSpec::Init::normal: {
        const double std = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        for (auto& v : t.values()) v = static_cast<float>(std * rng.normal());
        break;
      }
    }
    params.emplace(s.name, std::move(t));
  }
  return params;
}

template <typename T>
void Denoiser::check_params(const ParamMap<T>& params) const {
  if (params.size() != layout_.size())
    throw std::invalid_argument("parameter set has " + std::to_string(params.size()) + " tensors, expected " +
                                std::to_string(layout_.size()));
  for (const auto& s : layout_) {
    auto it = params.find(s.name);
    if (it == params.end()) throw std::invalid_argument("missing parameter '" + s.name + "'");
    if (it->second.shape() != s.shape)
      throw ShapeError("parameter '" + s.name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                       shape_string(s.shape));
  }
}

template <typename T>
Var Denoiser::forward(Graph<T>& g, const ParamMap<T>& params, Var x, const std::vector<int>& timesteps,
                      const std::vector<ConditioningVector>& cvs) const {
  const UNetConfig& c = config_;
  const auto& xs = g.shape(x);
  if (xs.size() != 4 || xs[1] != c.in_channels || xs[2] != xs[3] || xs[2] % (1 << (c.levels() - 1)) != 0)
    throw ShapeError("denoiser input " + shape_string(xs) + " is not [B,6,S,S] with S divisible by the depth");
  const std::int64_t batch = xs[0];
  if (static_cast<std::int64_t>(timesteps.size()) != batch || static_cast<std::int64_t>(cvs.size()) != batch)
    throw ShapeError("denoiser: timesteps/conditioning count does not match batch " + std::to_string(batch));

  Net<T> net(g, params, c);

  Tensor<T> temb({batch, c.time_width});
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto e = time_embedding(timesteps[b], c.time_width);
    std::copy(e.begin(), e.end(), temb.data() + b * c.time_width);
  }
  std::vector<Var> parts{g.constant(std::move(temb))};
  for (int i = 0; i < kRoiChannels; ++i) {
    std::vector<int> codes(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) {
      cvs[b].validate();
      codes[b] = cvs[b].codes[i];
    }
    parts.push_back(g.embedding(net.p("embed.code" + std::to_string(i)), codes));
  }
  Var emb = net.linear("embed.proj0", g.concat_features(parts));
  emb = net.linear("embed.proj1", g.silu(emb));
  const Var emb_act = g.silu(emb);

  Var h = net.conv("input.conv", x, 1, 1);
  std::vector<Var> skips;
  for (int l = 0; l < c.levels(); ++l) {
    const std::string p = "down." + std::to_string(l);
    for (int j = 0; j < c.res_blocks; ++j) {
      h = net.res(p + ".res" + std::to_string(j), h, emb_act);
      if (c.attention_levels.contains(l)) h = net.attn(p + ".attn" + std::to_string(j), h);
      skips.push_back(h);
    }
    if (l + 1 < c.levels()) h = net.conv(p + ".downsample", h, 2, 1);
  }
  h = net.res("middle.res0", h, emb_act);
  h = net.attn("middle.attn", h);
  h = net.res("middle.res1", h, emb_act);
  for (int l = c.levels() - 1; l >= 0; --l) {
    const std::string p = "up." + std::to_string(l);
    for (int j = 0; j < c.res_blocks; ++j) {
      h = g.concat_channels(h, skips.back());
      skips.pop_back();
      h = net.res(p + ".res" + std::to_string(j), h, emb_act);
      if (c.attention_levels.contains(l)) h = net.attn(p + ".attn" + std::to_string(j), h);
    }
    if (l > 0) h = net.conv(p + ".upsample.conv", g.upsample_nearest2x(h), 1, 1);
  }
  h = g.silu(net.norm("output.norm", h));
  return net.conv("output.conv", h, 1, 1);
}

Tensor<float> Denoiser::predict(const ParamMap<float>& params, const Tensor<float>& x, const std::vector<int>& timesteps,
                                const std::vector<ConditioningVector>& cvs) const {
  Graph<float> g(false);
  Var xv = g.constant(x);
  return g.value(forward(g, params, xv, timesteps, cvs));
}

Tensor<float> stack_inputs(const std::vector<Tensor<float>>& inputs) {
  if (inputs.empty()) throw ShapeError("stack_inputs: empty batch");
  const Shape& s = inputs[0].shape();
  Shape out_shape{static_cast<std::int64_t>(inputs.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor<float> out(out_shape);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != s) throw ShapeError("stack_inputs: samples differ in shape");
    std::copy(inputs[i].data(), inputs[i].data() + inputs[i].size(), out.data() + i * inputs[i].size());
  }
  return out;
}

template void Denoiser::check_params(const ParamMap<float>&) const;
template void Denoiser::check_params(const ParamMap<double>&) const;
template Var Denoiser::forward(Graph<float>&, const ParamMap<float>&, Var, const std::vector<int>&,
                               const std::vector<ConditioningVector>&) const;
template Var Denoiser::forward(Graph<double>&, const ParamMap<double>&, Var, const std::vector<int>&,
                               const std::vector<ConditioningVector>&) const;

}  // namespace dinp
