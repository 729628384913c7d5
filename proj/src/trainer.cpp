#include "dinp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace dinp {

using json = nlohmann::json;

namespace {

SliceImage flip(const SliceImage& img, bool vertical) {
  SliceImage out(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      out.at(r, c) = vertical ? img.at(img.height - 1 - r, c) : img.at(r, img.width - 1 - c);
  return out;
}

LabelMask flip(const LabelMask& l, bool vertical) {
  LabelMask out(l.height, l.width);
  for (int r = 0; r < l.height; ++r)
    for (int c = 0; c < l.width; ++c)
      out.at(r, c) = vertical ? l.at(l.height - 1 - r, c) : l.at(r, l.width - 1 - c);
  return out;
}

std::pair<SliceImage, LabelMask> rotate(const SliceImage& img, const LabelMask& label, double degrees) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  SliceImage out(img.height, img.width);
  LabelMask lab(label.height, label.width);
  auto sample = [&](int r, int c) -> double {
    return (r < 0 || r >= img.height || c < 0 || c >= img.width) ? 0.0 : img.at(r, c);
  };
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      // Inverse mapping: where does this output pixel come from?
      const double dy = r - cy, dx = c - cx;
      const double sy = cs * dy - sn * dx + cy;
      const double sx = sn * dy + cs * dx + cx;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                       fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
      out.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      const int ny = static_cast<int>(std::lround(sy)), nx = static_cast<int>(std::lround(sx));
      if (ny >= 0 && ny < label.height && nx >= 0 && nx < label.width) lab.at(r, c) = label.at(ny, nx);
    }
  return {std::move(out), std::move(lab)};
}

}  // namespace

std::pair<SliceImage, LabelMask> augment(const SliceImage& image, const LabelMask& label, const AugmentOptions& options,
                                         Rng& rng) {
  if (image.height != label.height || image.width != label.width)
    throw std::invalid_argument("augment: image and label differ in size");
  SliceImage img = image;
  LabelMask lab = label;
  if (options.flips) {
    if (rng.bernoulli(0.5)) {
      img = flip(img, true);
      lab = flip(lab, true);
    }
    if (rng.bernoulli(0.5)) {
      img = flip(img, false);
      lab = flip(lab, false);
    }
  }
  if (options.rotations && options.max_rotation_deg > 0.0) {
    const double angle = rng.uniform(-options.max_rotation_deg, options.max_rotation_deg);
    std::tie(img, lab) = rotate(img, lab, angle);
  }
  return {std::move(img), std::move(lab)};
}

Batch collate(const std::vector<TrainingSample>& samples, const std::vector<std::string>& sources) {
  if (samples.empty()) throw std::invalid_argument("cannot collate an empty batch");
  const std::int64_t b = static_cast<std::int64_t>(samples.size());
  const std::int64_t s = samples[0].clean.dim(0);
  Batch out;
  out.input = Tensor<float>({b, 6, s, s});
  out.noise = Tensor<float>({b, 1, s, s});
  out.mask = Tensor<float>({b, 1, s, s});
  const std::size_t plane = static_cast<std::size_t>(s * s);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& smp = samples[i];
    if (smp.clean.shape() != Shape{s, s}) throw ShapeError("collate: samples differ in size");
    const Tensor<float> x = model_input(smp.composite, smp.roi);
    std::copy(x.data(), x.data() + x.size(), out.input.data() + i * 6 * plane);
    std::copy(smp.noise.data(), smp.noise.data() + plane, out.noise.data() + i * plane);
    std::copy(smp.union_mask.data(), smp.union_mask.data() + plane, out.mask.data() + i * plane);
    out.timesteps.push_back(smp.t);
    out.cvs.push_back(smp.cv);
    out.sources.push_back(i < static_cast<std::int64_t>(sources.size()) ? sources[i] : "sample " + std::to_string(i));
  }
  return out;
}

double batch_loss(const Denoiser& net, const ParamMap<float>& params, const Batch& batch) {
  Graph<float> g(false);
  Var out = net.forward(g, params, g.constant(batch.input), batch.timesteps, batch.cvs);
  Var loss = g.masked_mse(out, g.constant(batch.noise), g.constant(batch.mask));
  return g.value(loss)[0];
}

AdamState make_adam_state(const ParamMap<float>& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace(name, Tensor<float>(t.shape()));
    s.v.emplace(name, Tensor<float>(t.shape()));
  }
  return s;
}

void adam_update(ParamMap<float>& params, const ParamMap<float>& grads, AdamState& state, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state.steps;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.steps));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    if (g.shape() != p.shape()) throw ShapeError("adam: gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      const double step = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      p[i] = static_cast<float>(p[i] - step);
    }
  }
}

double clip_global_norm(ParamMap<float>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.values()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (auto& v : g.values()) v *= s;
  }
  return norm;
}

void ema_update(ParamMap<float>& ema, const ParamMap<float>& live, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("EMA decay must lie in [0,1]");
  if (ema.size() != live.size()) throw std::invalid_argument("EMA and live parameter sets differ");
  for (auto& [name, e] : ema) {
    auto it = live.find(name);
    if (it == live.end()) throw std::invalid_argument("EMA parameter '" + name + "' has no live counterpart");
    const auto& l = it->second;
    if (l.shape() != e.shape()) throw ShapeError("EMA shape mismatch for " + name);
    if (decay == 0.0) {
      e = l;
      continue;
    }
    const float k = static_cast<float>(1.0 - decay);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += k * (l[i] - e[i]);
  }
}

json to_json(const MetricRecord& r) {
  return {{"step", r.step},
          {"train_loss", r.train_loss},
          {"val_mse", r.val_mse ? json(*r.val_mse) : json(nullptr)},
          {"lr", r.lr}};
}

TrainState make_train_state(const Denoiser& net, std::uint64_t seed) {
  TrainState s;
  s.live = net.init_params(mix_seed(seed, 1));
  s.ema = s.live;
  s.adam = make_adam_state(s.live);
  s.rng = Rng(mix_seed(seed, 2));
  return s;
}

double train_step(TrainState& state, const Denoiser& net, const Batch& batch, const TrainConfig& config) {
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch");
  auto diagnose = [&](const std::string& why) -> TrainingError {
    std::string bad;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Batch one;
      const std::int64_t s = batch.input.dim(2);
      const std::size_t plane = static_cast<std::size_t>(s * s);
      one.input = Tensor<float>({1, 6, s, s}, std::vector<float>(batch.input.data() + i * 6 * plane,
                                                                  batch.input.data() + (i + 1) * 6 * plane));
      one.noise = Tensor<float>({1, 1, s, s}, std::vector<float>(batch.noise.data() + i * plane,
                                                                  batch.noise.data() + (i + 1) * plane));
      one.mask = Tensor<float>({1, 1, s, s}, std::vector<float>(batch.mask.data() + i * plane,
                                                                 batch.mask.data() + (i + 1) * plane));
      one.timesteps = {batch.timesteps[i]};
      one.cvs = {batch.cvs[i]};
      bool finite = true;
      try {
        finite = std::isfinite(batch_loss(net, state.live, one));
      } catch (const NonFiniteError&) {
        finite = false;
      }
      if (!finite) bad += (bad.empty() ? "" : ", ") + batch.sources[i] + " (t=" + std::to_string(batch.timesteps[i]) + ")";
    }
    return TrainingError("non-finite loss at step " + std::to_string(state.step + 1) + ": " + why +
                         "; offending samples: " + (bad.empty() ? "none isolated" : bad));
  };

  Graph<float> g;
  double loss_value = 0.0;
  ParamMap<float> grads;
  try {
    Var out = net.forward(g, state.live, g.constant(batch.input), batch.timesteps, batch.cvs);
    Var loss = g.masked_mse(out, g.constant(batch.noise), g.constant(batch.mask));
    loss_value = g.value(loss)[0];
    if (!std::isfinite(loss_value)) throw diagnose("loss is " + std::to_string(loss_value));
    g.backward(loss);
    grads = g.parameter_gradients();
  } catch (const NonFiniteError& e) {
    throw diagnose(e.what());
  }
  clip_global_norm(grads, config.grad_clip);
  adam_update(state.live, grads, state.adam, config.learning_rate);
  ema_update(state.ema, state.live, config.ema_decay);
  ++state.step;
  return loss_value;
}

std::vector<TrainingSample> make_validation_set(const SliceDataset& data, const std::vector<std::size_t>& records,
                                                const NoiseSchedule& schedule, const ScenarioPolicy& policy,
                                                int count, std::uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("validation split is empty");
  std::vector<std::size_t> order = records;
  Rng shuffle_rng(mix_seed(seed, 0x76616c));
  std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
  std::vector<TrainingSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::size_t k = 0; out.size() < static_cast<std::size_t>(count); ++k) {
    if (k >= order.size() * 4) throw std::runtime_error("could not assemble the validation set");
    const std::size_t rec = order[k % order.size()];
    Rng rng(mix_seed(seed, 0x1000000 + k));
    try {
      out.push_back(make_training_sample(data.image(rec), data.label(rec), schedule, policy, rng));
    } catch (const RoiError&) {
    }
  }
  return out;
}

double validation_mse(const Denoiser& net, const ParamMap<float>& params, const std::vector<TrainingSample>& samples,
                      int chunk) {
  if (samples.empty()) throw std::invalid_argument("validation set is empty");
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(samples.size(), i + static_cast<std::size_t>(chunk));
    std::vector<TrainingSample> part(samples.begin() + static_cast<std::ptrdiff_t>(i),
                                     samples.begin() + static_cast<std::ptrdiff_t>(end));
    total += batch_loss(net, params, collate(part)) * static_cast<double>(end - i);
  }
  return total / static_cast<double>(samples.size());
}

Checkpoint to_checkpoint(const TrainState& state, const RunConfig& config) {
  Checkpoint c;
  c.config = to_json(config);
  c.step = state.step;
  c.live = state.live;
  c.ema = state.ema;
  c.adam_m = state.adam.m;
  c.adam_v = state.adam.v;
  c.rng_state = state.rng.state();
  for (const auto& r : state.history) c.metrics.push_back(to_json(r));
  return c;
}

std::string checkpoint_filename(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%06lld.ckpt", static_cast<long long>(step));
  return buf;
}

namespace {

// Draws training samples in epoch order from the oversampled index.
class SampleStream {
 public:
  SampleStream(const SliceDataset& data, std::vector<std::size_t> index, const NoiseSchedule& schedule,
               const TrainConfig& config)
      : data_(data), index_(std::move(index)), schedule_(schedule), config_(config) {}

  TrainingSample next(Rng& order_rng, std::string& source) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      if (pos_ == 0) std::shuffle(index_.begin(), index_.end(), order_rng.engine());
      const std::size_t rec = index_[pos_];
      pos_ = (pos_ + 1) % index_.size();
      Rng rng(mix_seed(config_.seed, 0x2000000 + drawn_++));
      const auto [img, lab] = augment(data_.image(rec), data_.label(rec), config_.augment, rng);
      try {
        TrainingSample s = make_training_sample(img, lab, schedule_, config_.policy, rng);
        const auto& r = data_.records[rec];
        source = r.study_id + "/" + std::to_string(r.slice_index) + "/" + to_string(r.sequence);
        return s;
      } catch (const RoiError&) {
      }
    }
    throw TrainingError("could not draw a valid training sample in 64 attempts");
  }

 private:
  const SliceDataset& data_;
  std::vector<std::size_t> index_;
  const NoiseSchedule& schedule_;
  const TrainConfig& config_;
  std::size_t pos_ = 0;
  std::uint64_t drawn_ = 0;
};

}  // namespace

FitResult fit(const RunConfig& config, const SliceDataset& data, const SplitAssignment& splits,
              const FitOptions& options) {
  config.validate();
  const TrainConfig& tc = config.train;
  const auto train_records = splits.records_in(Split::train, data.records);
  const auto val_records = splits.records_in(Split::validation, data.records);
  if (train_records.empty()) throw TrainingError("dataset has no training records");
  if (val_records.empty()) throw TrainingError("dataset has no validation records");

  const Denoiser net(config.unet);
  const NoiseSchedule schedule = make_schedule(config.diffusion.schedule, config.diffusion.steps);
  const auto val_set = make_validation_set(data, val_records, schedule, tc.policy, tc.validation_samples, tc.seed);
  SampleStream stream(data, oversample_tumor_slices(data.records, train_records, tc.oversample_factor), schedule, tc);

  FitResult result;
  result.state = make_train_state(net, tc.seed);
  TrainState& st = result.state;

  std::filesystem::create_directories(options.out_dir);
  std::ofstream metrics(options.out_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw TrainingError("cannot write " + (options.out_dir / "metrics.jsonl").string());

  auto next_batch = [&] {
    std::vector<TrainingSample> samples;
    std::vector<std::string> sources(static_cast<std::size_t>(tc.batch_size));
    for (int i = 0; i < tc.batch_size; ++i) samples.push_back(stream.next(st.rng, sources[i]));
    return collate(samples, sources);
  };
  auto record = [&](MetricRecord r) {
    st.history.push_back(r);
    metrics << to_json(r).dump() << '\n';
    metrics.flush();
    if (options.on_step) options.on_step(r);
  };
  auto checkpoint = [&] {
    const auto path = options.out_dir / checkpoint_filename(st.step);
    save_checkpoint(path, to_checkpoint(st, config));
    result.checkpoints.push_back(path);
  };

  Batch batch = next_batch();
  record({0, batch_loss(net, st.live, batch), validation_mse(net, st.ema, val_set), tc.learning_rate});
  checkpoint();
  for (int s = 1; s <= tc.total_steps; ++s) {
    if (s > 1) batch = next_batch();
    MetricRecord r;
    r.train_loss = train_step(st, net, batch, tc);
    r.step = st.step;
    r.lr = tc.learning_rate;
    if (s % tc.validate_every == 0 || s == tc.total_steps) r.val_mse = validation_mse(net, st.ema, val_set);
    record(r);
    if (s % tc.checkpoint_every == 0 || s == tc.total_steps) checkpoint();
  }
  return result;
}

}  // namespace dinp
