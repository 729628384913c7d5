#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "dinp/trainer.hpp"

using namespace dinp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dinp-trainer-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_run() {
  RunConfig rc;
  rc.phantom.image_size = 32;
  rc.phantom.studies = 12;
  rc.phantom.slices_per_study = 3;
  rc.diffusion.steps = 50;
  rc.unet.image_size = 32;
  rc.unet.base_width = 8;
  rc.unet.multipliers = {1, 2};
  rc.unet.attention_levels = {1};
  rc.unet.head_width = 8;
  rc.unet.time_width = 16;
  rc.unet.code_width = 4;
  rc.unet.embed_width = 16;
  rc.train.batch_size = 4;
  rc.train.total_steps = 4;
  rc.train.validate_every = 2;
  rc.train.checkpoint_every = 2;
  rc.train.validation_samples = 8;
  rc.train.learning_rate = 1e-3;
  return rc;
}

Batch fixed_batch(const RunConfig& rc, int n, std::uint64_t seed) {
  PhantomSpec spec = rc.phantom;
  spec.tumor_probability = 1.0;
  const auto sched = make_schedule(rc.diffusion.schedule, rc.diffusion.steps);
  ScenarioPolicy policy;
  policy.dropout = 0.0;
  Rng rng(seed);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < n; ++i) {
    const auto p = generate_phantom(spec, seed * 100 + static_cast<std::uint64_t>(i));
    samples.push_back(make_training_sample(p.images[i % 4], p.label, sched, policy, rng));
  }
  return collate(samples);
}

ParamMap<float> filled(const ParamMap<float>& like, float v) {
  ParamMap<float> out;
  for (const auto& [name, t] : like) out.emplace(name, Tensor<float>(t.shape(), v));
  return out;
}

}  // namespace

TEST_CASE("augmentation disabled is the identity") {
  PhantomSpec spec;
  spec.tumor_probability = 1.0;
  const auto p = generate_phantom(spec, 1);
  AugmentOptions off{false, false, 15.0};
  Rng rng(0);
  const auto [img, lab] = augment(p.images[0], p.label, off, rng);
  CHECK(img == p.images[0]);
  CHECK(lab == p.label);
  AugmentOptions zero_angle{false, true, 0.0};
  const auto [img2, lab2] = augment(p.images[0], p.label, zero_angle, rng);
  CHECK(img2 == p.images[0]);
}

TEST_CASE("augmentation keeps image and label aligned and labels valid") {
  PhantomSpec spec;
  spec.tumor_probability = 1.0;
  Rng rng(3);
  int flips_seen = 0;
  for (int k = 0; k < 1000; ++k) {
    const auto p = generate_phantom(spec, static_cast<std::uint64_t>(k % 50));
    const auto [img, lab] = augment(p.images[2], p.label, {}, rng);
    REQUIRE(img.height == p.images[2].height);
    for (auto v : lab.values) CHECK(LabelMask::valid_value(v));
    flips_seen += !(lab == p.label);
  }
  CHECK(flips_seen > 900);

  // A pure flip moves the label and the image identically.
  PhantomSpec sp;
  sp.tumor_probability = 1.0;
  const auto p = generate_phantom(sp, 7);
  AugmentOptions flips_only{true, false, 0.0};
  for (int k = 0; k < 20; ++k) {
    const auto [img, lab] = augment(p.images[0], p.label, flips_only, rng);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        bool found = false;
        for (int rr : {r, img.height - 1 - r})
          for (int cc : {c, img.width - 1 - c})
            if (img.at(r, c) == p.images[0].at(rr, cc) && lab.at(r, c) == p.label.at(rr, cc)) found = true;
        CHECK(found);
      }
  }
}

TEST_CASE("flipping twice restores the original") {
  PhantomSpec spec;
  const auto p = generate_phantom(spec, 2);
  AugmentOptions flips_only{true, false, 0.0};
  // Two independent draws produce the same flip pattern half of the time;
  // compose until one lands back on the identity.
  Rng rng(5);
  int identities = 0;
  for (int k = 0; k < 50; ++k) {
    Rng a(static_cast<std::uint64_t>(k));
    const auto once = augment(p.images[0], p.label, flips_only, a);
    Rng b(static_cast<std::uint64_t>(k));
    const auto twice = augment(once.first, once.second, flips_only, b);
    CHECK(twice.first == p.images[0]);
    CHECK(twice.second == p.label);
    identities += once.first == p.images[0];
  }
  CHECK(identities < 50);
}

TEST_CASE("ema update arithmetic") {
  ParamMap<float> ema{{"w", Tensor<float>({2}, 2.0f)}}, live{{"w", Tensor<float>({2}, 4.0f)}};
  auto e = ema;
  ema_update(e, live, 0.5);
  CHECK(e.at("w")[0] == 3.0f);
  e = ema;
  ema_update(e, live, 0.0);
  CHECK(e == live);
  e = ema;
  ema_update(e, live, 1.0);
  CHECK(e == ema);
  ParamMap<float> other{{"v", Tensor<float>({2}, 4.0f)}};
  CHECK_THROWS(ema_update(e, other, 0.5));
  ParamMap<float> shape{{"w", Tensor<float>({3}, 4.0f)}};
  CHECK_THROWS(ema_update(e, shape, 0.5));
}

TEST_CASE("gradient clipping") {
  ParamMap<float> g{{"a", Tensor<float>({2}, std::vector<float>{3, 4})}};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.at("a")[0] == doctest::Approx(0.6));
  CHECK(g.at("a")[1] == doctest::Approx(0.8));
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g.at("a")[1] == doctest::Approx(0.8));
}

TEST_CASE("adam first step moves each parameter by the learning rate") {
  ParamMap<float> p{{"a", Tensor<float>({3}, std::vector<float>{1, 1, 1})}};
  ParamMap<float> g{{"a", Tensor<float>({3}, std::vector<float>{0.5f, -2.0f, 1e-3f})}};
  auto st = make_adam_state(p);
  adam_update(p, g, st, 0.1);
  CHECK(p.at("a")[0] == doctest::Approx(0.9).epsilon(1e-5));
  CHECK(p.at("a")[1] == doctest::Approx(1.1).epsilon(1e-5));
  CHECK(p.at("a")[2] == doctest::Approx(0.9).epsilon(1e-4));
  CHECK(st.steps == 1);
}

TEST_CASE("initial loss with the silent head is about one") {
  RunConfig rc = tiny_run();
  const Denoiser net(rc.unet);
  const auto st = make_train_state(net, 0);
  double total = 0;
  for (std::uint64_t s = 0; s < 8; ++s) total += batch_loss(net, st.live, fixed_batch(rc, 4, s));
  CHECK(std::abs(total / 8 - 1.0) <= 0.1);
}

TEST_CASE("loss ignores predictions outside the union mask") {
  RunConfig rc = tiny_run();
  const Batch b = fixed_batch(rc, 2, 9);
  Rng rng(1);
  Tensor<float> pred(b.noise.shape());
  for (auto& v : pred.values()) v = static_cast<float>(rng.normal());
  Tensor<float> zeroed = pred;
  for (std::size_t i = 0; i < zeroed.size(); ++i)
    if (b.mask[i] == 0.0f) zeroed[i] = 0.0f;
  Graph<float> g;
  Var a = g.parameter("p", pred);
  Var la = g.masked_mse(a, g.constant(b.noise), g.constant(b.mask));
  Graph<float> h;
  Var lb = h.masked_mse(h.constant(zeroed), h.constant(b.noise), h.constant(b.mask));
  CHECK(g.value(la)[0] == h.value(lb)[0]);
  g.backward(la);
  const auto grad = g.grad(a);
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (b.mask[i] == 0.0f) CHECK(grad[i] == 0.0f);
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
  RunConfig rc = tiny_run();
  const Denoiser net(rc.unet);
  auto st = make_train_state(net, 1);
  // Give the head weights so the loss depends on every parameter.
  Rng rng(2);
  for (auto& v : st.live.at("output.conv.weight").values()) v = static_cast<float>(0.05 * rng.normal());
  st.ema = st.live;
  const auto before = st.live;
  const Batch b = fixed_batch(rc, 4, 3);
  TrainConfig tc = rc.train;
  tc.learning_rate = 0.0;
  const double l0 = train_step(st, net, b, tc);
  const double l1 = train_step(st, net, b, tc);
  CHECK(st.live == before);
  CHECK(l0 == l1);
  CHECK(st.step == 2);
}

TEST_CASE("a single fixed batch overfits within 200 steps") {
  RunConfig rc = tiny_run();
  const Denoiser net(rc.unet);
  auto st = make_train_state(net, 4);
  const Batch b = fixed_batch(rc, 4, 11);
  TrainConfig tc = rc.train;
  tc.learning_rate = 1e-3;
  const double first = batch_loss(net, st.live, b);
  for (int i = 0; i < 200; ++i) train_step(st, net, b, tc);
  const double last = batch_loss(net, st.live, b);
  MESSAGE("overfit loss " << first << " -> " << last);
  CHECK(last <= 0.2 * first);
}

TEST_CASE("non-finite loss names the offending sample") {
  RunConfig rc = tiny_run();
  const Denoiser net(rc.unet);
  auto st = make_train_state(net, 0);
  Batch b = fixed_batch(rc, 2, 1);
  b.sources = {"good", "bad"};
  const std::size_t plane = 32 * 32;
  b.input[6 * plane + 5] = NAN;
  try {
    train_step(st, net, b, rc.train);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bad") != std::string::npos);
    CHECK(msg.find("good") == std::string::npos);
  }
}

TEST_CASE("checkpoint round-trip, truncation and version checks") {
  TempDir dir("ckpt");
  RunConfig rc = tiny_run();
  const Denoiser net(rc.unet);
  auto st = make_train_state(net, 3);
  train_step(st, net, fixed_batch(rc, 2, 1), rc.train);
  st.history.push_back({1, 0.5, 0.25, 1e-3});
  const Checkpoint ck = to_checkpoint(st, rc);
  const auto bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.live == ck.live);
  CHECK(back.ema == ck.ema);
  CHECK(back.adam_m == ck.adam_m);
  CHECK(back.adam_v == ck.adam_v);
  CHECK(back.step == 1);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.config == ck.config);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(run_config_from_json(back.config).unet == rc.unet);

  const fs::path path = dir.path / checkpoint_filename(1);
  save_checkpoint(path, ck);
  CHECK(load_checkpoint(path).ema == ck.ema);
  CHECK(read_checkpoint_manifest(path).at("step") == 1);

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  CHECK_THROWS_AS(deserialize_checkpoint(cut), CheckpointError);
  CHECK_THROWS_AS(deserialize_checkpoint(std::span<const std::uint8_t>(bytes.data(), 5)), CheckpointError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), CheckpointError);
  auto version = bytes;
  version[8] = 99;
  CHECK_THROWS_AS(deserialize_checkpoint(version), CheckpointError);
  {
    std::ofstream(dir.path / "trunc.ckpt", std::ios::binary).write(reinterpret_cast<const char*>(cut.data()),
                                                                     static_cast<std::streamsize>(cut.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(dir.path / "trunc.ckpt"), CheckpointError);
}

TEST_CASE("crc32 of a known string") {
  const std::string s = "123456789";
  CHECK(crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) ==
        0xCBF43926u);
}

TEST_CASE("fit with zero steps writes only the initial checkpoint") {
  TempDir dir("fit0");
  RunConfig rc = tiny_run();
  rc.train.total_steps = 0;
  const auto ds = generate_corpus(rc.phantom);
  Rng rng(rc.train.seed);
  const auto sp = split_dataset(ds.records, {}, rng);
  const auto res = fit(rc, ds, sp, {dir.path, {}});
  REQUIRE(res.checkpoints.size() == 1);
  CHECK(res.checkpoints[0].filename() == checkpoint_filename(0));
  CHECK(res.state.history.size() == 1);
  CHECK(res.state.history[0].val_mse.has_value());
  CHECK(fs::exists(dir.path / "metrics.jsonl"));
}

TEST_CASE("fit is deterministic, keeps a constant rate and validates with EMA weights") {
  TempDir a("fitA"), b("fitB");
  RunConfig rc = tiny_run();
  const auto ds = generate_corpus(rc.phantom);
  Rng rng(rc.train.seed);
  const auto sp = split_dataset(ds.records, {}, rng);
  std::vector<MetricRecord> seen;
  const auto r1 = fit(rc, ds, sp, {a.path, [&](const MetricRecord& m) { seen.push_back(m); }});
  const auto r2 = fit(rc, ds, sp, {b.path, {}});
  REQUIRE(r1.state.history.size() == 5);
  CHECK(seen.size() == 5);
  for (std::size_t i = 0; i < r1.state.history.size(); ++i) {
    const auto &x = r1.state.history[i], &y = r2.state.history[i];
    CHECK(x.step == static_cast<std::int64_t>(i));
    CHECK(x.train_loss == y.train_loss);
    CHECK(x.val_mse == y.val_mse);
    CHECK(x.lr == rc.train.learning_rate);
  }
  CHECK(r1.state.live == r2.state.live);
  CHECK(r1.checkpoints.size() == 3);
  CHECK(r1.state.history[2].val_mse.has_value());
  CHECK_FALSE(r1.state.history[1].val_mse.has_value());

  // The recorded validation figure is reproduced from the saved EMA weights.
  const Checkpoint last = load_checkpoint(r1.checkpoints.back());
  const Denoiser net(rc.unet);
  const auto sched = make_schedule(rc.diffusion.schedule, rc.diffusion.steps);
  const auto val = make_validation_set(ds, sp.records_in(Split::validation, ds.records), sched, rc.train.policy,
                                       rc.train.validation_samples, rc.train.seed);
  CHECK(std::abs(validation_mse(net, last.ema, val) - *r1.state.history.back().val_mse) <= 1e-6);
  CHECK_FALSE(last.ema == last.live);

  std::ifstream metrics(a.path / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("val_mse"));
    CHECK(j.at("lr") == rc.train.learning_rate);
    ++lines;
  }
  CHECK(lines == 5);
}

TEST_CASE("fit needs training and validation records") {
  TempDir dir("fitempty");
  RunConfig rc = tiny_run();
  const auto ds = generate_corpus(rc.phantom);
  SplitAssignment all_train;
  for (const auto& r : ds.records) all_train.by_study[r.study_id] = Split::train;
  CHECK_THROWS_AS(fit(rc, ds, all_train, {dir.path, {}}), TrainingError);
}

TEST_CASE("dropout fraction over assembled training samples") {
  RunConfig rc = tiny_run();
  PhantomSpec spec = rc.phantom;
  const auto sched = make_schedule(ScheduleKind::cosine, 50);
  const ScenarioPolicy policy;
  Rng rng(21);
  std::vector<PhantomSlice> pool;
  for (std::uint64_t s = 0; s < 20; ++s) pool.push_back(generate_phantom(spec, s));
  int dropped = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto& p = pool[static_cast<std::size_t>(i) % pool.size()];
    dropped += make_training_sample(p.images[0], p.label, sched, policy, rng).cv.is_dropped();
  }
  CHECK(dropped >= 800);
  CHECK(dropped <= 1200);
}
