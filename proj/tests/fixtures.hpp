#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "dinp/checkpoint.hpp"
#include "dinp/phantom.hpp"
#include "dinp/trainer.hpp"

namespace dinp::testing {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("dinp-test-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

inline RunConfig tiny_run(int T) {
  RunConfig rc;
  rc.phantom.image_size = 32;
  rc.diffusion.steps = T;
  rc.unet.image_size = 32;
  rc.unet.base_width = 8;
  rc.unet.multipliers = {1, 2};
  rc.unet.attention_levels = {1};
  rc.unet.head_width = 8;
  rc.unet.time_width = 16;
  rc.unet.code_width = 4;
  rc.unet.embed_width = 16;
  return rc;
}

// Untrained weights with a random head so outputs depend on the inputs.
inline Checkpoint random_checkpoint(const RunConfig& rc, std::uint64_t seed, std::int64_t step = 0) {
  const Denoiser net(rc.unet);
  TrainState st = make_train_state(net, seed);
  Rng rng(seed);
  for (auto& v : st.live.at("output.conv.weight").values()) v = static_cast<float>(0.05 * rng.normal());
  st.ema = st.live;
  st.step = step;
  return to_checkpoint(st, rc);
}

inline PhantomSlice lesion_slice() {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.tumor_probability = 1.0;
  for (std::uint64_t s = 0;; ++s) {
    auto p = generate_phantom(spec, s);
    if (p.label.indicator(LabelMask::kCore).any() && p.label.indicator(LabelMask::kEdema).any() &&
        p.label.indicator(LabelMask::kEnhancement).any())
      return p;
  }
}

}  // namespace dinp::testing
