#include <doctest.h>

#include <cmath>

#include "dinp/diffusion.hpp"

using namespace dinp;

namespace {

Tensor<float> randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<float> t(std::move(s));
  for (auto& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

}  // namespace

TEST_CASE("linear schedule endpoints at T = 1000") {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK_THROWS(s.beta(0));
  CHECK_THROWS(s.beta(1001));
}

TEST_CASE("schedule invariants hold for both kinds and several lengths") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
    for (int T : {2, 10, 200, 1000}) {
      const auto s = make_schedule(kind, T);
      REQUIRE(s.steps() == T);
      for (int t = 1; t <= T; ++t) {
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) == doctest::Approx(s.alpha_bar(t - 1) * (1.0 - s.beta(t))).epsilon(1e-12));
        CHECK(s.posterior_variance(t) >= 0.0);
        CHECK(s.posterior_variance(t) <= s.beta(t));
      }
      CHECK(s.posterior_variance(1) == 0.0);
    }
  CHECK_THROWS(make_schedule(ScheduleKind::linear, 1));
}

TEST_CASE("cosine schedule follows the squared-cosine closed form") {
  const int T = 200;
  const auto s = make_schedule(ScheduleKind::cosine, T);
  auto f = [&](double t) {
    const double c = std::cos((t / T + 0.008) / 1.008 * M_PI / 2);
    return c * c;
  };
  for (int t : {1, 50, 100, 150})
    CHECK(s.alpha_bar(t) == doctest::Approx(f(t) / f(0)).epsilon(1e-9));
}

TEST_CASE("step subsequences") {
  const auto full = make_step_subsequence(10, 10);
  REQUIRE(full.size() == 10);
  for (int k = 0; k < 10; ++k) CHECK(full[k] == std::pair{10 - k, 9 - k});

  const auto one = make_step_subsequence(1000, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == std::pair{1000, 0});

  const auto fifty = make_step_subsequence(1000, 50);
  REQUIRE(fifty.size() == 50);
  CHECK(fifty.front().first == 1000);
  CHECK(fifty.back().second == 0);
  for (const auto& [t, tp] : fifty) CHECK(t - tp == 20);

  CHECK_THROWS(make_step_subsequence(100, 0));
  CHECK_THROWS(make_step_subsequence(100, 101));
}

TEST_CASE("forward diffusion at t = 1 is nearly the clean image") {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(1);
  const auto x0 = randn({8, 8}, rng), e = randn({8, 8}, rng);
  const auto xt = forward_diffuse(x0, 1, e, s);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double want = std::sqrt(0.9999) * x0[i] + std::sqrt(1e-4) * e[i];
    CHECK(xt[i] == doctest::Approx(want).epsilon(1e-5));
  }
  CHECK_THROWS(forward_diffuse(x0, 0, e, s));
  CHECK_THROWS_AS(forward_diffuse(x0, 1, Tensor<float>({4, 4}), s), ShapeError);
}

TEST_CASE("predict_x0 inverts forward diffusion") {
  const auto s = make_schedule(ScheduleKind::cosine, 200);
  Rng rng(2);
  Tensor<float> x0({16});
  for (auto& v : x0.values()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto e = randn({16}, rng);
  for (int t : {1, 20, 100}) {
    const auto back = predict_x0(forward_diffuse(x0, t, e, s), t, e, s, false);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(back[i] - x0[i]) < 1e-4);
  }
}

TEST_CASE("guidance rules") {
  const Tensor<float> c({1}, 2.0f), u({1}, 1.0f);
  CHECK(guide(c, u, 1.0, GuidanceRule::standard)[0] == doctest::Approx(3.0));
  CHECK(guide(c, u, 1.0, GuidanceRule::paper)[0] == doctest::Approx(3.0));
  CHECK(guide(c, u, 0.0, GuidanceRule::standard)[0] == doctest::Approx(2.0));
  CHECK(guide(c, u, 0.0, GuidanceRule::paper)[0] == doctest::Approx(1.0));
  CHECK(guide(c, u, 0.4, GuidanceRule::standard)[0] == doctest::Approx(1.4 * 2 - 0.4));
  CHECK(guide(c, u, 0.4, GuidanceRule::paper)[0] == doctest::Approx(1.4 * 2 - 1));
  CHECK_THROWS(guide(c, u, -0.1, GuidanceRule::standard));
  CHECK(parse_guidance_rule("paper") == GuidanceRule::paper);
  CHECK_THROWS(parse_guidance_rule("cfg"));
}

TEST_CASE("ddpm step at t = 1 returns the posterior mean without noise") {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(3);
  const auto x = randn({10}, rng), e = randn({10}, rng);
  Rng step_rng(9);
  const auto out = ddpm_step(x, 1, e, s, step_rng);
  const double b = 1e-4;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mu = (x[i] - b / std::sqrt(b) * e[i]) / std::sqrt(1 - b);
    CHECK(out[i] == doctest::Approx(mu).epsilon(1e-5));
  }
}

TEST_CASE("ddpm posterior mean through x0 equals the epsilon form") {
  const auto s = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(4);
  const auto x = randn({32}, rng, 0.2), e = randn({32}, rng, 0.2);
  for (int t : {2, 10, 500}) {
    Rng r1(11), r2(11);
    const auto a = ddpm_step(x, t, e, s, r1, false);
    const auto b = ddpm_step(x, t, e, s, r2, true);
    // Small inputs keep x̂0 inside [-1, 1] for these t, so clipping is inert.
    const auto x0 = predict_x0(x, t, e, s, false);
    bool inside = true;
    for (float v : x0.values()) inside = inside && std::abs(v) <= 1.0f;
    if (!inside) continue;
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-4));
  }
}

TEST_CASE("ddim with eta 0 is deterministic and reproduces the x0 path") {
  const auto s = make_schedule(ScheduleKind::cosine, 200);
  Rng rng(5);
  const auto x = randn({16}, rng, 0.5), e = randn({16}, rng, 0.5);
  Rng r1(1), r2(999);
  CHECK(ddim_step(x, 100, 80, e, 0.0, s, r1) == ddim_step(x, 100, 80, e, 0.0, s, r2));
  Rng r3(0);
  const auto last = ddim_step(x, 20, 0, e, 0.0, s, r3, true);
  CHECK(last == predict_x0(x, 20, e, s, true));
  Rng r4(0);
  CHECK_THROWS(ddim_step(x, 20, 20, e, 0.0, s, r4));
}

TEST_CASE("sampler configuration") {
  SamplerConfig d;
  CHECK(d.kind == SamplerKind::ddim);
  CHECK(d.steps == 50);
  CHECK(d.eta == 0.0);
  CHECK(d.weight == 0.4);
  CHECK(d.rule == GuidanceRule::standard);
  CHECK_NOTHROW(d.validate(200));
  const auto p = SamplerConfig::paper_faithful(200);
  CHECK(p.kind == SamplerKind::ddpm);
  CHECK(p.steps == 200);
  CHECK(p.rule == GuidanceRule::paper);
  CHECK_NOTHROW(p.validate(200));
  SamplerConfig bad = p;
  bad.steps = 50;
  CHECK_THROWS(bad.validate(200));
  bad = d;
  bad.steps = 201;
  CHECK_THROWS(bad.validate(200));
  bad = d;
  bad.eta = 1.5;
  CHECK_THROWS(bad.validate(200));
}

TEST_CASE("masked mse") {
  Rng rng(6);
  const auto p = randn({4, 4}, rng), t = randn({4, 4}, rng);
  double full = 0;
  for (std::size_t i = 0; i < p.size(); ++i) full += (p[i] - t[i]) * (p[i] - t[i]);
  full /= 16;
  CHECK(masked_mse(p, t, Tensor<float>({4, 4}, 1.0f)) == doctest::Approx(full).epsilon(1e-6));
  Tensor<float> one({4, 4});
  one[5] = 1;
  CHECK(masked_mse(p, t, one) == doctest::Approx((p[5] - t[5]) * (p[5] - t[5])).epsilon(1e-6));
  CHECK_THROWS(masked_mse(p, t, Tensor<float>({4, 4})));
}
