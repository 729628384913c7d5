#include "dinp/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <sstream>

#include "dinp/autograd.hpp"
#include "dinp/config.hpp"
#include "dinp/diffusion.hpp"
#include "dinp/phantom.hpp"
#include "dinp/roi.hpp"
#include "dinp/trainer.hpp"
#include "dinp/unet.hpp"

namespace dinp {

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace {

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Runs `fn`, which fills detail and returns pass/fail; exceptions fail the check.
void run_check(SuiteReport& report, const std::string& name, const std::function<bool(std::string&)>& fn) {
  Check c;
  c.name = name;
  const auto start = std::chrono::steady_clock::now();
  try {
    c.passed = fn(c.detail);
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("threw: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.checks.push_back(std::move(c));
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// ---- gradients -------------------------------------------------------------

struct LayerCase {
  std::string name;
  ParamMap<double> params;
  GraphBuilder<double> builder;
};

// Projects an output onto a fixed random direction so every element matters.
Var project(Graph<double>& g, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return g.sum(g.mul(out, g.constant(random_tensor(g.shape(out), rng))));
}

std::vector<LayerCase> layer_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LayerCase> cases;
  auto P = [](Graph<double>& g, const ParamMap<double>& p, const char* n) { return g.parameter(n, p.at(n)); };

  cases.push_back({"conv2d 3x3 stride 1",
                   {{"x", random_tensor({2, 3, 6, 6}, rng)},
                    {"w", random_tensor({4, 3, 3, 3}, rng, 0.3)},
                    {"b", random_tensor({4}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.conv2d(P(g, p, "x"), P(g, p, "w"), P(g, p, "b"), 1, 1), 11);
                   }});
  cases.push_back({"conv2d 3x3 stride 2",
                   {{"x", random_tensor({2, 3, 7, 7}, rng)}, {"w", random_tensor({4, 3, 3, 3}, rng, 0.3)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.conv2d(P(g, p, "x"), P(g, p, "w"), std::nullopt, 2, 1), 12);
                   }});
  cases.push_back({"conv2d 1x1",
                   {{"x", random_tensor({2, 5, 4, 4}, rng)},
                    {"w", random_tensor({6, 5, 1, 1}, rng, 0.3)},
                    {"b", random_tensor({6}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.conv2d(P(g, p, "x"), P(g, p, "w"), P(g, p, "b"), 1, 0), 13);
                   }});
  cases.push_back({"linear",
                   {{"x", random_tensor({4, 9}, rng)}, {"w", random_tensor({7, 9}, rng, 0.3)}, {"b", random_tensor({7}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.linear(P(g, p, "x"), P(g, p, "w"), P(g, p, "b")), 14);
                   }});
  cases.push_back({"group_norm",
                   {{"x", random_tensor({2, 6, 4, 4}, rng)}, {"gamma", random_tensor({6}, rng)}, {"beta", random_tensor({6}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.group_norm(P(g, p, "x"), P(g, p, "gamma"), P(g, p, "beta"), 3), 15);
                   }});
  cases.push_back({"silu", {{"x", random_tensor({2, 3, 5, 5}, rng, 2.0)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) { return project(g, g.silu(P(g, p, "x")), 16); }});
  cases.push_back({"upsample_nearest2x", {{"x", random_tensor({2, 3, 5, 5}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.upsample_nearest2x(P(g, p, "x")), 17);
                   }});
  cases.push_back({"attention", {{"qkv", random_tensor({2, 24, 3, 3}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.attention(P(g, p, "qkv"), 2), 18);
                   }});
  cases.push_back({"embedding", {{"table", random_tensor({5, 24}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.embedding(P(g, p, "table"), {0, 3, 3, 1, 4, 2}), 19);
                   }});
  cases.push_back({"modulate",
                   {{"x", random_tensor({2, 4, 3, 3}, rng)}, {"ss", random_tensor({2, 8}, rng, 0.5)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.modulate(P(g, p, "x"), P(g, p, "ss")), 20);
                   }});
  cases.push_back({"add/mul/scale",
                   {{"a", random_tensor({3, 40}, rng)}, {"b", random_tensor({3, 40}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     const Var a = P(g, p, "a"), b = P(g, p, "b");
                     return project(g, g.scale(g.add(g.mul(a, b), a), -1.7), 21);
                   }});
  cases.push_back({"square/sum", {{"a", random_tensor({120}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     Rng r(22);
                     return g.sum(g.mul(g.square(P(g, p, "a")), g.constant(random_tensor({120}, r))));
                   }});
  cases.push_back({"concat_channels",
                   {{"a", random_tensor({2, 2, 4, 4}, rng)}, {"b", random_tensor({2, 3, 4, 4}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.concat_channels(P(g, p, "a"), P(g, p, "b")), 23);
                   }});
  cases.push_back({"concat_features",
                   {{"a", random_tensor({3, 20}, rng)}, {"b", random_tensor({3, 7}, rng)}, {"c", random_tensor({3, 13}, rng)}},
                   [P](Graph<double>& g, const ParamMap<double>& p) {
                     return project(g, g.concat_features({P(g, p, "a"), P(g, p, "b"), P(g, p, "c")}), 24);
                   }});
  {
    Rng mr(25);
    Tensor<double> target = random_tensor({3, 1, 6, 6}, mr);
    Tensor<double> mask({3, 1, 6, 6});
    for (auto& v : mask.values()) v = mr.bernoulli(0.5) ? 1.0 : 0.0;
    for (int b = 0; b < 3; ++b) mask[static_cast<std::size_t>(b) * 36] = 1.0;
    cases.push_back({"masked_mse", {{"pred", random_tensor({3, 1, 6, 6}, rng)}},
                     [P, target, mask](Graph<double>& g, const ParamMap<double>& p) {
                       return g.masked_mse(P(g, p, "pred"), g.constant(target), g.constant(mask));
                     }});
  }
  return cases;
}

// Small denoiser with a randomized head so every parameter carries gradient.
LayerCase denoiser_case(std::uint64_t seed) {
  UNetConfig cfg;
  cfg.base_width = 8;
  cfg.multipliers = {1, 2};
  cfg.attention_levels = {1};
  cfg.time_width = 16;
  cfg.code_width = 4;
  cfg.embed_width = 16;
  cfg.head_width = 8;
  cfg.image_size = 8;
  auto net = std::make_shared<Denoiser>(cfg);
  ParamMap<double> params = cast_params<double>(net->init_params(seed));
  Rng rng(mix_seed(seed, 7));
  for (auto& [name, t] : params)
    if (name.rfind("output.conv", 0) == 0) t = random_tensor(t.shape(), rng, 0.2);
  Tensor<double> x = random_tensor({2, 6, 8, 8}, rng);
  Tensor<double> target = random_tensor({2, 1, 8, 8}, rng);
  Tensor<double> mask({2, 1, 8, 8});
  for (auto& v : mask.values()) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
  mask[0] = mask[64] = 1.0;
  const std::vector<int> ts{3, 150};
  std::vector<ConditioningVector> cvs{ConditioningVector{{1, 2, 3, 2, 1}}, ConditioningVector::dropped()};
  return {"denoiser end-to-end", std::move(params),
          [net, x, target, mask, ts, cvs](Graph<double>& g, const ParamMap<double>& p) {
            const Var y = net->forward(g, p, g.constant(x), ts, cvs);
            return g.masked_mse(y, g.constant(target), g.constant(mask));
          }};
}

bool check_layer(const LayerCase& lc, int probes, double tol, std::uint64_t seed, std::string& detail) {
  std::vector<std::pair<std::string, std::size_t>> sizes;
  std::size_t total = 0;
  for (const auto& [name, t] : lc.params) {
    sizes.emplace_back(name, t.size());
    total += t.size();
  }
  Rng rng(seed);
  std::vector<ParameterProbe> picks;
  for (int i = 0; i < probes; ++i) {
    auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    for (const auto& [name, n] : sizes) {
      if (k < n) {
        picks.push_back({name, k});
        break;
      }
      k -= n;
    }
  }
  const auto analytic = evaluate_with_gradients(lc.builder, lc.params);
  const auto numeric = finite_difference_probes(lc.builder, lc.params, picks, 1e-6);
  double worst = 0.0;
  std::string worst_at;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const double a = analytic.gradients.at(picks[i].name)[picks[i].index];
    const double e = relative_error(a, numeric[i]);
    if (e > worst) {
      worst = e;
      worst_at = picks[i].name + "[" + std::to_string(picks[i].index) + "]";
    }
  }
  detail = std::to_string(picks.size()) + " probes, worst rel err " + fmt(worst) +
           (worst_at.empty() ? "" : " at " + worst_at);
  return worst <= tol;
}

// ---- statistics ------------------------------------------------------------

struct Moments {
  double mean = 0.0;
  double var = 0.0;
  std::size_t n = 0;
};

Moments moments(std::span<const double> v) {
  Moments m;
  m.n = v.size();
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(m.n);
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(m.n - 1);
  return m;
}

// Means within 3 standard errors of the difference and variances within ±5%.
bool same_distribution(const Moments& a, const Moments& b, std::string& detail) {
  const double se = std::sqrt(a.var / a.n + b.var / b.n);
  const double z = se > 0 ? std::abs(a.mean - b.mean) / se : (a.mean == b.mean ? 0.0 : INFINITY);
  const double vr = b.var > 0 ? a.var / b.var : (a.var == 0 ? 1.0 : INFINITY);
  detail = "mean " + fmt(a.mean) + " vs " + fmt(b.mean) + " (" + fmt(z, 3) + " SE), var ratio " + fmt(vr, 5);
  return z <= 3.0 && std::abs(vr - 1.0) <= 0.05;
}

std::vector<double> to_double(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

// ---- pipeline helpers --------------------------------------------------------

// Independent tight-box oracle: a pixel is inside iff some set pixel lies in
// its row band and some in its column band on both sides.
Mask oracle_box(const Mask& m) {
  std::vector<int> row_any(m.height, 0), col_any(m.width, 0);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) row_any[r] = col_any[c] = 1;
  Mask out(m.height, m.width);
  auto between = [](const std::vector<int>& any, int i) {
    bool before = false, after = false;
    for (int k = 0; k <= i; ++k) before |= any[k] != 0;
    for (int k = i; k < static_cast<int>(any.size()); ++k) after |= any[k] != 0;
    return before && after;
  };
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) out.at(r, c) = between(row_any, r) && between(col_any, c) ? 1 : 0;
  return out;
}

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec spec;
  spec.studies = 6;
  spec.slices_per_study = 12;
  spec.seed = seed;
  return spec;
}

}  // namespace

SuiteReport gradient_suite(const VerifyOptions& o) {
  SuiteReport report{"gradients", {}};
  auto cases = layer_cases(o.seed);
  cases.push_back(denoiser_case(o.seed));
  std::uint64_t k = 0;
  for (const auto& lc : cases)
    run_check(report, lc.name, [&](std::string& d) {
      return check_layer(lc, o.gradient_probes, o.gradient_tolerance, mix_seed(o.seed, 100 + k++), d);
    });
  return report;
}

SuiteReport schedule_suite(const VerifyOptions& o) {
  SuiteReport report{"schedules", {}};
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
    for (int T : {10, 200, 1000})
      run_check(report, to_string(kind) + " T=" + std::to_string(T) + " invariants", [&](std::string& d) {
        const auto s = make_schedule(kind, T);
        bool ok = true;
        for (double b : s.betas()) ok &= b > 0.0 && b < 1.0;
        for (int t = 1; t <= T; ++t) ok &= s.alpha_bar(t) < s.alpha_bar(t - 1);
        ok &= s.alpha_bar(T) < 0.01;
        d = "alpha_bar_T = " + fmt(s.alpha_bar(T));
        return ok;
      });

  run_check(report, "linear T=1000 alpha_bar_T vs extended-precision product", [&](std::string& d) {
    const auto s = make_schedule(ScheduleKind::linear, 1000);
    long double prod = 1.0L;
    for (int t = 0; t < 1000; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * t / 999.0L);
    const double err = std::abs(s.alpha_bar(1000) - static_cast<double>(prod)) / static_cast<double>(prod);
    d = "alpha_bar_T = " + fmt(s.alpha_bar(1000), 6) + ", oracle " + fmt(static_cast<double>(prod), 6);
    return err <= 0.01 && std::abs(s.alpha_bar(1000) - 4e-5) / 4e-5 < 0.05;
  });

  const int N = o.monte_carlo_samples;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const int T = 200;
    const auto s = make_schedule(kind, T);
    for (int t : {T / 4, T / 2, T})
      run_check(report, "forward process " + to_string(kind) + " t=" + std::to_string(t), [&](std::string& d) {
        Rng rng(mix_seed(o.seed, 300 + t));
        const float x0v = 0.6f;
        Tensor<float> x0({N}, x0v), noise({N});
        for (auto& v : noise.values()) v = static_cast<float>(rng.normal());
        const auto closed = to_double(forward_diffuse(x0, t, noise, s));
        std::vector<double> iter(static_cast<std::size_t>(N), x0v);
        for (int k = 1; k <= t; ++k) {
          const double a = std::sqrt(s.alpha(k)), b = std::sqrt(s.beta(k));
          for (auto& v : iter) v = a * v + b * rng.normal();
        }
        return same_distribution(moments(closed), moments(iter), d);
      });
  }

  const auto s200 = make_schedule(ScheduleKind::cosine, 200);
  run_check(report, "ddim eta=0 bit-determinism", [&](std::string& d) {
    Rng a(1), b(999), src(mix_seed(o.seed, 400));
    Tensor<float> x({1000}), eps({1000});
    for (auto& v : x.values()) v = static_cast<float>(src.normal());
    for (auto& v : eps.values()) v = static_cast<float>(src.normal());
    const auto y1 = ddim_step(x, 120, 100, eps, 0.0, s200, a);
    const auto y2 = ddim_step(x, 120, 100, eps, 0.0, s200, b);
    d = "two rng streams, identical output";
    return y1 == y2;
  });
  for (int t : {2, 100, 200})
    run_check(report, "ddim eta=1 matches ddpm at t=" + std::to_string(t), [&](std::string& d) {
      Rng r1(mix_seed(o.seed, 500 + t)), r2(mix_seed(o.seed, 600 + t));
      Tensor<float> x({N}, 0.3f), eps({N}, -0.4f);
      const auto a = to_double(ddim_step(x, t, t - 1, eps, 1.0, s200, r1, false));
      const auto b = to_double(ddpm_step(x, t, eps, s200, r2, false));
      return same_distribution(moments(a), moments(b), d);
    });
  run_check(report, "ddim recovers x0 from the true noise", [&](std::string& d) {
    Rng rng(mix_seed(o.seed, 700));
    Tensor<float> x0({4096}), eps({4096});
    for (auto& v : x0.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
    // Float rounding in x_t is amplified by 1/sqrt(alpha_bar_t) when solving for x0.
    double worst = 0.0;
    for (int t : {1, 50, 150, 200}) {
      const auto xt = forward_diffuse(x0, t, eps, s200);
      const auto rec = ddim_step(xt, t, 0, eps, 0.0, s200, rng);
      const double bound = 16.0 * std::numeric_limits<float>::epsilon() * 6.0 / std::sqrt(s200.alpha_bar(t));
      for (std::size_t i = 0; i < rec.size(); ++i)
        worst = std::max(worst, std::abs(double(rec[i]) - x0[i]) / bound);
    }
    d = "max error " + fmt(worst) + " of the float rounding bound";
    return worst <= 1.0;
  });

  run_check(report, "guidance rule identities", [&](std::string& d) {
    Rng rng(mix_seed(o.seed, 800));
    Tensor<float> pc({512}), pu({512});
    for (auto& v : pc.values()) v = static_cast<float>(rng.normal());
    for (auto& v : pu.values()) v = static_cast<float>(rng.normal());
    bool ok = guide(pc, pu, 0.0, GuidanceRule::standard) == pc;
    for (double w : {0.0, 0.4, 2.0, 40.0}) {
      const auto f = guide(pc, pc, w, GuidanceRule::standard);
      for (std::size_t i = 0; i < f.size(); ++i) ok &= std::abs(f[i] - pc[i]) <= 1e-5f * (1.0f + std::abs(pc[i]));
    }
    ok &= guide(pc, pu, 1.0, GuidanceRule::standard) == guide(pc, pu, 1.0, GuidanceRule::paper);
    for (double w : {0.0, 0.4, 2.0}) ok &= guide(pc, pu, w, GuidanceRule::standard) != guide(pc, pu, w, GuidanceRule::paper);
    d = "W=0 identity, fixpoint, W=1 coincidence, divergence at 0/0.4/2";
    return ok;
  });
  return report;
}

SuiteReport pipeline_suite(const VerifyOptions& o) {
  SuiteReport report{"pipeline", {}};

  run_check(report, "masked loss is blind off the mask", [&](std::string& d) {
    Rng rng(mix_seed(o.seed, 900));
    Tensor<double> pred = random_tensor({4, 1, 8, 8}, rng), target = random_tensor({4, 1, 8, 8}, rng);
    Tensor<double> mask({4, 1, 8, 8});
    for (auto& v : mask.values()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    for (int b = 0; b < 4; ++b) mask[static_cast<std::size_t>(b) * 64] = 1.0;
    ParamMap<double> p{{"pred", pred}};
    const GraphBuilder<double> fn = [&](Graph<double>& g, const ParamMap<double>& q) {
      return g.masked_mse(g.parameter("pred", q.at("pred")), g.constant(target), g.constant(mask));
    };
    const auto ev = evaluate_with_gradients(fn, p);
    bool ok = true;
    std::size_t off = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == 0.0) {
        ok &= ev.gradients.at("pred")[i] == 0.0;
        p.at("pred")[i] += 10.0;
        ++off;
      }
    ok &= evaluate(fn, p) == ev.loss;
    d = std::to_string(off) + " off-mask elements: zero gradient, loss unchanged under perturbation";
    return ok;
  });

  const SliceDataset corpus = generate_corpus(small_spec(mix_seed(o.seed, 1000)));
  const auto schedule = make_schedule(ScheduleKind::cosine, 200);

  run_check(report, "initial loss with zero-initialized head", [&](std::string& d) {
    const Denoiser net{UNetConfig{}};
    const auto params = net.init_params(mix_seed(o.seed, 1100));
    Rng rng(mix_seed(o.seed, 1200));
    const ScenarioPolicy policy;
    std::vector<TrainingSample> samples;
    while (samples.size() < 32) {
      const auto rec = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1));
      samples.push_back(make_training_sample(corpus.image(rec), corpus.label(rec), schedule, policy, rng));
    }
    const double loss = batch_loss(net, params, collate(samples));
    d = "loss " + fmt(loss);
    return std::abs(loss - 1.0) <= 0.1;
  });

  run_check(report, "preprocessing invariants over " + std::to_string(o.pipeline_draws) + " draws",
            [&](std::string& d) {
              Rng rng(mix_seed(o.seed, 1300));
              const ScenarioPolicy policy;
              const AugmentOptions aug;
              int dropped = 0, exclusivity = 0, consistency = 0, overlap = 0, tightness = 0, boxes = 0;
              for (int i = 0; i < o.pipeline_draws; ++i) {
                const auto rec =
                    static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1));
                const auto [img, lab] = augment(corpus.image(rec), corpus.label(rec), aug, rng);
                TrainingSample s;
                try {
                  s = make_training_sample(img, lab, schedule, policy, rng);
                } catch (const RoiError&) {
                  continue;  // no room for a shape after augmentation; the trainer redraws
                }
                try {
                  s.roi.validate();
                } catch (const RoiError&) {
                  ++exclusivity;
                }
                try {
                  check_conditioning(s.roi, s.cv);
                } catch (const RoiError&) {
                  ++consistency;
                }
                dropped += s.cv.is_dropped();
                const Normalization norm = normalize_and_pad(img).norm;
                const Mask tumor = pad_mask(lab.tumor(), norm);
                if (s.roi[RoiChannel::normal].intersects(tumor)) ++overlap;
                const std::array<Mask, 5> sources{Mask(), pad_mask(lab.indicator(LabelMask::kCore), norm),
                                                  pad_mask(lab.indicator(LabelMask::kEdema), norm),
                                                  pad_mask(lab.indicator(LabelMask::kEnhancement), norm), tumor};
                for (int c = 1; c < kRoiChannels; ++c) {
                  const Mask& ch = s.roi.channels[c];
                  if (ch.none()) continue;
                  const bool box_code = s.cv.codes[c] == static_cast<std::uint8_t>(ChannelMode::bbox);
                  const bool free_code = s.cv.codes[c] == static_cast<std::uint8_t>(ChannelMode::freeform);
                  const Mask box = oracle_box(sources[c]);
                  boxes += box_code;
                  const bool ok = box_code ? ch == box : free_code ? ch == sources[c] : (ch == box || ch == sources[c]);
                  if (!ok) ++tightness;
                }
              }
              const double frac = static_cast<double>(dropped) / o.pipeline_draws;
              d = "dropout " + fmt(frac) + ", violations: exclusivity " + std::to_string(exclusivity) +
                  ", codes " + std::to_string(consistency) + ", normal/tumor overlap " + std::to_string(overlap) +
                  ", box tightness " + std::to_string(tightness) + " (" + std::to_string(boxes) + " boxes)";
              return exclusivity == 0 && consistency == 0 && overlap == 0 && tightness == 0 && frac >= 0.08 &&
                     frac <= 0.12;
            });

  run_check(report, "split integrity and ratios", [&](std::string& d) {
    Rng rng(mix_seed(o.seed, 1400));
    std::vector<StudyRecord> records;
    const int studies = 200;
    for (int s = 0; s < studies; ++s) {
      const auto area = rng.uniform_int(0, 400);
      for (int k = 0; k < 3; ++k)
        for (auto seq : kSequences) {
          StudyRecord r;
          r.study_id = "s" + std::to_string(s);
          r.slice_index = k;
          r.sequence = seq;
          r.tumor_area = k == 1 ? area : 0;
          records.push_back(r);
        }
    }
    Rng split_rng(mix_seed(o.seed, 1500));
    const auto sp = split_dataset(records, {}, split_rng);
    bool ok = sp.by_study.size() == static_cast<std::size_t>(studies);
    std::map<std::string, std::set<Split>> seen;
    std::size_t covered = 0;
    for (auto split : {Split::train, Split::validation, Split::test}) {
      const auto idx = sp.records_in(split, records);
      covered += idx.size();
      for (auto i : idx) seen[records[i].study_id].insert(split);
    }
    for (const auto& [_, splits] : seen) ok &= splits.size() == 1;
    ok &= covered == records.size();
    const auto n_train = sp.study_count(Split::train), n_val = sp.study_count(Split::validation),
               n_test = sp.study_count(Split::test);
    ok &= std::abs(static_cast<long>(n_train) - 160) <= 1 && std::abs(static_cast<long>(n_val) - 20) <= 1 &&
          std::abs(static_cast<long>(n_test) - 20) <= 1;
    d = "studies " + std::to_string(n_train) + "/" + std::to_string(n_val) + "/" + std::to_string(n_test);
    return ok;
  });

  run_check(report, "oversampled index counts", [&](std::string& d) {
    std::vector<std::size_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t tumor = 0;
    for (const auto& r : corpus.records) tumor += r.tumor_area > 0;
    bool ok = true;
    for (int factor : {1, 2, 3}) {
      const auto over = oversample_tumor_slices(corpus.records, idx, factor);
      std::vector<int> count(corpus.size(), 0);
      for (auto i : over) ++count[i];
      ok &= over.size() == corpus.size() + (factor - 1) * tumor;
      for (std::size_t i = 0; i < corpus.size(); ++i)
        ok &= count[i] == (corpus.records[i].tumor_area > 0 ? factor : 1);
    }
    d = std::to_string(tumor) + " of " + std::to_string(corpus.size()) + " records carry tumor";
    return ok;
  });
  return report;
}

std::vector<SuiteReport> verify_all(const VerifyOptions& options) {
  return {gradient_suite(options), schedule_suite(options), pipeline_suite(options)};
}

bool print_reports(std::ostream& os, const std::vector<SuiteReport>& reports) {
  bool all = true;
  for (const auto& r : reports)
    for (const auto& c : r.checks) {
      os << (c.passed ? "PASS" : "FAIL") << "  " << r.suite << ": " << c.name << "  [" << c.detail << ", "
         << fmt(c.seconds, 3) << "s]\n";
      all &= c.passed;
    }
  return all;
}

}  // namespace dinp
