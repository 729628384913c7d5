#include <doctest.h>

#include <cmath>

#include "dinp/autograd.hpp"
#include "dinp/rng.hpp"
#include "dinp/tensor.hpp"

using namespace dinp;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Direct quadruple loop, no im2col.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, int stride, int pad) {
  const auto B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Co = k.dim(0), K = k.dim(2);
  const auto Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({B, Co, Ho, Wo});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < Co; ++o)
      for (std::int64_t r = 0; r < Ho; ++r)
        for (std::int64_t c = 0; c < Wo; ++c) {
          double s = 0;
          for (std::int64_t i = 0; i < Ci; ++i)
            for (std::int64_t kr = 0; kr < K; ++kr)
              for (std::int64_t kc = 0; kc < K; ++kc) {
                const auto rr = r * stride + kr - pad, cc = c * stride + kc - pad;
                if (rr < 0 || cc < 0 || rr >= H || cc >= W) continue;
                s += x[((b * Ci + i) * H + rr) * W + cc] * k[((o * Ci + i) * K + kr) * K + kc];
              }
          y[((b * Co + o) * Ho + r) * Wo + c] = s;
        }
  return y;
}

}  // namespace

TEST_CASE("tensor element count equals the product of its shape") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
  CHECK(t.reshaped({4, 6}).shape() == Shape{4, 6});
}

TEST_CASE("require_finite names the producing operation") {
  Tensor<float> t({3}, 1.0f);
  CHECK_NOTHROW(require_finite(t, "op"));
  t[1] = NAN;
  CHECK_THROWS_AS(require_finite(t, "op"), NonFiniteError);
  t[1] = INFINITY;
  try {
    require_finite(t, "my_op");
    FAIL("expected throw");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("my_op") != std::string::npos);
  }
}

TEST_CASE("gradient of sum of squares") {
  ParamMap<double> p{{"x", Tensor<double>({3}, std::vector<double>{1, 2, 3})}};
  GraphBuilder<double> f = [](Graph<double>& g, const ParamMap<double>& q) {
    return g.sum(g.square(g.parameter("x", q.at("x"))));
  };
  const auto ev = evaluate_with_gradients(f, p);
  CHECK(ev.loss == 14.0);
  CHECK(ev.gradients.at("x").to_vector() == std::vector<double>{2, 4, 6});
}

TEST_CASE("gradient of a zeroed expression is zero") {
  ParamMap<double> p{{"x", Tensor<double>({3}, std::vector<double>{1, 2, 3})}};
  GraphBuilder<double> f = [](Graph<double>& g, const ParamMap<double>& q) {
    return g.sum(g.scale(g.parameter("x", q.at("x")), 0.0));
  };
  const auto ev = evaluate_with_gradients(f, p);
  for (double v : ev.gradients.at("x").values()) CHECK(v == 0.0);
}

TEST_CASE("unreachable parameters receive a zero gradient") {
  ParamMap<double> p{{"a", Tensor<double>({2}, 1.0)}, {"b", Tensor<double>({2}, 1.0)}};
  GraphBuilder<double> f = [](Graph<double>& g, const ParamMap<double>& q) {
    g.parameter("b", q.at("b"));
    return g.sum(g.parameter("a", q.at("a")));
  };
  const auto ev = evaluate_with_gradients(f, p);
  CHECK(ev.gradients.at("b").to_vector() == std::vector<double>{0, 0});
}

TEST_CASE("finite differences of simple functions") {
  ParamMap<double> p{{"x", Tensor<double>({1}, 3.0)}};
  GraphBuilder<double> sq = [](Graph<double>& g, const ParamMap<double>& q) {
    return g.sum(g.square(g.parameter("x", q.at("x"))));
  };
  CHECK(std::abs(finite_difference_gradients(sq, p, 1e-5).at("x")[0] - 6.0) < 1e-6);

  GraphBuilder<double> constant = [](Graph<double>& g, const ParamMap<double>& q) {
    g.parameter("x", q.at("x"));
    return g.constant(Tensor<double>({}, std::vector<double>{4.0}));
  };
  CHECK(std::abs(finite_difference_gradients(constant, p, 1e-5).at("x")[0]) < 1e-8);
  CHECK_THROWS(finite_difference_gradients(sq, p, 0.0));
  CHECK_THROWS(finite_difference_gradients(sq, p, -1e-3));
}

TEST_CASE("two-layer conv net with masked loss matches central differences") {
  Rng rng(42);
  ParamMap<double> p{{"w1", randn({4, 2, 3, 3}, rng, 0.4)},
                     {"b1", randn({4}, rng, 0.1)},
                     {"w2", randn({1, 4, 3, 3}, rng, 0.4)},
                     {"b2", randn({1}, rng, 0.1)}};
  const Tensor<double> x = randn({2, 2, 8, 8}, rng), target = randn({2, 1, 8, 8}, rng);
  Tensor<double> mask({2, 1, 8, 8});
  for (auto& v : mask.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  mask[0] = mask[64] = 1.0;
  GraphBuilder<double> f = [&](Graph<double>& g, const ParamMap<double>& q) {
    auto P = [&](const char* n) { return g.parameter(n, q.at(n)); };
    Var h = g.silu(g.conv2d(g.constant(x), P("w1"), P("b1"), 1, 1));
    Var y = g.conv2d(h, P("w2"), P("b2"), 1, 1);
    return g.masked_mse(y, g.constant(target), g.constant(mask));
  };
  const auto ev = evaluate_with_gradients(f, p);
  const auto fd = finite_difference_gradients(f, p, 1e-5);
  double worst = 0;
  for (const auto& [name, t] : fd)
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double a = ev.gradients.at(name)[i], n = t[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}));
    }
  CHECK(worst < 1e-4);
}

TEST_CASE("three-layer net: 100 sampled probes agree with the analytic gradient") {
  Rng rng(7);
  ParamMap<double> p{{"w1", randn({6, 10}, rng, 0.4)}, {"b1", randn({6}, rng)},
                     {"w2", randn({6, 6}, rng, 0.4)},  {"b2", randn({6}, rng)},
                     {"w3", randn({2, 6}, rng, 0.4)},  {"b3", randn({2}, rng)}};
  const Tensor<double> x = randn({5, 10}, rng);
  GraphBuilder<double> f = [&](Graph<double>& g, const ParamMap<double>& q) {
    auto P = [&](const std::string& n) { return g.parameter(n, q.at(n)); };
    Var h = g.silu(g.linear(g.constant(x), P("w1"), P("b1")));
    h = g.silu(g.linear(h, P("w2"), P("b2")));
    return g.sum(g.square(g.linear(h, P("w3"), P("b3"))));
  };
  std::vector<ParameterProbe> probes;
  const std::vector<std::string> names{"w1", "b1", "w2", "b2", "w3", "b3"};
  for (int i = 0; i < 100; ++i) {
    const auto& n = names[rng.uniform_int(0, 5)];
    probes.push_back({n, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.at(n).size()) - 1))});
  }
  const auto ev = evaluate_with_gradients(f, p);
  const auto fd = finite_difference_probes(f, p, probes, 1e-6);
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const double a = ev.gradients.at(probes[i].name)[probes[i].index];
    CHECK(std::abs(a - fd[i]) / std::max({std::abs(a), std::abs(fd[i]), 1e-3}) < 1e-4);
  }
}

TEST_CASE("conv2d identity and zero kernels") {
  Rng rng(3);
  const Tensor<double> x = randn({2, 3, 5, 5}, rng);
  Tensor<double> id({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) id[i * 3 + i] = 1.0;
  CHECK(conv2d(x, id, 1, 0) == x);
  const auto zero = conv2d(x, Tensor<double>({4, 3, 3, 3}), 1, 1);
  for (double v : zero.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the quadruple-loop reference") {
  Rng rng(4);
  const Tensor<double> x = randn({1, 2, 5, 5}, rng), k = randn({3, 2, 3, 3}, rng);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
    const auto got = conv2d(x, k, stride, pad), want = naive_conv(x, k, stride, pad);
    REQUIRE(got.shape() == want.shape());
    CHECK(got.dim(2) == (5 + 2 * pad - 3) / stride + 1);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
  }
  CHECK_THROWS_AS(conv2d(x, randn({3, 4, 3, 3}, rng), 1, 0), ShapeError);
}

TEST_CASE("64-bit graph replay is bit-identical") {
  Rng rng(5);
  ParamMap<double> p{{"w", randn({4, 3, 3, 3}, rng)}, {"g", randn({4}, rng)}, {"b", randn({4}, rng)}};
  const Tensor<double> x = randn({2, 3, 6, 6}, rng);
  GraphBuilder<double> f = [&](Graph<double>& g, const ParamMap<double>& q) {
    Var h = g.conv2d(g.constant(x), g.parameter("w", q.at("w")), std::nullopt, 1, 1);
    h = g.group_norm(h, g.parameter("g", q.at("g")), g.parameter("b", q.at("b")), 2);
    return g.sum(g.square(g.silu(h)));
  };
  const auto a = evaluate_with_gradients(f, p), b = evaluate_with_gradients(f, p);
  CHECK(a.loss == b.loss);
  CHECK(a.gradients == b.gradients);
}

TEST_CASE("shape errors are reported, not silently broadcast") {
  Graph<float> g;
  Var a = g.constant(Tensor<float>({2, 3}));
  Var b = g.constant(Tensor<float>({3, 2}));
  CHECK_THROWS_AS(g.add(a, b), ShapeError);
  CHECK_THROWS_AS(g.linear(a, g.constant(Tensor<float>({4, 2})), g.constant(Tensor<float>({4}))), ShapeError);
  CHECK_THROWS_AS(g.group_norm(g.constant(Tensor<float>({1, 6, 2, 2})), g.constant(Tensor<float>({6})),
                               g.constant(Tensor<float>({6})), 4),
                  ShapeError);
}

TEST_CASE("masked_mse rejects an empty sample mask") {
  Graph<double> g;
  Var p = g.constant(Tensor<double>({1, 1, 2, 2}, 1.0));
  CHECK_THROWS(g.masked_mse(p, g.constant(Tensor<double>({1, 1, 2, 2})), g.constant(Tensor<double>({1, 1, 2, 2}))));
}
