#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "afine/autodiff.hpp"

using namespace afine;
using namespace afine::ops;

namespace {

// Finite-difference oracle for a scalar function of one leaf tensor.
template <typename Fn>
void check_gradient(Tensor input, Fn&& build, double tol = 1e-6, double h = 1e-5) {
  Tape tape(true);
  Var x = tape.leaf(input, true);
  Var loss = build(tape, x);
  REQUIRE(tape.value(loss).size() == 1);
  tape.backward(loss);
  Tensor analytic = tape.grad(x);

  for (std::size_t i = 0; i < input.size(); ++i) {
    auto eval = [&](double v) {
      Tensor probe = input;
      probe[i] = v;
      Tape t(false);
      Var xx = t.leaf(probe, false);
      return t.value(build(t, xx))[0];
    };
    double fd = (eval(input[i] + h) - eval(input[i] - h)) / (2.0 * h);
    REQUIRE_THAT(analytic[i], Catch::Matchers::WithinAbs(fd, tol + 1e-4 * std::fabs(fd)));
  }
}

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  t.fill_uniform(rng, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Tensor x = random_tensor({6}, 11, 0.2, 1.5);

  check_gradient(x, [](Tape& t, Var v) { return sum_(t, mul(t, v, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, exp_(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, sqrt_(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, reciprocal(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, gelu(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, softplus_(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, normal_cdf(t, v)); });
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, axpb(t, v, -2.5, 0.75)); });
}

TEST_CASE("softmax gradient and normalization") {
  Tensor x = random_tensor({8}, 21);
  {
    Tape t(false);
    Var s = softmax_vec(t, t.constant(x));
    double total = 0.0;
    for (double v : t.value(s).data) {
      REQUIRE(v > 0.0);
      total += v;
    }
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  // Weighted sum through softmax exercises the full Jacobian.
  Tensor w = random_tensor({8}, 22);
  check_gradient(x, [&w](Tape& t, Var v) { return dot(t, softmax_vec(t, v), t.constant(w)); });
}

TEST_CASE("matmul family matches finite differences") {
  Tensor a = random_tensor({3, 4}, 31);
  Tensor b = random_tensor({4, 2}, 32);
  Tensor bt = random_tensor({2, 4}, 33);

  check_gradient(a, [&b](Tape& t, Var v) { return sum_(t, matmul(t, v, t.constant(b))); });
  check_gradient(b, [&a](Tape& t, Var v) { return sum_(t, matmul(t, t.constant(a), v)); });
  check_gradient(a, [&bt](Tape& t, Var v) { return sum_(t, matmul_nt(t, v, t.constant(bt))); });
  check_gradient(bt, [&a](Tape& t, Var v) { return sum_(t, matmul_nt(t, t.constant(a), v)); });

  Tensor w = random_tensor({3, 5}, 34);
  Tensor xv = random_tensor({5}, 35);
  Tensor bias = random_tensor({3}, 36);
  check_gradient(w, [&](Tape& t, Var v) {
    return sum_(t, linear(t, v, t.constant(xv), t.constant(bias)));
  });
  check_gradient(xv, [&](Tape& t, Var v) {
    return sum_(t, linear(t, t.constant(w), v, t.constant(bias)));
  });
}

TEST_CASE("conv2d shapes and gradient") {
  Tensor x = random_tensor({2, 7, 6}, 41);
  Tensor w = random_tensor({3, 2, 3, 3}, 42);
  Tensor b = random_tensor({3}, 43);
  {
    Tape t(false);
    Var out = conv2d(t, t.constant(x), t.constant(w), t.constant(b), 2, 1);
    REQUIRE(t.value(out).shape == std::vector<std::size_t>{3, 4, 3});
  }
  check_gradient(x, [&](Tape& t, Var v) {
    return sum_(t, conv2d(t, v, t.constant(w), t.constant(b), 2, 1));
  });
  check_gradient(w, [&](Tape& t, Var v) {
    return sum_(t, conv2d(t, t.constant(x), v, t.constant(b), 2, 1));
  });
  check_gradient(b, [&](Tape& t, Var v) {
    return sum_(t, conv2d(t, t.constant(x), t.constant(w), v, 2, 1));
  });
}

TEST_CASE("spatial statistics ops") {
  Tensor x = random_tensor({3, 4, 5}, 51);
  check_gradient(x, [](Tape& t, Var v) { return sum_(t, spatial_mean(t, v)); });
  check_gradient(x, [](Tape& t, Var v) {
    Var m = spatial_mean(t, v);
    Var c = sub_channel(t, v, m);
    return sum_(t, spatial_mean(t, mul(t, c, c)));  // per-channel variance
  });
}

TEST_CASE("layer norm and attention-style ops") {
  Tensor x = random_tensor({4, 6}, 61);
  Tensor gamma = random_tensor({6}, 62, 0.5, 1.5);
  Tensor beta = random_tensor({6}, 63);
  check_gradient(x, [&](Tape& t, Var v) {
    return sum_(t, layer_norm(t, v, t.constant(gamma), t.constant(beta)));
  }, 1e-5);
  check_gradient(gamma, [&](Tape& t, Var v) {
    return sum_(t, layer_norm(t, t.constant(x), v, t.constant(beta)));
  }, 1e-5);

  check_gradient(x, [](Tape& t, Var v) {
    Var sm = softmax_rows(t, v);
    return sum_(t, mul(t, sm, sm));
  });
  check_gradient(x, [](Tape& t, Var v) {
    Var a = slice_cols(t, v, 1, 4);
    Var b = slice_rows(t, v, 0, 2);
    return add(t, sum_(t, a), sum_(t, b));
  });
}

TEST_CASE("data movement ops round-trip") {
  Tensor x = random_tensor({6, 5}, 71);  // tokens [T=6, d=5]
  Tape t(false);
  Var tokens = t.constant(x);
  Var grid = tokens_to_grid(t, tokens, 2, 3);
  REQUIRE(t.value(grid).shape == std::vector<std::size_t>{5, 2, 3});
  Var back = grid_to_tokens(t, grid);
  REQUIRE(t.value(back).shape == x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(t.value(back)[i] == x[i]);

  check_gradient(x, [](Tape& t2, Var v) {
    return sum_(t2, grid_to_tokens(t2, tokens_to_grid(t2, v, 3, 2)));
  });
}

TEST_CASE("bilinear grid interpolation") {
  SECTION("identity when target equals source") {
    Tensor g = random_tensor({3, 4, 2}, 81);
    Tape t(false);
    Var out = interp_grid_bilinear(t, t.constant(g), 3, 4);
    for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(t.value(out)[i] == g[i]);
  }
  SECTION("hand-computed 2x2 to 3x3 center") {
    Tensor g({2, 2, 1});
    g.data = {0.0, 1.0, 2.0, 3.0};
    Tape t(false);
    Var out = interp_grid_bilinear(t, t.constant(g), 3, 3);
    // Corner-aligned: center mixes all four corners equally.
    REQUIRE_THAT(t.value(out)[std::size_t(4)], Catch::Matchers::WithinAbs(1.5, 1e-12));
    REQUIRE(t.value(out)[0] == 0.0);
    REQUIRE(t.value(out)[2] == 1.0);
    REQUIRE(t.value(out)[6] == 2.0);
    REQUIRE(t.value(out)[8] == 3.0);
  }
  SECTION("gradient") {
    Tensor g = random_tensor({3, 3, 2}, 82);
    check_gradient(g, [](Tape& t, Var v) {
      return sum_(t, interp_grid_bilinear(t, v, 5, 7));
    });
  }
  SECTION("degenerate target rejected") {
    Tensor g = random_tensor({2, 2, 1}, 83);
    Tape t(false);
    REQUIRE_THROWS_AS(interp_grid_bilinear(t, t.constant(g), 0, 3), DimensionError);
  }
}

TEST_CASE("concat and slice vectors") {
  Tensor a = random_tensor({3}, 91);
  Tensor b = random_tensor({4}, 92);
  check_gradient(a, [&b](Tape& t, Var v) {
    Var cat = concat_vec(t, {v, t.constant(b)});
    return sum_(t, slice_vec(t, cat, 1, 6));
  });
}

TEST_CASE("backward requires scalar root and tracking tape") {
  Tape t(true);
  Var x = t.leaf(random_tensor({3}, 99), true);
  REQUIRE_THROWS_AS(t.backward(x), DimensionError);
  Tape off(false);
  Var y = off.leaf(Tensor::scalar(1.0), true);
  REQUIRE_THROWS_AS(off.backward(y), NumericError);
}
