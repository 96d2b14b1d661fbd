#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "tgar/autodiff.hpp"
#include "tgar/verify.hpp"

using namespace tgar;
using Var = Tape::Var;
using Leaves = std::vector<Var>;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& x : t.values()) x = u(rng);
  return t;
}

// Sum of out * probe, so every output entry gets a distinct upstream weight.
Var weighted_sum(Tape& t, Var out, const Tensor& probe) {
  const Var prod = t.mul(out, t.leaf(probe, false));
  const Var ones_row = t.leaf(Tensor(1, probe.rows(), 1), false);
  const Var ones_col = t.leaf(Tensor(probe.cols(), 1, 1), false);
  return t.linear(t.linear(ones_row, prod), ones_col);
}

}  // namespace

TEST_CASE("linear with identity input reproduces W") {
  Tape t;
  const Tensor W = Tensor::from_rows({{1, 2}, {3, 4}});
  const Var x = t.leaf(identity(2));
  const Var w = t.leaf(W);
  CHECK(t.value(t.linear(x, w)) == W);
}

TEST_CASE("linear with zero weights is zero") {
  std::mt19937_64 rng(1);
  Tape t;
  const Var y = t.linear(t.leaf(random_tensor(3, 4, rng)), t.leaf(Tensor(4, 2)));
  for (auto v : t.value(y).values()) CHECK(v == 0);
}

TEST_CASE("shape mismatch is an error") {
  Tape t;
  CHECK_THROWS_AS(t.linear(t.leaf(Tensor(3, 4)), t.leaf(Tensor(3, 2))), ShapeError);
  CHECK_THROWS_AS(t.add(t.leaf(Tensor(3, 4)), t.leaf(Tensor(4, 3))), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor(2, 3), Tensor(2, 3)), ShapeError);
}

TEST_CASE("non-finite values trip an error") {
  Tape t;
  CHECK_THROWS_AS(t.exp(t.leaf(Tensor(1, 1, 1000))), NumericError);
}

TEST_CASE("relu values and subgradient at zero") {
  Tape t;
  const Var x = t.leaf(Tensor::from_rows({{-1, 0, 2}}));
  const Var y = t.relu(x);
  CHECK(t.value(y) == Tensor::from_rows({{0, 0, 2}}));
  t.seed(y, Tensor(1, 3, 1));
  t.backward();
  CHECK(t.grad(x) == Tensor::from_rows({{0, 0, 1}}));
}

TEST_CASE("cross entropy closed forms") {
  SUBCASE("uniform logits over four classes") {
    Tape t;
    const Var l = t.cross_entropy_rows(t.leaf(Tensor(3, 4, 0.25)), {0, 1, 3});
    for (std::size_t r = 0; r < 3; ++r) CHECK(t.value(l)(r, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("one confident row") {
    Tape t;
    const Var logits = t.leaf(Tensor::from_rows({{10, -10}}));
    const Var l = t.cross_entropy_rows(logits, {0});
    const double expected = std::log1p(std::exp(-20.0));
    CHECK(t.value(l)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
    t.seed(l, Tensor(1, 1, 0.5));  // 1/n with n = 2 labeled rows
    t.backward();
    const double p1 = std::exp(-20.0) / (1 + std::exp(-20.0));
    CHECK(t.grad(logits)(0, 0) == doctest::Approx(-0.5 * p1).epsilon(1e-12));
    CHECK(t.grad(logits)(0, 1) == doctest::Approx(0.5 * p1).epsilon(1e-12));
  }
}

TEST_CASE("every primitive matches finite differences on random shapes") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = dim(rng), a = dim(rng), b = dim(rng);
    const Tensor probe = random_tensor(n, b, rng);
    const Tensor probe_a = random_tensor(n, a, rng);
    auto check = [&](const char* name, auto build, std::vector<Tensor> inputs) {
      CAPTURE(name);
      CAPTURE(trial);
      const auto r = grad_check(build, inputs, 1e-6, 1e-5);
      CHECK(r.pass);
      CHECK(r.max_rel_error < 1e-5);
    };
    // Inputs kept away from the relu / leaky relu kinks.
    Tensor away = random_tensor(n, a, rng, 0.1, 1);
    for (auto& v : away.values()) v *= (rng() % 2 ? 1 : -1);
    check("linear", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.linear(x[0], x[1]), probe); },
          {random_tensor(n, a, rng), random_tensor(a, b, rng)});
    check("add_bias", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.add_bias(x[0], x[1]), probe); },
          {random_tensor(n, b, rng), random_tensor(1, b, rng)});
    check("relu", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.relu(x[0]), probe_a); }, {away});
    check("leaky_relu", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.leaky_relu(x[0], 0.2), probe_a); },
          {away});
    check("tanh", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.tanh(x[0]), probe_a); },
          {random_tensor(n, a, rng)});
    check("exp", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.exp(x[0]), probe_a); },
          {random_tensor(n, a, rng)});
    check("add", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.add(x[0], x[1]), probe_a); },
          {random_tensor(n, a, rng), random_tensor(n, a, rng)});
    check("mul", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.mul(x[0], x[1]), probe_a); },
          {random_tensor(n, a, rng), random_tensor(n, a, rng)});
    check("scale", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.scale(x[0], -1.7), probe_a); },
          {random_tensor(n, a, rng)});
    check("scale_rows", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.scale_rows(x[0], x[1]), probe_a); },
          {random_tensor(n, a, rng), random_tensor(n, 1, rng)});
    const Tensor m = random_tensor(n, a, rng);
    check("mask", [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.mask(x[0], m), probe_a); },
          {random_tensor(n, a, rng)});
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng() % b);
    const Tensor probe_col = random_tensor(n, 1, rng);
    check("cross_entropy",
          [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.cross_entropy_rows(x[0], labels), probe_col); },
          {random_tensor(n, b, rng, -3, 3)});
  }
}

TEST_CASE("corrupted backward is reported") {
  std::mt19937_64 rng(3);
  const Tensor probe = random_tensor(3, 2, rng);
  auto build = [&](Tape& t, const Leaves& x) { return weighted_sum(t, t.linear(x[0], x[1]), probe); };
  const std::vector<Tensor> inputs{random_tensor(3, 4, rng), random_tensor(4, 2, rng)};
  CHECK(grad_check(build, inputs, 1e-6, 1e-6).pass);
  const auto bad = grad_check(build, inputs, 1e-6, 1e-6, "linear");
  CHECK(!bad.pass);
  CHECK(bad.max_rel_error > 1);
}

TEST_CASE("relative error floor keeps exact zeros from failing") {
  const Tensor zero(2, 2);
  Tensor noise(2, 2);
  noise(0, 0) = 1e-17;
  CHECK(relative_error(noise, zero) < 1e-6);
  CHECK(relative_error(Tensor(2, 2, 1), Tensor(2, 2, 2)) == doctest::Approx(0.5));
}

TEST_CASE("parameter gradients accumulate and replay identically") {
  std::mt19937_64 rng(9);
  const Tensor W = random_tensor(4, 3, rng);
  const Tensor X = random_tensor(5, 4, rng);
  const Tensor up = random_tensor(5, 3, rng);
  auto run = [&](ExactTensor& sink) {
    Tape t;
    const Var y = t.tanh(t.linear(t.leaf(X), t.param(&W, &sink)));
    t.seed(y, up);
    t.backward();
  };
  ExactTensor once(4, 3), again(4, 3), twice(4, 3);
  run(once);
  run(again);
  CHECK(once == again);
  run(twice);
  run(twice);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice.raw(i) == 2 * once.raw(i));
}

TEST_CASE("proj, relu and prop composed on a five-node graph") {
  const auto d = random_dataset({5, 12, 3, 0, true, 17}, 2);
  ModelSpec spec;
  spec.input_dim = 3;
  spec.class_count = 2;
  spec.layers = {{LayerKind::gcn, 2, Activation::relu, false}};
  spec.decoder = DecoderKind::identity;
  spec.keep_prob = 1;
  const auto r = engine_gradcheck("five_node", d, spec, 5, 1e-5);
  CHECK(r.pass);
  CHECK(r.value < 1e-5);
}

TEST_CASE("fixed-point accumulation is order independent") {
  std::mt19937_64 rng(4);
  std::vector<double> xs(200);
  for (auto& x : xs) x = std::ldexp(std::uniform_real_distribution<double>(-1, 1)(rng), static_cast<int>(rng() % 40) - 20);
  ExactSum a;
  for (auto x : xs) a.add(x);
  std::shuffle(xs.begin(), xs.end(), rng);
  ExactSum b;
  for (auto x : xs) b.add(x);
  CHECK(a.raw() == b.raw());
  CHECK_THROWS_AS(to_fixed(std::ldexp(1.0, 63)), NumericError);
  CHECK_THROWS_AS(to_fixed(NAN), NumericError);
}
