#include <cmath>
#include <vector>

#include "doctest.h"
#include "roboenc/autodiff.hpp"
#include "roboenc/errors.hpp"
#include "op_cases.hpp"
#include "test_util.hpp"

using namespace roboenc;
using roboenc::testing::max_rel_err;
using roboenc::testing::random_normal;


TEST_CASE("forward_op examples") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = tape.constant(Tensor::matrix({{1}, {1}}));
  CHECK(ad::matmul(a, b).value() == Tensor::matrix({{3}, {7}}));
  CHECK(ad::relu(tape.constant(Tensor::vector({-1, 0, 2}))).value() == Tensor::vector({0, 0, 2}));
  CHECK(ad::softmax(tape.constant(Tensor::vector({0, 0}))).value() == Tensor::vector({0.5, 0.5}));
}

TEST_CASE("forward_op rejects bad shapes and non-finite values") {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}, 1.0));
  Var b = tape.constant(Tensor(Shape{2, 3}, 1.0));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, tape.constant(Tensor(Shape{2}, 1.0))), ShapeError);
  CHECK_THROWS_AS(tape.constant(Tensor::vector({1.0, NAN})), NumericError);
  CHECK_THROWS_AS(tape.leaf(Tensor::vector({INFINITY})), NumericError);
  CHECK_THROWS_AS(ad::log(tape.constant(Tensor::vector({0.0}))), NumericError);
  CHECK_THROWS_AS(ad::scale(tape.constant(Tensor::vector({1e300})), 1e300), NumericError);
}

TEST_CASE("backward examples") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2, 3}));
  Gradients g = tape.backward(ad::sum(ad::square(x)));
  CHECK(g.of(x) == Tensor::vector({2, 4, 6}));

  Var c = tape.constant(Tensor::scalar(5.0));
  Gradients gc = tape.backward(ad::scale(c, 2.0));
  CHECK(gc.of(x) == Tensor(Shape{3}, 0.0));

  CHECK_THROWS_AS(tape.backward(ad::square(x)), ContractError);
}

TEST_CASE("backward visits shared subexpressions once per path") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0}));
  Var y = ad::square(x);
  Var z = ad::sum(ad::add(y, y));  // 2 x^2
  CHECK(tape.backward(z).of(x)[0] == doctest::Approx(12.0));
}

TEST_CASE("finite_diff_grad examples") {
  auto sum_f = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
  };
  const Tensor g = finite_diff_grad(sum_f, Tensor::vector({0.3, -2.0, 7.0}));
  for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  auto sq = [](const Tensor& t) { return t[0] * t[0]; };
  CHECK(std::abs(finite_diff_grad(sq, Tensor::vector({3.0}), 1e-5)[0] - 6.0) < 1e-8);
  CHECK_THROWS_AS(finite_diff_grad(sq, Tensor::vector({3.0}), 0.0), ContractError);
}

TEST_CASE("every primitive matches central differences on 100 seeded cases") {
  for (OpKind kind : all_op_kinds()) {
    CAPTURE(op_name(kind));
    CHECK(roboenc::testing::op_fd_worst(kind, 2024, 100) < 1e-4);
  }
}

TEST_CASE("composite graph gradient matches finite differences") {
  Rng rng(7);
  const Tensor x0 = random_normal({2, 1, 6, 6}, rng);
  const Tensor w0 = random_normal({3, 1, 3, 3}, rng, 0.5);
  const Tensor d0 = random_normal({12, 4}, rng, 0.5);
  const std::vector<std::size_t> labels{1, 3};
  auto build = [&](Var x, Var w, Var d) {
    Var h = ad::relu(ad::conv2d(x, w, std::nullopt, 2));
    h = ad::reshape(h, Shape{2, 12});
    Var logits = ad::matmul(h, d);
    return ad::mean(ad::scale(ad::pick(ad::log_softmax(logits), labels), -1.0));
  };
  Tape tape;
  Var x = tape.leaf(x0), w = tape.leaf(w0), d = tape.leaf(d0);
  const Gradients g = tape.backward(build(x, w, d));
  auto f = [&](const Tensor& xi) {
    Tape t;
    return build(t.constant(xi), t.constant(w0), t.constant(d0)).value().item();
  };
  CHECK(max_rel_err(g.of(x), finite_diff_grad(f, x0)) < 1e-4);
}

TEST_CASE("backward is linear in the root") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_normal({3, 4}, rng);
    const Tensor w0 = random_normal({4, 2}, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto grads = [&](double ca, double cb) {
      Tape tape;
      Var x = tape.leaf(x0);
      Var f = ad::sum(ad::relu(ad::matmul(x, tape.constant(w0))));
      Var g = ad::mean(ad::log_softmax(x));
      std::vector<Var> terms;
      if (ca != 0.0) terms.push_back(ad::scale(f, ca));
      if (cb != 0.0) terms.push_back(ad::scale(g, cb));
      Var root = terms.size() == 2 ? ad::add(terms[0], terms[1]) : terms[0];
      return tape.backward(root).of(x);
    };
    const Tensor combined = grads(a, b);
    const Tensor gf = grads(1.0, 0.0);
    const Tensor gg = grads(0.0, 1.0);
    for (std::size_t i = 0; i < combined.size(); ++i) {
      CHECK(std::abs(combined[i] - (a * gf[i] + b * gg[i])) <= 1e-12);
    }
  }
}

TEST_CASE("identical inputs give bit-identical gradients") {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    Var x = tape.leaf(random_normal({2, 2, 5, 5}, rng));
    Var w = tape.leaf(random_normal({2, 2, 3, 3}, rng));
    Var y = ad::sum(ad::square(ad::conv2d(x, w, std::nullopt, 1)));
    const Gradients g = tape.backward(y);
    return std::pair{g.of(x), g.of(w)};
  };
  CHECK(run() == run());
}
