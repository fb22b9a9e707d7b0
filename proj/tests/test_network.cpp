#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "roboenc/errors.hpp"
#include "roboenc/network.hpp"
#include "test_util.hpp"

using namespace roboenc;
using roboenc::testing::max_rel_err;
using roboenc::testing::random_normal;

namespace {

// Codebook whose rows are the first k standard basis vectors scaled by beta.
Codebook axis_codebook(std::size_t k, std::size_t l, double beta) {
  Codebook cb{k, l, beta, 0, Tensor(Shape{k, l}, 0.0)};
  for (std::size_t i = 0; i < k; ++i) cb.rows[i * l + i] = beta;
  return cb;
}

double softmax_entry(const Tensor& s, std::size_t i) {
  double z = 0.0;
  for (double v : s.data()) z += std::exp(v - s[i]);
  return 1.0 / z;
}

}  // namespace

TEST_CASE("forward through an identity dense layer") {
  Model m = make_model(Architecture{{2}, {Dense{2, 2}}}, Head::one_hot_ce(2), 1);
  m.params[0] = Tensor::matrix({{1, 0}, {0, 1}});
  m.params[1] = Tensor(Shape{2}, 0.0);
  CHECK(forward(m, Tensor::vector({1, 2})) == Tensor::vector({1, 2}));
}

TEST_CASE("dropout is inactive in eval mode and seeded in train mode") {
  const Architecture arch{{6}, {Dense{6, 8}, Relu{}, Dropout{0.5}, Dense{8, 3}}};
  const Model m = make_model(arch, Head::one_hot_ce(3), 5);
  Rng rng(3);
  const Tensor x = roboenc::testing::random_uniform({4, 6}, rng, 0.0, 1.0);
  CHECK(forward(m, x, false, 1) == forward(m, x, false, 2));
  CHECK(forward(m, x, true, 9) == forward(m, x, true, 9));
  CHECK(forward(m, x, true, 9) != forward(m, x, false, 9));
}

TEST_CASE("architecture validation") {
  CHECK_THROWS_AS(make_model(Architecture{{4}, {Dropout{0.5}, Relu{}, Dense{4, 2}}},
                             Head::one_hot_ce(2), 0),
                  ContractError);
  CHECK_THROWS_AS(make_model(Architecture{{4}, {Dense{4, 3}}}, Head::one_hot_ce(2), 0), ShapeError);
  CHECK_THROWS_AS(make_model(Architecture{{4}, {Dense{5, 2}}}, Head::one_hot_ce(2), 0), ShapeError);
  const Architecture a = preset_architecture("net-a", {1, 28, 28}, 200);
  const auto shapes = layer_shapes(a);
  CHECK(shapes[2] == Shape{8, 12, 12});
  CHECK(shapes[4] == Shape{16, 4, 4});
  CHECK(std::get<Dense>(a.layers.back()).in == 256);
  CHECK(layer_shapes(preset_architecture("net-c", {1, 8, 8}, 10)).back() == Shape{10});
}

TEST_CASE("weight init stays inside the fan-in bound") {
  const Model m = make_model(preset_architecture("net-a", {1, 20, 20}, 10), Head::one_hot_ce(10), 4);
  const double conv_bound = std::sqrt(6.0 / 25.0);
  for (double v : m.params[0].data()) CHECK(std::abs(v) <= conv_bound);
  for (double v : m.params[1].data()) CHECK(v == 0.0);
}

TEST_CASE("loss examples") {
  CHECK(loss(Head::one_hot_ce(2), Tensor::vector({0, 0}), 0) == doctest::Approx(std::log(2.0)));

  const Codebook cb = generate_codebook(3, 8, 2.0, 1);
  const Head mse = Head::codebook_mse(cb);
  Tensor target(Shape{8});
  for (std::size_t j = 0; j < 8; ++j) target[j] = cb.row(2)[j];
  CHECK(loss(mse, target, 2) == 0.0);

  Codebook two{2, 2, 1.0, 0, Tensor::matrix({{1, 0}, {0, 1}})};
  CHECK(loss(Head::codebook_mse(two), Tensor::vector({0, 0}), 0) == doctest::Approx(0.5));
  CHECK(loss(Head::one_hot_mse(2), Tensor::vector({0, 0}), 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(loss(Head::one_hot_ce(2), Tensor::vector({0, NAN}), 0), NumericError);
}

TEST_CASE("codebook softmax loss matches its closed form") {
  const Codebook cb = generate_codebook(3, 5, 1.0, 8);
  Rng rng(2);
  const Tensor s = random_normal({5}, rng);
  double norm = 0.0;
  for (double v : s.data()) norm += v * v;
  norm = std::sqrt(norm);
  std::vector<double> logits(3, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) logits[i] += s[j] / norm * cb.row(i)[j];
  double z = 0.0;
  for (double v : logits) z += std::exp(v);
  CHECK(loss(Head::codebook_softmax(cb), s, 1) == doctest::Approx(-(logits[1] - std::log(z))));
}

TEST_CASE("MSE losses are non-negative and vanish only at the target") {
  const Codebook cb = generate_codebook(4, 10, 3.0, 2);
  const Head head = Head::codebook_mse(cb);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = random_normal({10}, rng, 3.0);
    CHECK(loss(head, s, trial % 4) > 0.0);
    CHECK(loss(Head::one_hot_mse(10), s, trial % 10) > 0.0);
  }
}

TEST_CASE("classify examples") {
  const Codebook cb = axis_codebook(4, 4, 1.0);
  const Head head = Head::codebook_mse(cb);
  CHECK(classify(head, cb.row(3)) == 3);
  const std::vector<double> between{0.0, 0.5, 0.5, 0.0};
  CHECK(classify(head, between) == 1);
  const std::vector<double> logits{0.1, 5.0};
  CHECK(classify(Head::one_hot_ce(2), logits) == 1);
  const std::vector<double> tie{2.0, 2.0, 1.0};
  CHECK(classify(Head::one_hot_ce(3), tie) == 0);
}

TEST_CASE("classification commutes with permuting codebook rows") {
  const Codebook cb = generate_codebook(5, 12, 6.0, 3);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Codebook permuted = cb;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 12; ++j) permuted.rows[perm[i] * 12 + j] = cb.row(i)[j];
  }
  Model m = make_model(Architecture{{6}, {Dense{6, 12}}}, Head::codebook_mse(cb), 4);
  Model mp = m;
  mp.head = Head::codebook_mse(permuted);
  Rng rng(1);
  const Tensor x = roboenc::testing::random_uniform({50, 6}, rng, 0.0, 1.0);
  const auto a = predict(m, x);
  const auto b = predict(mp, x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == perm[a[i]]);
}

TEST_CASE("softmax cross-entropy gradient equals y - t") {
  auto check = head_gradient_check(Head::one_hot_ce(2), Tensor::vector({0, 0}), 0);
  CHECK(check.analytic == Tensor::vector({-0.5, 0.5}));
  CHECK(check.max_abs_diff <= 1e-10);

  const Tensor big = Tensor::vector({10, -10});
  check = head_gradient_check(Head::one_hot_ce(2), big, 0);
  const double y1 = 1.0 / (1.0 + std::exp(20.0));
  CHECK(std::abs(check.autodiff[0] + y1) <= 1e-10);
  CHECK(std::abs(check.autodiff[1] - y1) <= 1e-10);
  CHECK(std::abs(y1 - 2.06e-9) < 1e-11);

  Rng rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const Tensor s = random_normal({k}, rng, 4.0);
    worst = std::max(worst, head_gradient_check(Head::one_hot_ce(k), s, rng.below(k)).max_abs_diff);
  }
  CHECK(worst <= 1e-10);
  CHECK_THROWS_AS(head_gradient_check(Head::one_hot_mse(2), big, 0), ContractError);
}

TEST_CASE("one-hot cross-entropy gradients lie in the class hyperoctant") {
  Rng rng(44);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const std::size_t t = rng.below(k);
    const Tensor s = random_normal({k}, rng, 3.0);
    bool interior = true;
    for (std::size_t i = 0; i < k; ++i) {
      const double y = softmax_entry(s, i);
      interior = interior && y > 1e-12 && y < 1 - 1e-12;
    }
    if (!interior) continue;
    ++checked;
    const Tensor g = head_gradient_check(Head::one_hot_ce(k), s, t).autodiff;
    for (std::size_t i = 0; i < k; ++i) {
      if (i == t) CHECK(g[i] < 0.0);
      else CHECK(g[i] > 0.0);
    }
  }
  CHECK(checked > 900);
}

TEST_CASE("input gradient of a zero model is zero") {
  const Codebook cb = generate_codebook(3, 6, 3.0, 1);
  Model m = make_model(preset_architecture("net-c", {1, 4, 4}, 6), Head::codebook_mse(cb), 2);
  for (Tensor& p : m.params) p = Tensor(p.shape(), 0.0);
  Rng rng(1);
  const Tensor g = input_gradient(m, roboenc::testing::random_uniform({1, 4, 4}, rng, 0, 1), 1);
  CHECK(g == Tensor(Shape{1, 4, 4}, 0.0));
}

TEST_CASE("input gradient of a dense MSE model matches the closed form") {
  const std::size_t in = 5, l = 7, k = 3;
  const Codebook cb = generate_codebook(k, l, 3.5, 6);
  const Model m = make_model(Architecture{{in}, {Dense{in, l}}}, Head::codebook_mse(cb), 8);
  Rng rng(4);
  const Tensor x = roboenc::testing::random_uniform({in}, rng, 0, 1);
  const std::size_t t = 2;
  // s = x W + b, dLoss/dx = 2 W (s - C_t) / l
  std::vector<double> resid(l);
  for (std::size_t j = 0; j < l; ++j) {
    double s = m.params[1][j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * m.params[0][i * l + j];
    resid[j] = s - cb.row(t)[j];
  }
  Tensor expected(Shape{in}, 0.0);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < l; ++j) expected[i] += 2.0 * m.params[0][i * l + j] * resid[j] / l;
  CHECK(max_abs_diff(input_gradient(m, x, t), expected) < 1e-12);
}

TEST_CASE("input gradient matches finite differences for every head") {
  Rng rng(19);
  const Codebook cb = generate_codebook(3, 9, 4.5, 2);
  for (const Head& head : {Head::one_hot_ce(3), Head::one_hot_mse(3), Head::codebook_mse(cb),
                           Head::codebook_softmax(cb)}) {
    CAPTURE(head_kind_name(head.kind));
    const Architecture arch{{1, 2, 2},
                            {Conv2d{1, 2, 2, 1}, Relu{}, Flatten{}, Dense{2, 4}, Relu{},
                             Dense{4, head.width()}}};
    Model m = make_model(arch, head, 3);
    // Nonzero output bias keeps s away from the origin when every hidden unit is off.
    m.params.back() = random_normal(m.params.back().shape(), rng);
    const Tensor x = roboenc::testing::random_uniform({1, 2, 2}, rng, 0, 1);
    auto f = [&](const Tensor& xi) { return loss(head, forward(m, xi), 1); };
    CHECK(max_rel_err(input_gradient(m, x, 1), finite_diff_grad(f, x)) < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const Codebook cb = generate_codebook(4, 30, std::nullopt, 5);
  const Model m = make_model(preset_architecture("net-a", {1, 20, 20}, 30), Head::codebook_mse(cb), 6);
  const std::string bytes = encode_model(m);
  CHECK(bytes.substr(0, 4) == "ROMD");
  const Model back = decode_model(bytes);
  CHECK(back == m);
  CHECK(encode_model(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "roboenc_test_model.romd";
  save_model(m, path);
  CHECK(load_model(path) == m);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(decode_model("XXXX" + bytes.substr(4)), FormatError);
  CHECK_THROWS_AS(decode_model(bytes.substr(0, bytes.size() - 8)), FormatError);
}
