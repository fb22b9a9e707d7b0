#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "roboenc/binary_io.hpp"
#include "roboenc/codebook.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/network.hpp"
#include "test_util.hpp"

using namespace roboenc;
namespace fs = std::filesystem;

namespace {

double row_dot(const Tensor& m, std::size_t i, std::size_t j) {
  const std::size_t l = m.shape()[1];
  double s = 0.0;
  for (std::size_t c = 0; c < l; ++c) s += m[i * l + c] * m[j * l + c];
  return s;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("roboenc_test_" + name);
}

}  // namespace

TEST_CASE("gram_schmidt hand example") {
  const Tensor e = gram_schmidt(Tensor::matrix({{1, 0, 0}, {1, 1, 0}}));
  CHECK(e == Tensor::matrix({{1, 0, 0}, {0, 1, 0}}));
}

TEST_CASE("gram_schmidt leaves an orthonormal matrix unchanged") {
  const double c = std::sqrt(0.5);
  const Tensor m = Tensor::matrix({{c, c, 0}, {c, -c, 0}, {0, 0, 1}});
  CHECK(max_abs_diff(gram_schmidt(m), m) <= 1e-12);
}

TEST_CASE("gram_schmidt on a seeded 10x2000 matrix is orthonormal") {
  Rng rng(31);
  const Tensor e = gram_schmidt(roboenc::testing::random_normal({10, 2000}, rng));
  double worst_off = 0.0, worst_norm = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    worst_norm = std::max(worst_norm, std::abs(row_dot(e, i, i) - 1.0));
    for (std::size_t j = 0; j < i; ++j) worst_off = std::max(worst_off, std::abs(row_dot(e, i, j)));
  }
  CHECK(worst_off < 1e-10);
  CHECK(worst_norm < 1e-10);
}

TEST_CASE("gram_schmidt rejects dependent rows") {
  CHECK_THROWS_AS(gram_schmidt(Tensor::matrix({{1, 2, 3}, {2, 4, 6}})), DegenerateInput);
  CHECK_THROWS_AS(gram_schmidt(Tensor::matrix({{1, 0}, {0, 1}, {1, 1}})), ContractError);
}

TEST_CASE("generate_codebook at the reference parameters") {
  const Codebook cb = generate_codebook(10, 2000, 1000.0, 7);
  for (std::size_t i = 0; i < cb.k; ++i) {
    double n = 0.0;
    for (double v : cb.row(i)) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1000.0) <= 1e-9);
  }
}

TEST_CASE("generate_codebook invariants across sizes") {
  for (auto [k, l] : {std::pair<std::size_t, std::size_t>{10, 10}, {10, 200}, {10, 2000}, {2, 2}}) {
    CAPTURE(l);
    const Codebook cb = generate_codebook(k, l, std::nullopt, 3);
    CHECK(cb.beta == static_cast<double>(l) / 2.0);
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(std::abs(std::sqrt(row_dot(cb.rows, i, i)) - cb.beta) <= cb.beta * 1e-12);
      for (std::size_t j = 0; j < i; ++j) {
        CHECK(std::abs(row_dot(cb.rows, i, j)) <= cb.beta * cb.beta * 1e-9);
      }
    }
  }
}

TEST_CASE("generate_codebook contract") {
  CHECK(generate_codebook(4, 50, 2.0, 9) == generate_codebook(4, 50, 2.0, 9));
  CHECK_THROWS_AS(generate_codebook(5, 4, 1.0, 1), ContractError);
  CHECK_THROWS_AS(generate_codebook(2, 4, -1.0, 1), ContractError);
  const Codebook small = generate_codebook(2, 2, 1.0, 5);
  CHECK(std::abs(row_dot(small.rows, 0, 1)) < 1e-12);
}

TEST_CASE("distinct seeds give nearly uncorrelated codewords") {
  const Codebook a = generate_codebook(10, 200, std::nullopt, 1);
  const Codebook b = generate_codebook(10, 200, std::nullopt, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < 200; ++c) d += a.row(i)[c] * b.row(j)[c];
      CHECK(std::abs(d) / (a.beta * b.beta) < 0.25);
    }
  }
}

TEST_CASE("argmin classification is invariant to a joint orthogonal transform") {
  Rng rng(77);
  const Codebook cb = generate_codebook(4, 6, 1.5, 21);
  const Tensor q = gram_schmidt(roboenc::testing::random_normal({6, 6}, rng));
  auto rotate = [&](std::span<const double> v) {
    std::vector<double> out(6, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) out[i] += q[i * 6 + j] * v[j];
    return out;
  };
  Codebook rotated = cb;
  for (std::size_t i = 0; i < cb.k; ++i) {
    const auto r = rotate(cb.row(i));
    std::copy(r.begin(), r.end(), rotated.rows.data().begin() + static_cast<std::ptrdiff_t>(i * 6));
  }
  const Head head = Head::codebook_mse(cb);
  const Head head_rot = Head::codebook_mse(rotated);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor s = roboenc::testing::random_normal({6}, rng);
    CHECK(classify(head, s.data()) == classify(head_rot, rotate(s.data())));
  }
}

TEST_CASE("codebook file round trip and validation") {
  const Codebook cb = generate_codebook(3, 12, 4.0, 123);
  const fs::path path = temp_file("cb.rocb");
  save_codebook(cb, path);
  CHECK(load_codebook(path) == cb);

  std::string bytes = io::read_file(path);
  CHECK(bytes.substr(0, 4) == "ROCB");
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 8 + 8 + 3 * 12 * 8);

  CHECK_THROWS_AS(decode_codebook(bytes.substr(0, bytes.size() - 5)), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_codebook(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_codebook(bad_version), FormatError);

  Codebook perturbed = cb;
  perturbed.rows[12] += 0.5;  // row 1, entry 0
  CHECK_THROWS_AS(decode_codebook(encode_codebook(perturbed)), CorruptCodebook);
  fs::remove(path);
}

TEST_CASE("codebook JSON mirror") {
  const Codebook cb = generate_codebook(2, 3, 1.0, 4);
  const auto j = codebook_to_json(cb);
  CHECK(j["k"] == 2);
  CHECK(j["rows"].size() == 2);
  CHECK(j["rows"][1][2].get<double>() == cb.row(1)[2]);
}
