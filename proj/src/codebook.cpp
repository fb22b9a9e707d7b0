#include "roboenc/codebook.hpp"

#include <cmath>

#include "roboenc/binary_io.hpp"
#include "roboenc/errors.hpp"
#include "roboenc/rng.hpp"

namespace roboenc {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr double kDegenerateResidual = 1e-8;

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Orthonormalizes `row` in place against the first `count` rows of `basis`.
// Returns false when the row is (numerically) in their span.
bool orthonormalize_against(const double* basis, std::size_t count, std::size_t l, double* row) {
  const double original = std::sqrt(dot(row, row, l));
  if (!(original > 0.0)) return false;
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < count; ++j) {
      const double* e = basis + j * l;
      const double proj = dot(row, e, l);
      for (std::size_t i = 0; i < l; ++i) row[i] -= proj * e[i];
    }
  }
  const double residual = std::sqrt(dot(row, row, l));
  if (residual < kDegenerateResidual * original) return false;
  for (std::size_t i = 0; i < l; ++i) row[i] /= residual;
  return true;
}

}  // namespace

std::span<const double> Codebook::row(std::size_t i) const {
  if (i >= k) throw ContractError("codebook row index out of range");
  return rows.data().subspan(i * l, l);
}

Tensor Codebook::unit_rows() const {
  Tensor out = rows;
  for (double& v : out.data()) v /= beta;
  return out;
}

Tensor gram_schmidt(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("gram_schmidt expects a matrix");
  const std::size_t k = m.shape()[0], l = m.shape()[1];
  if (l < k) throw ContractError("gram_schmidt: more rows than columns");
  Tensor out = m;
  for (std::size_t i = 0; i < k; ++i) {
    double* base = out.data().data();
    if (!orthonormalize_against(base, i, l, base + i * l)) {
      throw DegenerateInput("row " + std::to_string(i) + " is linearly dependent on earlier rows");
    }
  }
  return out;
}

Codebook generate_codebook(std::size_t k, std::size_t l, std::optional<double> beta,
                           std::uint64_t seed) {
  if (k == 0 || l < k) {
    throw ContractError("codebook needs 1 <= k <= l, got k=" + std::to_string(k) +
                        " l=" + std::to_string(l));
  }
  const double b = beta.value_or(static_cast<double>(l) / 2.0);
  if (!(b > 0.0) || !std::isfinite(b)) throw ContractError("codebook beta must be positive");

  Rng rng(seed);
  Tensor e(Shape{k, l});
  for (double& v : e.data()) v = rng.normal();
  double* base = e.data().data();
  for (std::size_t i = 0; i < k; ++i) {
    int attempts = 0;
    while (!orthonormalize_against(base, i, l, base + i * l)) {
      if (++attempts > kMaxResamples) {
        throw GenerationError("row " + std::to_string(i) + " stayed degenerate after " +
                              std::to_string(kMaxResamples) + " resamples");
      }
      for (std::size_t j = 0; j < l; ++j) base[i * l + j] = rng.normal();
    }
  }
  Codebook cb{k, l, b, seed, std::move(e)};
  for (double& v : cb.rows.data()) v *= b;
  validate_codebook(cb);
  return cb;
}

void validate_codebook(const Codebook& cb) {
  if (cb.k == 0 || cb.l < cb.k) throw CorruptCodebook("codebook needs 1 <= k <= l");
  if (!(cb.beta > 0.0) || !std::isfinite(cb.beta)) throw CorruptCodebook("beta must be positive");
  if (cb.rows.shape() != Shape{cb.k, cb.l}) throw CorruptCodebook("row matrix has wrong shape");
  if (!cb.rows.all_finite()) throw CorruptCodebook("non-finite codeword entry");
  const double* base = cb.rows.data().data();
  for (std::size_t i = 0; i < cb.k; ++i) {
    const double norm = std::sqrt(dot(base + i * cb.l, base + i * cb.l, cb.l));
    if (std::abs(norm - cb.beta) > cb.beta * kNormTol) {
      throw CorruptCodebook("row " + std::to_string(i) + " has norm " + std::to_string(norm) +
                            ", expected " + std::to_string(cb.beta));
    }
    for (std::size_t j = 0; j < i; ++j) {
      const double d = dot(base + i * cb.l, base + j * cb.l, cb.l);
      if (std::abs(d) > cb.beta * cb.beta * kOrthogonalityTol) {
        throw CorruptCodebook("rows " + std::to_string(j) + " and " + std::to_string(i) +
                              " are not orthogonal");
      }
    }
  }
}

std::string encode_codebook(const Codebook& cb) {
  io::Writer w;
  w.bytes("ROCB");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(cb.k));
  w.u32(static_cast<std::uint32_t>(cb.l));
  w.f64(cb.beta);
  w.u64(cb.seed);
  w.f64s(cb.rows.data());
  return w.buffer();
}

Codebook decode_codebook(std::string bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic("ROCB");
  if (const auto v = r.u32(); v != kVersion) {
    throw FormatError("unsupported codebook version " + std::to_string(v));
  }
  Codebook cb;
  cb.k = r.u32();
  cb.l = r.u32();
  cb.beta = r.f64();
  cb.seed = r.u64();
  if (cb.k == 0 || cb.l == 0) throw FormatError("codebook with empty shape");
  if (r.remaining() != cb.k * cb.l * 8) {
    throw FormatError("codebook payload does not match k*l");
  }
  cb.rows = Tensor(Shape{cb.k, cb.l}, r.f64s(cb.k * cb.l));
  validate_codebook(cb);
  return cb;
}

void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  io::write_file(path, encode_codebook(cb));
}

Codebook load_codebook(const std::filesystem::path& path) {
  return decode_codebook(io::read_file(path));
}

nlohmann::json codebook_to_json(const Codebook& cb) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < cb.k; ++i) {
    auto r = cb.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return {{"k", cb.k}, {"l", cb.l}, {"beta", cb.beta}, {"seed", cb.seed}, {"rows", rows}};
}

}  // namespace roboenc
