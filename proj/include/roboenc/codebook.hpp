#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>

#include <nlohmann/json.hpp>

#include "roboenc/tensor.hpp"

namespace roboenc {

// Random Orthogonal output encoding: k class codewords of length l, each
// beta times a unit vector, mutually orthogonal.
struct Codebook {
  std::size_t k = 0;
  std::size_t l = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  Tensor rows;  // [k, l], row i is the codeword of class i

  std::span<const double> row(std::size_t i) const;
  // rows / beta
  Tensor unit_rows() const;

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

inline constexpr double kOrthogonalityTol = 1e-9;  // relative to beta^2
inline constexpr double kNormTol = 1e-12;          // relative to beta
inline constexpr int kMaxResamples = 8;

// Modified Gram-Schmidt with one re-orthogonalization pass over the rows of
// `m` ([k, l], l >= k). Throws DegenerateInput when a row's residual after
// projection falls below 1e-8 of its original norm.
Tensor gram_schmidt(const Tensor& m);

// Draws M ~ N(0,1)^{k x l} from `seed`, orthonormalizes it and scales every
// row to `beta` (l / 2 when absent). Degenerate rows are redrawn up to
// kMaxResamples times.
Codebook generate_codebook(std::size_t k, std::size_t l, std::optional<double> beta,
                           std::uint64_t seed);

// Throws CorruptCodebook when the orthogonality or norm invariant fails.
void validate_codebook(const Codebook& cb);

// Binary layout: "ROCB", u32 version (1), u32 k, u32 l, f64 beta, u64 seed,
// k*l f64 row-major. All little-endian.
void save_codebook(const Codebook& cb, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);
std::string encode_codebook(const Codebook& cb);
Codebook decode_codebook(std::string bytes);

nlohmann::json codebook_to_json(const Codebook& cb);

}  // namespace roboenc
