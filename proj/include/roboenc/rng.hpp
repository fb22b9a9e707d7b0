#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace roboenc {

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

// Seed splitting: derive_seed(master, "train") is a splitmix64 finalization of
// master mixed with fnv1a64("train"). Adding a new component name never
// changes the seeds of existing ones.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// Seeded generator with platform-independent distributions (the standard
// <random> distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // -1 or +1 with equal probability.
  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace roboenc
