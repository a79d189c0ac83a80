#pragma once

#include <array>
#include <cstdint>

namespace han {

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

/// xoshiro256** seeded through splitmix64.
///
/// The stream is a pure function of the seed, so parameter initialization and
/// synthetic data are reproducible on any platform. Gaussian draws use the
/// Box-Muller transform on two uniforms; no standard-library distributions are
/// involved because their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

// Independent child seed for stream `index` derived from `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept;

}  // namespace han
