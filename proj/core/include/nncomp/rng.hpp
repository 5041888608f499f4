// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

namespace nncomp {

/// xoshiro256** seeded through splitmix64. The single PRNG family behind every
/// stochastic component; streams are derived from a master seed by purpose so
/// one seed reproduces a whole run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Independent stream for `purpose` (e.g. "init", "shuffle/epoch3").
  static Rng derive(std::uint64_t master_seed, std::string_view purpose);

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept;
  /// Standard normal via Box-Muller (cached second variate).
  double normal() noexcept;
  /// Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;

}  // namespace nncomp
