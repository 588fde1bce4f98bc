#pragma once

#include <cstdint>
#include <string_view>

namespace spade {

/// splitmix64 finaliser; used to expand one seed into many.
std::uint64_t mix_seed(std::uint64_t x);

/// Named sub-seed: stable across platforms and runs.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Small deterministic generator (xoshiro256**) with portable bounded and
/// normal draws, so corpora and initial weights do not depend on the
/// standard library's distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next();
    /// Uniform integer in [0, bound).
    std::uint64_t uniform_int(std::uint64_t bound);
    /// Uniform integer in [lo, hi].
    std::uint64_t uniform_range(std::uint64_t lo, std::uint64_t hi) { return lo + uniform_int(hi - lo + 1); }
    /// Uniform double in [0, 1).
    double uniform();
    double normal();

  private:
    std::uint64_t s_[4];
};

}  // namespace spade
