#pragma once

#include <cstdint>
#include <string_view>

namespace rematch {

// Seedable generator with a portable output sequence (xoshiro256** seeded via
// splitmix64). Distributions are implemented here rather than taken from
// <random> so a seed reproduces the same stream on every standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

    // Independent child stream, a pure function of this generator's seed and
    // `stream`. Does not advance this generator.
    Rng split(std::uint64_t stream) const;
    Rng split(std::string_view name) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace rematch
