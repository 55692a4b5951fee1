#pragma once

#include <cstdint>
#include <random>

namespace fracimp {

using Rng = std::mt19937_64;

// Named substreams. Every random draw in the library comes from
// substream(seed, stream, index) so results do not depend on the order in
// which units or replicates are processed.
enum class Stream : std::uint64_t {
    imputation = 1,
    sir = 2,
    donor = 3,
    pps = 4,
    posterior = 5,
    population = 6,
    sample = 7,
    response = 8,
    replicate = 9,
    proposal = 10,
    reselect = 11,
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

Rng substream(std::uint64_t seed, Stream stream, std::uint64_t index) noexcept;

// Derives a child seed, e.g. one per Monte Carlo replicate.
std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index) noexcept;

double uniform01(Rng& rng);
double standard_normal(Rng& rng);

} // namespace fracimp
