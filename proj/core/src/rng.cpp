#include "fracimp/rng.hpp"

namespace fracimp {

std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index) noexcept
{
    auto h = splitmix64(seed);
    h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
    return splitmix64(h ^ index);
}

Rng substream(std::uint64_t seed, Stream stream, std::uint64_t index) noexcept
{
    const auto s = derive_seed(seed, stream, index);
    std::seed_seq seq { static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32) };
    return Rng(seq);
}

double uniform01(Rng& rng)
{
    // 53 random bits, never returns 1.
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(Rng& rng)
{
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

} // namespace fracimp
