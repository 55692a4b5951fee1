#pragma once

#include "fracimp/rng.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace fracimp {

struct PpsSample {
    // Selected positions in the size vector, ascending.
    std::vector<std::size_t> selected;
    // Inclusion probability of each selected position.
    std::vector<double> inclusion;
};

// Systematic PPS of m positions with probability proportional to `sizes`,
// after a random reordering of the list. Positions whose share would reach
// one are taken with certainty first. Zero sizes are never selected; if m
// covers every positive size, all are taken.
PpsSample systematic_pps(std::span<const double> sizes, std::size_t m, Rng& rng);

// Normalized Horvitz-Thompson shares size_j / inclusion_j of a PPS sample.
std::vector<double> pps_shares(std::span<const double> sizes, const PpsSample& sample);

// Systematic selection of m points on the cumulated sizes of a randomly
// reordered list. Returns how often each position was hit; the expected count
// of position j is m * size_j / sum(sizes).
std::vector<std::size_t> systematic_counts(std::span<const double> sizes, std::size_t m, Rng& rng);

} // namespace fracimp
