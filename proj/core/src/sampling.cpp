#include "fracimp/sampling.hpp"

#include "fracimp/error.hpp"

#include <algorithm>
#include <numeric>

namespace fracimp {

PpsSample systematic_pps(std::span<const double> sizes, std::size_t m, Rng& rng)
{
    std::vector<std::size_t> live;
    for (std::size_t j = 0; j < sizes.size(); ++j) {
        require(sizes[j] >= 0.0, "systematic_pps: sizes must be nonnegative");
        if (sizes[j] > 0.0) {
            live.push_back(j);
        }
    }
    PpsSample out;
    if (m >= live.size()) {
        out.selected = live;
        out.inclusion.assign(live.size(), 1.0);
        return out;
    }
    if (m == 0) {
        return out;
    }

    std::vector<bool> certain(sizes.size(), false);
    std::size_t remaining = m;
    for (bool changed = true; changed && remaining > 0;) {
        changed = false;
        double total = 0.0;
        for (auto j : live) {
            if (!certain[j]) {
                total += sizes[j];
            }
        }
        for (auto j : live) {
            if (!certain[j] && static_cast<double>(remaining) * sizes[j] >= total) {
                certain[j] = true;
                --remaining;
                changed = true;
                break;
            }
        }
    }

    std::vector<std::size_t> rest;
    double total = 0.0;
    for (auto j : live) {
        if (certain[j]) {
            out.selected.push_back(j);
        } else {
            rest.push_back(j);
            total += sizes[j];
        }
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    if (remaining > 0) {
        const double u = uniform01(rng);
        double cumulative = 0.0;
        std::size_t next = 0;
        for (auto j : rest) {
            const double pi = static_cast<double>(remaining) * sizes[j] / total;
            const double lo = cumulative;
            cumulative += pi;
            // Selected when a point u + k falls in [lo, cumulative).
            if (next < remaining && u + static_cast<double>(next) >= lo && u + static_cast<double>(next) < cumulative) {
                out.selected.push_back(j);
                ++next;
            }
        }
        // Rounding can leave the last point just past the end.
        if (next < remaining) {
            for (auto it = rest.rbegin(); it != rest.rend() && next < remaining; ++it) {
                if (std::find(out.selected.begin(), out.selected.end(), *it) == out.selected.end()) {
                    out.selected.push_back(*it);
                    ++next;
                }
            }
        }
    }
    std::sort(out.selected.begin(), out.selected.end());
    out.inclusion.resize(out.selected.size());
    for (std::size_t k = 0; k < out.selected.size(); ++k) {
        const auto j = out.selected[k];
        out.inclusion[k] = certain[j] ? 1.0 : static_cast<double>(remaining) * sizes[j] / total;
    }
    return out;
}

std::vector<double> pps_shares(std::span<const double> sizes, const PpsSample& sample)
{
    std::vector<double> share(sample.selected.size());
    double total = 0.0;
    for (std::size_t k = 0; k < share.size(); ++k) {
        share[k] = sizes[sample.selected[k]] / sample.inclusion[k];
        total += share[k];
    }
    for (auto& s : share) {
        s /= total;
    }
    return share;
}

std::vector<std::size_t> systematic_counts(std::span<const double> sizes, std::size_t m, Rng& rng)
{
    std::vector<std::size_t> order;
    double total = 0.0;
    for (std::size_t j = 0; j < sizes.size(); ++j) {
        require(sizes[j] >= 0.0, "systematic_counts: sizes must be nonnegative");
        if (sizes[j] > 0.0) {
            order.push_back(j);
            total += sizes[j];
        }
    }
    std::vector<std::size_t> counts(sizes.size(), 0);
    if (m == 0 || order.empty()) {
        return counts;
    }
    std::shuffle(order.begin(), order.end(), rng);
    const double u = uniform01(rng);
    double cumulative = 0.0;
    std::size_t next = 0;
    for (auto j : order) {
        cumulative += static_cast<double>(m) * sizes[j] / total;
        while (next < m && u + static_cast<double>(next) < cumulative) {
            ++counts[j];
            ++next;
        }
    }
    if (next < m) {
        counts[order.back()] += m - next;
    }
    return counts;
}

} // namespace fracimp
