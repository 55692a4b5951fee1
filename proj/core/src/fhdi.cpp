#include "fracimp/fhdi.hpp"

#include "fracimp/error.hpp"
#include "fracimp/parallel.hpp"
#include "fracimp/rng.hpp"
#include "fracimp/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace fracimp {

std::optional<std::size_t> CategoricalJointModel::index_of(const std::vector<int>& z) const
{
    for (std::size_t g = 0; g < support.size(); ++g) {
        if (support[g] == z) {
            return g;
        }
    }
    return std::nullopt;
}

namespace {

struct UnitCodes {
    std::vector<int> codes;
    std::vector<bool> observed;
    bool complete = true;
};

std::vector<UnitCodes> unit_codes(const SurveyDataset& data, const std::vector<std::size_t>& items)
{
    std::vector<UnitCodes> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        auto& c = out[i];
        c.codes.assign(items.size(), -1);
        c.observed.assign(items.size(), false);
        for (std::size_t k = 0; k < items.size(); ++k) {
            const auto& v = u.values.at(items[k]);
            if (v) {
                c.codes[k] = static_cast<int>(*v);
                c.observed[k] = true;
            } else {
                c.complete = false;
            }
        }
    }
    return out;
}

bool matches(const UnitCodes& u, const std::vector<int>& z)
{
    for (std::size_t k = 0; k < z.size(); ++k) {
        if (u.observed[k] && u.codes[k] != z[k]) {
            return false;
        }
    }
    return true;
}

} // namespace

CategoricalEMResult categorical_em(const SurveyDataset& data, const std::vector<std::size_t>& items,
    const CategoricalEMOptions& options)
{
    require(!items.empty(), "categorical_em: no items");
    for (auto k : items) {
        require(k < data.item_count(), "categorical_em: item out of range");
        if (data.items()[k].kind != ItemKind::categorical) {
            fail(ErrorCode::contract, "categorical_em: item '" + data.items()[k].name + "' is not categorical");
        }
    }
    const auto codes = unit_codes(data, items);

    CategoricalEMResult res;
    res.model.items = items;
    std::map<std::vector<int>, std::size_t> index;
    for (const auto& c : codes) {
        if (c.complete && index.emplace(c.codes, 0).second) {
            res.model.support.push_back(c.codes);
        }
    }
    if (res.model.support.empty()) {
        fail(ErrorCode::identifiability, "categorical_em: no full respondents to define the support");
    }
    std::sort(res.model.support.begin(), res.model.support.end());
    for (std::size_t g = 0; g < res.model.support.size(); ++g) {
        index[res.model.support[g]] = g;
    }
    const auto G = res.model.support.size();

    // Candidate sets; complete units hold their own support point.
    std::vector<std::vector<std::size_t>> cand(data.size());
    std::vector<bool> usable(data.size(), true);
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (codes[i].complete) {
            cand[i] = { index.at(codes[i].codes) };
            continue;
        }
        for (std::size_t g = 0; g < G; ++g) {
            if (matches(codes[i], res.model.support[g])) {
                cand[i].push_back(g);
            }
        }
        if (cand[i].empty()) {
            usable[i] = false;
            res.unimputable.push_back(i);
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (usable[i]) {
            total += data.unit(i).weight;
        }
    }

    std::vector<std::vector<double>> wstar(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        wstar[i].assign(cand[i].size(), cand[i].empty() ? 0.0 : 1.0 / static_cast<double>(cand[i].size()));
    }

    const auto m_step = [&] {
        std::vector<double> share(G, 0.0);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double w = data.unit(i).weight;
            for (std::size_t j = 0; j < cand[i].size(); ++j) {
                share[cand[i][j]] += w * wstar[i][j];
            }
        }
        for (auto& s : share) {
            s /= total;
        }
        if (!options.mstep) {
            return share;
        }
        auto pi = options.mstep(res.model.support, share);
        if (pi.size() != G) {
            fail(ErrorCode::contract, "categorical_em: M-step hook returned the wrong number of probabilities");
        }
        double s = 0.0;
        for (double p : pi) {
            if (!(p >= 0.0)) {
                fail(ErrorCode::contract, "categorical_em: M-step hook returned a negative probability");
            }
            s += p;
        }
        for (auto& p : pi) {
            p /= s;
        }
        return pi;
    };
    const auto loglik = [&](const std::vector<double>& pi) {
        double l = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!usable[i]) {
                continue;
            }
            double s = 0.0;
            for (auto g : cand[i]) {
                s += pi[g];
            }
            l += data.unit(i).weight * std::log(s);
        }
        return l;
    };

    std::vector<double> pi = m_step();
    res.loglik_trace.push_back(loglik(pi));
    for (std::size_t it = 1; it <= options.max_iter; ++it) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            double s = 0.0;
            for (auto g : cand[i]) {
                s += pi[g];
            }
            for (std::size_t j = 0; j < cand[i].size(); ++j) {
                wstar[i][j] = s > 0.0 ? pi[cand[i][j]] / s : 1.0 / static_cast<double>(cand[i].size());
            }
        }
        const auto next = m_step();
        double change = 0.0;
        for (std::size_t g = 0; g < G; ++g) {
            change = std::max(change, std::abs(next[g] - pi[g]));
        }
        pi = next;
        res.loglik_trace.push_back(loglik(pi));
        res.iterations = it;
        if (change < options.tol) {
            res.converged = true;
            break;
        }
    }
    res.model.probabilities = pi;

    // Final E-step at the returned probabilities.
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (codes[i].complete || !usable[i]) {
            continue;
        }
        DonorPool pool;
        pool.unit = i;
        pool.candidates = cand[i];
        double s = 0.0;
        for (auto g : cand[i]) {
            s += pi[g];
        }
        for (auto g : cand[i]) {
            pool.weights.push_back(s > 0.0 ? pi[g] / s : 1.0 / static_cast<double>(cand[i].size()));
        }
        res.pools.push_back(std::move(pool));
    }
    return res;
}

double categorical_loglik(const SurveyDataset& data, const CategoricalJointModel& model)
{
    const auto codes = unit_codes(data, model.items);
    double l = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        double s = 0.0;
        for (std::size_t g = 0; g < model.support.size(); ++g) {
            if (matches(codes[i], model.support[g])) {
                s += model.probabilities[g];
            }
        }
        if (s > 0.0) {
            l += data.unit(i).weight * std::log(s);
        }
    }
    return l;
}

// ---------------------------------------------------------------------------
// Discretization

int Discretizer::code(std::size_t k, double v) const
{
    const auto& b = breakpoints.at(k);
    return static_cast<int>(std::lower_bound(b.begin(), b.end(), v) - b.begin());
}

DiscretizedData discretize(const SurveyDataset& data, const std::vector<std::size_t>& items, std::size_t k)
{
    require(k >= 2, "discretize: k must be at least 2");
    require(!items.empty(), "discretize: no items");
    Discretizer disc;
    disc.items = items;
    std::vector<Item> shadow_items;
    for (auto item : items) {
        require(item < data.item_count(), "discretize: item out of range");
        const auto& meta = data.items()[item];
        if (meta.kind == ItemKind::categorical) {
            disc.breakpoints.emplace_back();
            std::size_t levels = meta.labels.size();
            for (const auto& u : data.units()) {
                if (u.values[item]) {
                    levels = std::max(levels, static_cast<std::size_t>(*u.values[item]) + 1);
                }
            }
            disc.categories.push_back(levels);
            shadow_items.push_back(meta);
            continue;
        }
        std::vector<double> v;
        for (const auto& u : data.units()) {
            if (u.values[item]) {
                v.push_back(*u.values[item]);
            }
        }
        std::sort(v.begin(), v.end());
        if (v.empty() || v.front() == v.back()) {
            fail(ErrorCode::validation, "discretize: item '" + meta.name + "' is constant or unobserved");
        }
        std::vector<double> cuts;
        const auto n = v.size();
        for (std::size_t j = 1; j < k; ++j) {
            // Smallest order statistic with empirical CDF >= j / k.
            const auto rank = (j * n + k - 1) / k;
            const double q = v[std::max<std::size_t>(rank, 1) - 1];
            if (q < v.back() && (cuts.empty() || q > cuts.back())) {
                cuts.push_back(q);
            }
        }
        if (cuts.empty()) {
            fail(ErrorCode::validation, "discretize: item '" + meta.name + "' has too few distinct values");
        }
        disc.categories.push_back(cuts.size() + 1);
        disc.breakpoints.push_back(std::move(cuts));
        Item shadow { meta.name, ItemKind::categorical, {} };
        for (std::size_t c = 0; c < disc.categories.back(); ++c) {
            shadow.labels.push_back(std::to_string(c));
        }
        shadow_items.push_back(std::move(shadow));
    }

    std::vector<UnitRecord> units;
    units.reserve(data.size());
    for (const auto& u : data.units()) {
        UnitRecord s { u.id, u.weight, {} };
        s.values.resize(items.size());
        for (std::size_t k2 = 0; k2 < items.size(); ++k2) {
            const auto& v = u.values[items[k2]];
            if (!v) {
                continue;
            }
            s.values[k2] = disc.breakpoints[k2].empty() ? *v : static_cast<double>(disc.code(k2, *v));
        }
        units.push_back(std::move(s));
    }
    return DiscretizedData { SurveyDataset(std::move(shadow_items), std::move(units), data.strata()), std::move(disc) };
}

// ---------------------------------------------------------------------------
// Donor selection

FhdiResult fhdi_continuous(std::shared_ptr<const SurveyDataset> data, const DiscretizedData& cells,
    const CategoricalEMResult& cell_model, std::uint64_t seed, const FhdiOptions& options)
{
    require(data != nullptr, "fhdi_continuous: null data set");
    require(cells.shadow.size() == data->size(), "fhdi_continuous: shadow data does not match the data set");
    require(options.donors_per_cell >= 1, "fhdi_continuous: donors_per_cell must be at least 1");
    const auto& items = cells.discretizer.items;
    const auto& support = cell_model.model.support;
    const auto G = support.size();
    const auto shadow_codes = unit_codes(cells.shadow, cell_model.model.items);

    // Full respondents per support cell.
    std::vector<std::vector<std::size_t>> donors(G);
    for (std::size_t i = 0; i < data->size(); ++i) {
        if (!shadow_codes[i].complete) {
            continue;
        }
        if (auto g = cell_model.model.index_of(shadow_codes[i].codes)) {
            donors[*g].push_back(i);
        }
    }
    const auto nearest_with_donors = [&](std::size_t g) -> std::optional<std::size_t> {
        std::optional<std::size_t> best;
        long best_d = 0;
        for (std::size_t h = 0; h < G; ++h) {
            if (donors[h].empty()) {
                continue;
            }
            long d = 0;
            for (std::size_t k = 0; k < support[g].size(); ++k) {
                d += std::labs(static_cast<long>(support[g][k]) - support[h][k]);
            }
            if (!best || d < best_d) {
                best = h;
                best_d = d;
            }
        }
        return best;
    };

    std::vector<const DonorPool*> pool_of(data->size(), nullptr);
    for (const auto& p : cell_model.pools) {
        require(p.unit < data->size(), "fhdi_continuous: pool refers to an unknown unit");
        pool_of[p.unit] = &p;
    }

    struct UnitRows {
        std::vector<int> donor;
        std::vector<double> values;
        std::vector<double> weight;
        std::vector<std::string> warnings;
    };
    std::vector<UnitRows> rows(data->size());
    const auto stride = data->item_count();

    parallel_for(data->size(), options.threads, [&](std::size_t i) {
        const auto& u = data->unit(i);
        auto& out = rows[i];
        const auto y = data->filled_values(i);
        if (MissingPattern::of(u).complete()) {
            out.donor.push_back(0);
            out.values = y;
            out.weight.push_back(1.0);
            return;
        }
        for (std::size_t k = 0; k < stride; ++k) {
            if (!u.values[k] && std::find(items.begin(), items.end(), k) == items.end()) {
                fail(ErrorCode::contract, "unit '" + u.id + "' is missing item '" + data->items()[k].name
                        + "', which is not in the cell model");
            }
        }
        const auto* pool = pool_of[i];
        if (pool == nullptr) {
            return;
        }
        auto rng = substream(seed, Stream::donor, i);
        for (std::size_t c = 0; c < pool->candidates.size(); ++c) {
            const double p = pool->weights[c];
            if (p == 0.0) {
                continue;
            }
            auto g = pool->candidates[c];
            if (donors[g].empty()) {
                const auto h = nearest_with_donors(g);
                if (!h) {
                    fail(ErrorCode::no_solution, "fhdi: no donor cell has any full respondent");
                }
                out.warnings.push_back("unit '" + u.id + "': empty donor cell collapsed into its nearest cell");
                g = *h;
            }
            const auto& cell = donors[g];
            std::vector<double> sizes(cell.size());
            for (std::size_t d = 0; d < cell.size(); ++d) {
                sizes[d] = data->unit(cell[d]).weight;
            }
            const auto sample = systematic_pps(sizes, options.donors_per_cell, rng);
            const auto share = pps_shares(sizes, sample);
            for (std::size_t s = 0; s < sample.selected.size(); ++s) {
                const auto d = cell[sample.selected[s]];
                const auto dy = data->filled_values(d);
                auto row = y;
                for (auto k : items) {
                    if (!u.values[k]) {
                        row[k] = dy[k];
                    }
                }
                out.donor.push_back(static_cast<int>(d));
                out.values.insert(out.values.end(), row.begin(), row.end());
                out.weight.push_back(p * share[s]);
            }
        }
        double total = 0.0;
        for (double w : out.weight) {
            total += w;
        }
        for (auto& w : out.weight) {
            w /= total;
        }
    });

    FractionalBuilder builder(data);
    FhdiResult res;
    for (std::size_t i = 0; i < data->size(); ++i) {
        auto& r = rows[i];
        if (r.weight.empty()) {
            builder.mark_unimputed(i);
            res.warnings.push_back("unit '" + data->unit(i).id + "' has no donor candidates and is left unimputed");
            continue;
        }
        for (std::size_t k = 0; k < r.weight.size(); ++k) {
            builder.add(i, r.donor[k], std::span<const double>(r.values.data() + k * stride, stride), r.weight[k]);
        }
        res.warnings.insert(res.warnings.end(), r.warnings.begin(), r.warnings.end());
    }
    res.fdata = std::move(builder).build();
    return res;
}

FractionalDataset fefi_categorical(std::shared_ptr<const SurveyDataset> data, const CategoricalEMResult& cell_model)
{
    require(data != nullptr, "fefi_categorical: null data set");
    const auto& items = cell_model.model.items;
    std::vector<const DonorPool*> pool_of(data->size(), nullptr);
    for (const auto& p : cell_model.pools) {
        pool_of.at(p.unit) = &p;
    }
    FractionalBuilder builder(data);
    for (std::size_t i = 0; i < data->size(); ++i) {
        const auto& u = data->unit(i);
        auto y = data->filled_values(i);
        if (MissingPattern::of(u).complete()) {
            builder.add(i, 0, y, 1.0);
            continue;
        }
        const auto* pool = pool_of[i];
        if (pool == nullptr) {
            builder.mark_unimputed(i);
            continue;
        }
        for (std::size_t c = 0; c < pool->candidates.size(); ++c) {
            const auto& z = cell_model.model.support[pool->candidates[c]];
            auto row = y;
            for (std::size_t k = 0; k < items.size(); ++k) {
                row[items[k]] = z[k];
            }
            builder.add(i, static_cast<int>(pool->candidates[c]), row, pool->weights[c]);
        }
    }
    return std::move(builder).build();
}

double within_cell_correlation(const SurveyDataset& data, const DiscretizedData& cells, std::size_t item_a,
    std::size_t item_b)
{
    std::vector<std::size_t> all(cells.shadow.item_count());
    for (std::size_t k = 0; k < all.size(); ++k) {
        all[k] = k;
    }
    const auto codes = unit_codes(cells.shadow, all);
    std::map<std::vector<int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        if (codes[i].complete && u.values.at(item_a) && u.values.at(item_b)) {
            groups[codes[i].codes].push_back(i);
        }
    }
    double worst = 0.0;
    for (const auto& [cell, members] : groups) {
        if (members.size() < 3) {
            continue;
        }
        double sw = 0.0;
        double ma = 0.0;
        double mb = 0.0;
        for (auto i : members) {
            const double w = data.unit(i).weight;
            sw += w;
            ma += w * *data.unit(i).values[item_a];
            mb += w * *data.unit(i).values[item_b];
        }
        ma /= sw;
        mb /= sw;
        double saa = 0.0;
        double sbb = 0.0;
        double sab = 0.0;
        for (auto i : members) {
            const double w = data.unit(i).weight;
            const double a = *data.unit(i).values[item_a] - ma;
            const double b = *data.unit(i).values[item_b] - mb;
            saa += w * a * a;
            sbb += w * b * b;
            sab += w * a * b;
        }
        if (saa > 0.0 && sbb > 0.0) {
            worst = std::max(worst, std::abs(sab / std::sqrt(saa * sbb)));
        }
    }
    return worst;
}

std::string cell_model_csv(const SurveyDataset& data, const CategoricalJointModel& model)
{
    std::ostringstream out;
    for (auto k : model.items) {
        out << quote_csv_field(data.items().at(k).name) << ',';
    }
    out << "probability\n";
    for (std::size_t g = 0; g < model.support.size(); ++g) {
        for (std::size_t k = 0; k < model.items.size(); ++k) {
            const auto& labels = data.items()[model.items[k]].labels;
            const auto code = static_cast<std::size_t>(model.support[g][k]);
            out << quote_csv_field(code < labels.size() ? labels[code] : std::to_string(code)) << ',';
        }
        out << format_double(model.probabilities[g]) << '\n';
    }
    return out.str();
}

} // namespace fracimp
