#pragma once

#include "fracimp/dataset.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fracimp {

// Joint probabilities over the support of the full respondents.
struct CategoricalJointModel {
    std::vector<std::size_t> items;
    std::vector<std::vector<int>> support;
    std::vector<double> probabilities;

    [[nodiscard]] std::optional<std::size_t> index_of(const std::vector<int>& z) const;
};

// Candidate completions of one recipient, as support indices, with their
// fractional weights.
struct DonorPool {
    std::size_t unit = 0;
    std::vector<std::size_t> candidates;
    std::vector<double> weights;
};

// Replaces the saturated M-step. Receives the support and the expected
// weighted shares of each support point; returns probabilities.
using CategoricalMStep = std::function<std::vector<double>(const std::vector<std::vector<int>>& support,
    const std::vector<double>& expected_shares)>;

struct CategoricalEMResult {
    CategoricalJointModel model;
    // One pool per unit with a missing item among the modeled items.
    std::vector<DonorPool> pools;
    // Recipients with an empty candidate set.
    std::vector<std::size_t> unimputable;
    // Observed-data log-likelihood after every M-step.
    std::vector<double> loglik_trace;
    std::size_t iterations = 0;
    bool converged = false;
};

struct CategoricalEMOptions {
    std::size_t max_iter = 1000;
    // Stops when max |pi_new - pi_old| < tol.
    double tol = 1e-10;
    CategoricalMStep mstep;
};

CategoricalEMResult categorical_em(const SurveyDataset& data, const std::vector<std::size_t>& items,
    const CategoricalEMOptions& options = {});

// Observed-data log-likelihood sum_i w_i log sum_{D_i} pi of a fitted model.
double categorical_loglik(const SurveyDataset& data, const CategoricalJointModel& model);

struct Discretizer {
    std::vector<std::size_t> items;
    // Interior cut points per item, strictly increasing. Empty for items that
    // were already categorical.
    std::vector<std::vector<double>> breakpoints;
    std::vector<std::size_t> categories;

    // Cell code of value v of the k-th listed item: number of cut points below v.
    [[nodiscard]] int code(std::size_t k, double v) const;
};

struct DiscretizedData {
    // Same units, weights and strata; one categorical item per listed item.
    SurveyDataset shadow;
    Discretizer discretizer;
};

// Quantile cut points (inverse empirical CDF of the observed values at
// j / k). Categorical items pass through unchanged.
DiscretizedData discretize(const SurveyDataset& data, const std::vector<std::size_t>& items, std::size_t k = 4);

struct FhdiOptions {
    std::size_t donors_per_cell = 10;
    unsigned threads = 1;
};

struct FhdiResult {
    FractionalDataset fdata;
    std::vector<std::string> warnings;
};

// For every recipient and candidate cell, selects donors_per_cell full
// respondents of that cell by systematic PPS on their sampling weights (all of
// them when the cell is thin) and copies their values into the missing items.
// Row weight = P(cell | observed) times the donor's normalized share.
FhdiResult fhdi_continuous(std::shared_ptr<const SurveyDataset> data, const DiscretizedData& cells,
    const CategoricalEMResult& cell_model, std::uint64_t seed, const FhdiOptions& options = {});

// Keeps every candidate completion with its E-step weight.
FractionalDataset fefi_categorical(std::shared_ptr<const SurveyDataset> data, const CategoricalEMResult& cell_model);

// Weighted correlation of two continuous items among full respondents of each
// cell with at least three members; returns the largest absolute value.
double within_cell_correlation(const SurveyDataset& data, const DiscretizedData& cells, std::size_t item_a,
    std::size_t item_b);

// CSV rows (item codes..., probability).
std::string cell_model_csv(const SurveyDataset& data, const CategoricalJointModel& model);

} // namespace fracimp
