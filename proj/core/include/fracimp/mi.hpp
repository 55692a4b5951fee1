#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/models.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fracimp {

struct MIOptions {
    unsigned threads = 1;
};

// m completed copies of `data`. For each copy and stratum, (beta, sigma^2) is
// drawn from the posterior of the log-scale regression under the prior
// proportional to 1 / sigma^2, fitted without design weights on the
// respondents; missing y are then drawn as exp(b0 + b1 log x + sigma e).
std::vector<SurveyDataset> mi_impute(const SurveyDataset& data, const StratifiedLogNormalRegression& model,
    std::size_t m, std::uint64_t seed, const MIOptions& options = {});

struct RubinResult {
    double estimate = 0.0;
    double within = 0.0;
    double between = 0.0;
    // W + (1 + 1/m) B
    double total = 0.0;
    std::size_t m = 0;
};

RubinResult rubin_combine(std::span<const double> estimates, std::span<const double> variances);

struct InformationTriple {
    Matrix com;
    Matrix obs;

    [[nodiscard]] Matrix mis() const { return com - obs; }
};

struct AsymptoticVariances {
    Matrix v_mi;
    Matrix v_fi;
    // Fraction of missing information I_mis I_com^{-1}.
    Matrix j;
};

// V_FI = I_obs^{-1} + m^{-1} I_com^{-1} I_mis I_com^{-1};
// V_MI = V_FI + m^{-1} J' I_obs^{-1} J.
AsymptoticVariances asymptotic_variances(const InformationTriple& info, std::size_t m);

struct StratifiedMean {
    double estimate = 0.0;
    double variance = 0.0;
};

// Stratum-size weighted mean N^{-1} sum_h N_h ybar_h over the strata listed in
// `strata` (all when empty), with variance
// N^{-2} sum_h N_h^2 (1 - n_h / N_h) s_h^2 / n_h. N_h is estimated by the
// weight total of stratum h.
StratifiedMean stratified_mean(const SurveyDataset& data, std::size_t y_item, const std::vector<std::size_t>& strata = {});

// Completed data sets as one long CSV with an imputation index column.
std::string completed_long_csv(const std::vector<SurveyDataset>& completed);

} // namespace fracimp
