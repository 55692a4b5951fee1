#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/estimating.hpp"
#include "fracimp/models.hpp"

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fracimp {

struct KernelSpec {
    enum class Kernel { gaussian, epanechnikov };

    Kernel kernel = Kernel::gaussian;
    // One bandwidth per covariate; Silverman's rule on respondent x when empty.
    std::vector<double> bandwidth;
    // Required for more than one covariate.
    bool product_kernel = false;

    [[nodiscard]] double evaluate(double u) const;
};

// 0.9 min(sd, IQR / 1.34) n^{-1/5}.
double silverman_bandwidth(std::span<const double> x);

struct KernelFIResult {
    EEEstimate estimate;
    FractionalDataset fdata;
    std::vector<double> bandwidth;
};

// Every respondent of y is a donor for every nonrespondent, with weight
// K_h(x_i - x_j) / sum_k K_h(x_i - x_k). Only y may be missing.
KernelFIResult kernel_fi(std::shared_ptr<const SurveyDataset> data, const std::vector<std::size_t>& x_items,
    std::size_t y_item, const EstimatingFunction& U, const KernelSpec& spec = {}, const SolverOptions& solver = {},
    unsigned threads = 1);

struct SfiOptions {
    std::size_t max_iter = 500;
    double tol = 1e-8;
    bool closed_form_mstep = true;
    unsigned threads = 1;
    // Starting value; the respondent fit otherwise.
    std::optional<Vector> theta0;
};

struct SfiResult {
    Vector theta;
    FractionalDataset fdata;
    // Weighted mean of y over the fractionally completed sample.
    double mean = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
};

// Semiparametric FI: the donors of each nonrespondent are all respondent
// values y_j, weighted by f(y_j | x_i; theta) / sum_{k in A_R} w_k f(y_j | x_k; theta).
// `model` is the law of y given covariates that are observed for every unit.
SfiResult sfi_em(std::shared_ptr<const SurveyDataset> data, const ParametricModel& model, std::size_t y_item,
    const SfiOptions& options = {});

enum class CovariateTransform { identity, log };

struct PropensityOptions {
    // One entry per covariate; identity when empty.
    std::vector<CovariateTransform> transforms;
    // Shifts the intercept so that sum_{A_R} w / pi = sum_A w.
    bool normalize = false;
    FitOptions fit;
};

struct PropensityFit {
    // (intercept, coefficients...) on the transformed covariates; constant
    // covariates get 0.
    Vector phi;
    // Fitted response probability per unit.
    std::vector<double> pi;
    // Intercept shift applied by normalization.
    double shift = 0.0;
    std::size_t iterations = 0;
};

// Design-weighted logistic regression of the response indicator of y_item.
PropensityFit fit_propensity(const SurveyDataset& data, std::size_t y_item, const std::vector<std::size_t>& covariates,
    const PropensityOptions& options = {});

// Linear working model m(x; beta) = b0 + sum_k b_k x_k fitted by weighted least
// squares on the respondents. Categorical covariates enter as indicators of
// every level but the first.
struct OutcomeFit {
    std::vector<std::size_t> covariates;
    std::vector<std::size_t> levels;
    Vector beta;

    [[nodiscard]] double predict(std::span<const double> y) const;
};

OutcomeFit fit_outcome_regression(const SurveyDataset& data, std::size_t y_item,
    const std::vector<std::size_t>& covariates);

struct DRFIResult {
    EEEstimate estimate;
    FractionalDataset fdata;
    // Donor weights shared across recipients, indexed by unit (0 for
    // nonrespondents).
    std::vector<double> donor_weight;
    // sum_A w_i [d_i y_i + (1 - d_i) sum_j d_j w*_j y*_ij]
    double total_fi = 0.0;
    // sum_A w_i [m(x_i) + d_i / pi_i (y_i - m(x_i))]
    double total_dr = 0.0;
};

// Doubly robust FI: y*_ij = m(x_i) + (y_j - m(x_j)) with weights
// w_j (1/pi_j - 1) / sum_{A_R} w_k (1/pi_k - 1).
DRFIResult dr_fi(std::shared_ptr<const SurveyDataset> data, std::size_t y_item, const OutcomeFit& outcome,
    const PropensityFit& propensity, const EstimatingFunction& U, const SolverOptions& solver = {});

} // namespace fracimp
