#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/models.hpp"
#include "fracimp/semiparam.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fracimp {

struct SubsampleResult {
    FractionalDataset fdata;
    std::vector<std::string> warnings;
};

// Keeps m of the imputed rows of every unit, selected by systematic PPS on
// w*_ij. A row hit k times enters once with initial weight k / m. Units with
// at most m positive-weight rows keep all of them with equal weights.
SubsampleResult pps_subsample(const FractionalDataset& fdata, std::size_t m, std::uint64_t seed);

// Control vector S*_ij evaluated on a completed row.
struct Controls {
    std::size_t dimension = 0;
    std::function<void(std::span<const double> row, Eigen::Ref<Vector> out)> evaluate;
};

// S(theta; y) of a model at fixed theta.
Controls score_controls(std::shared_ptr<const ParametricModel> model, Vector theta);

struct CalibrationResult {
    FractionalDataset fdata;
    Vector delta;
    // ||sum_i w_i sum_j w~*_ij S*_ij||_inf after reweighting.
    double residual = 0.0;
    bool has_negative = false;
    std::size_t iterations = 0;
};

// sum_i w_i sum_j w*_ij S*_ij over the current weights.
Vector calibration_total(const FractionalDataset& fdata, const Controls& controls);

// w~ = w0 + w0 Delta (S - S_bar_i), Delta = -T' Q^{-1}.
CalibrationResult regression_reweight(const FractionalDataset& reduced, const Controls& controls);

struct ExponentialOptions {
    std::size_t max_iter = 100;
    // Converged when the control residual is at most tol * sum_i w_i.
    double tol = 1e-12;
};

// w~ proportional to w0 exp(Delta S), with Delta found by Newton on the dual.
CalibrationResult exponential_reweight(const FractionalDataset& reduced, const Controls& controls,
    const ExponentialOptions& options = {});

// Phase-1 units observe x; phase-2 units observe (x, y). Both data sets are
// rebuilt on the items (x..., y), with y missing in phase 1.
struct TwoPhaseSample {
    std::shared_ptr<const SurveyDataset> phase1;
    std::shared_ptr<const SurveyDataset> phase2;
    std::vector<std::size_t> x_items;
    std::size_t y_item = 0;
    bool nested = false;
    std::vector<std::string> warnings;
};

TwoPhaseSample make_two_phase(const SurveyDataset& phase1, const SurveyDataset& phase2,
    const std::vector<std::string>& x_names, const std::string& y_name, bool nested = false);

struct TwoPhaseResult {
    FractionalDataset fdata;
    OutcomeFit model;
    // sum_{A1} w_i1 sum_j w~*_ij y*_ij
    double total = 0.0;
    // sum_{A1} w_i1 m(x_i) + sum_{A2} w_i2 (y_i - m(x_i))
    double regression_total = 0.0;
    std::vector<std::string> warnings;
};

// n1 x n2 records y*_ij = m(x_i) + e_j with w*_ij = w_j2 / sum_k w_k2.
TwoPhaseResult two_phase_fefi(const TwoPhaseSample& tp);

// m donors per phase-1 unit by systematic PPS on w*_ij, then per-unit
// regression calibration on (1, y). Falls back to FEFI when m >= n2.
TwoPhaseResult two_phase_reduced(const TwoPhaseSample& tp, std::size_t m, std::uint64_t seed);

} // namespace fracimp
