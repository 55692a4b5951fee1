#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/models.hpp"
#include "fracimp/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fracimp {

// Proposal h(y_mis | y_obs). `sample` appends M completed item vectors;
// `log_density` may omit a term that is constant within a unit, since
// fractional weights are normalized per unit.
struct ProposalDistribution {
    enum class Kind { plugin_initial, prior_mixture, unnormalized_product, optimal_scalar_mean, custom };

    using Sampler = std::function<void(std::size_t unit, const MissingPattern& pattern, std::span<const double> y,
        std::size_t M, Rng& rng, std::vector<double>& out)>;
    using LogDensity = std::function<double(std::size_t unit, const MissingPattern& pattern,
        std::span<const double> completed)>;

    Kind kind = Kind::custom;
    Sampler sample;
    LogDensity log_density;
};

struct PFIConfig {
    std::size_t M = 100;
    std::size_t max_em_iter = 500;
    double em_tol = 1e-8;
    std::size_t sir_pool = 100;
    // Units whose effective sample size falls below ess_warn * M are listed.
    double ess_warn = 0.1;
    unsigned threads = 1;
    // Use closed-form M-steps where the model has them.
    bool closed_form_mstep = true;

    void validate() const;
};

// Imputed values drawn once at the I-step, with the proposal log-density of
// every draw. Units without missing items hold their single observed row.
class ImputationSet {
public:
    ImputationSet() = default;
    ImputationSet(std::shared_ptr<const SurveyDataset> base, std::vector<std::size_t> offsets, std::vector<int> donors,
        std::vector<double> values, std::vector<double> log_h, std::vector<bool> imputed);

    [[nodiscard]] const SurveyDataset& base() const { return *base_; }
    [[nodiscard]] const std::shared_ptr<const SurveyDataset>& base_ptr() const noexcept { return base_; }
    [[nodiscard]] std::size_t size() const noexcept { return donors_.size(); }
    [[nodiscard]] std::size_t stride() const noexcept { return stride_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::span<const double> row_values(std::size_t r) const
    {
        return { values_.data() + r * stride_, stride_ };
    }
    [[nodiscard]] double log_h(std::size_t r) const { return log_h_[r]; }
    [[nodiscard]] std::pair<std::size_t, std::size_t> unit_rows(std::size_t i) const
    {
        return { offsets_.at(i), offsets_.at(i + 1) };
    }
    [[nodiscard]] std::size_t row_unit(std::size_t r) const { return row_unit_[r]; }
    [[nodiscard]] bool imputed(std::size_t i) const { return imputed_.at(i); }
    [[nodiscard]] std::size_t imputed_count() const;

    [[nodiscard]] FractionalDataset to_fractional(std::vector<double> weights) const;

private:
    std::shared_ptr<const SurveyDataset> base_;
    std::size_t stride_ = 0;
    std::vector<std::size_t> offsets_;
    std::vector<std::size_t> row_unit_;
    std::vector<int> donors_;
    std::vector<double> values_;
    std::vector<double> log_h_;
    std::vector<bool> imputed_;
};

// Draws M values per unit with missing items; unit i uses the substream
// (seed, imputation, i) so the draws do not depend on scheduling.
ImputationSet i_step(std::shared_ptr<const SurveyDataset> data, const ProposalDistribution& h, std::size_t M,
    std::uint64_t seed, unsigned threads = 1);

// Log of f(y_obs, y*_mis; theta) / h(y*_mis | y_obs) per row.
std::vector<double> log_importance_ratios(const ImputationSet& imps, const ParametricModel& model, const Vector& theta,
    unsigned threads = 1);

// Normalizes per-unit log ratios into fractional weights with max-subtraction.
std::vector<double> normalize_log_weights(const ImputationSet& imps, std::span<const double> log_ratio);

// Fractional weights w*_ij at theta.
std::vector<double> w_step(const ImputationSet& imps, const ParametricModel& model, const Vector& theta,
    unsigned threads = 1);

// Solves the imputed score equation under the given fractional weights.
Vector m_step(const ImputationSet& imps, std::span<const double> weights, const ParametricModel& model,
    const Vector& theta_t, bool closed_form = true);
Vector m_step(const FractionalDataset& fdata, const ParametricModel& model, const Vector& theta_t,
    bool closed_form = true);

struct WeightDiagnostics {
    // Per unit; 1 for units without imputation.
    std::vector<double> ess;
    std::vector<double> max_weight;
    // Imputed units with ess < ess_warn * (rows of the unit).
    std::vector<std::size_t> low_ess_units;
};

WeightDiagnostics weight_diagnostics(const FractionalDataset& fdata, double ess_warn = 0.1);

struct EmTraceEntry {
    std::size_t iteration = 0;
    Vector theta;
    double change = 0.0;
    double max_weight = 0.0;
    double ess_min = 0.0;
    double ess_median = 0.0;
};

struct PFIResult {
    FractionalDataset fdata;
    Vector theta;
    std::vector<EmTraceEntry> em_trace;
    bool converged = false;
    ImputationSet imputations;
    // Units with every modeled item missing and no covariates.
    std::vector<std::size_t> marginal_units;
};

// I-step once, then W/M steps until ||theta_{t+1} - theta_t||_inf < em_tol.
PFIResult run_em(std::shared_ptr<const SurveyDataset> data, const ParametricModel& model, const ProposalDistribution& h,
    const Vector& theta0, const PFIConfig& config, std::uint64_t seed);

std::string em_trace_csv(const PFIResult& result, const std::vector<std::string>& parameter_names);

// h = f(y_mis | y_obs; theta0) of a fitted model; SIR with pool B for
// patterns whose conditional is not sequential.
ProposalDistribution plugin_proposal(std::shared_ptr<const ParametricModel> model, Vector theta0, std::size_t B = 100);

// Pattern-dispatched proposal for f1(y1 | x) f2(y2 | x, y1): y2 missing draws
// from f2, y1 missing uses SIR on f1 * f2, both missing draws f1 then f2.
ProposalDistribution build_proposal_example1(const SurveyDataset& data,
    std::shared_ptr<const BivariateSequentialModel> model, Vector theta0, std::size_t B = 100);

// M draws of y1 given (x, y2): each draw samples a pool of B values from f1
// and keeps one with probability proportional to f2.
std::vector<double> sir_sample(const BivariateSequentialModel& model, std::span<const double> y, const Vector& theta,
    std::size_t B, std::size_t M, std::uint64_t seed);

// h = L^{-1} sum_l f(y_mis | y_obs; theta_l) over fixed prior draws theta_l.
// Needs patterns whose conditional is exact.
ProposalDistribution prior_mixture_proposal(std::shared_ptr<const ParametricModel> model, std::vector<Vector> prior_draws);

// h*(y) proportional to f(y | y_obs; theta) |y - E(y | y_obs; theta)| for a
// single missing, conditionally normal item. Sampled by rejection from
// N(mu, 2 sigma^2).
ProposalDistribution optimal_proposal_scalar_mean(std::shared_ptr<const SequentialModel> model, Vector theta);

} // namespace fracimp
