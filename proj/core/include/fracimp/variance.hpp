#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/estimating.hpp"
#include "fracimp/models.hpp"
#include "fracimp/pfi.hpp"

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fracimp {

// Stratified delete-1 jackknife: replicate k sets w_k = 0 and multiplies the
// weights of the other units of its stratum by n_h / (n_h - 1).
class ReplicationScheme {
public:
    ReplicationScheme() = default;
    ReplicationScheme(std::vector<double> weights, std::vector<std::size_t> strata);

    [[nodiscard]] std::size_t size() const noexcept { return weights_.size(); }
    [[nodiscard]] std::size_t unit_count() const noexcept { return weights_.size(); }
    [[nodiscard]] const std::vector<double>& base_weights() const noexcept { return weights_; }
    [[nodiscard]] std::size_t stratum(std::size_t i) const { return strata_.at(i); }
    [[nodiscard]] std::size_t stratum_size(std::size_t h) const { return sizes_.at(h); }
    [[nodiscard]] std::size_t stratum_count() const noexcept { return sizes_.size(); }

    // n_h / (n_h - 1) for the stratum of the deleted unit.
    [[nodiscard]] double scale(std::size_t k) const;
    // (n_h - 1) / n_h, the variance factor of replicate k.
    [[nodiscard]] double factor(std::size_t k) const;
    [[nodiscard]] double weight(std::size_t k, std::size_t i) const;
    [[nodiscard]] std::vector<double> weights(std::size_t k) const;

private:
    std::vector<double> weights_;
    std::vector<std::size_t> strata_;
    std::vector<std::size_t> sizes_;
};

// Uses the data set's strata; one stratum when there are none.
ReplicationScheme build_delete1(const SurveyDataset& data);

// sum_k (n_h - 1) / n_h (eta_k - eta_hat)^2
double jackknife_variance(std::span<const double> replicates, const ReplicationScheme& scheme, double eta_hat);

enum class ReplicateMethod { one_step_newton, em };

struct ReplicateOptions {
    ReplicateMethod method = ReplicateMethod::one_step_newton;
    std::size_t max_em_iter = 500;
    double em_tol = 1e-8;
    bool closed_form_mstep = true;
    unsigned threads = 1;
};

struct ReplicateEstimates {
    ReplicateMethod method = ReplicateMethod::one_step_newton;
    std::vector<Vector> theta;
    // eta[k][q] for estimating function q.
    std::vector<std::vector<double>> eta;
    std::vector<std::string> warnings;
};

// Replicate pseudo-MLEs and estimates of a converged PFI run. The imputed
// values and their proposal densities are reused unchanged; only the unit
// weights and the fractional weights move.
class ReplicateEngine {
public:
    ReplicateEngine(const PFIResult& result, std::shared_ptr<const ParametricModel> model, ReplicationScheme scheme,
        ReplicateOptions options = {});

    [[nodiscard]] const ReplicationScheme& scheme() const noexcept { return scheme_; }
    [[nodiscard]] const Vector& theta_hat() const noexcept { return theta_; }
    [[nodiscard]] const ImputationSet& imputations() const noexcept { return imps_; }

    // theta^[k]. On a singular Newton Jacobian falls back to EM and stores a
    // message in *warning.
    [[nodiscard]] Vector replicate_theta(std::size_t k, std::string* warning = nullptr) const;
    [[nodiscard]] Vector replicate_theta(std::size_t k, ReplicateMethod method, std::string* warning = nullptr) const;
    // Same for arbitrary unit weights.
    [[nodiscard]] Vector theta_for_weights(std::span<const double> unit_weights, ReplicateMethod method,
        std::string* warning = nullptr) const;

    // w*_ij(theta) at the fixed imputed values.
    [[nodiscard]] std::vector<double> fractional_weights(const Vector& theta) const;

    [[nodiscard]] EEEstimate replicate_eta(std::size_t k, const Vector& theta_k, const EstimatingFunction& U,
        const SolverOptions& solver = {}) const;

    [[nodiscard]] ReplicateEstimates run(const std::vector<EstimatingFunction>& U, const SolverOptions& solver = {}) const;

private:
    [[nodiscard]] Vector newton(const Matrix& J, const Vector& score, bool& singular) const;
    [[nodiscard]] Vector em(std::span<const double> unit_weights) const;

    ImputationSet imps_;
    FractionalDataset fdata_;
    std::shared_ptr<const ParametricModel> model_;
    Vector theta_;
    ReplicationScheme scheme_;
    ReplicateOptions options_;
    // Per unit: S_bar_i and A_i = sum_j w*_ij {dS/dtheta' + (S - S_bar_i)(S - S_bar_i)'}.
    std::vector<Vector> sbar_;
    std::vector<Matrix> a_;
    std::vector<Matrix> j_stratum_;
    std::vector<Vector> g_stratum_;
    Matrix j_all_;
    Vector g_all_;
};

std::vector<double> jackknife_variances(const ReplicateEstimates& estimates, const ReplicationScheme& scheme,
    std::span<const double> eta_hat);

// Replicates of eta with the imputed rows and fractional weights held fixed;
// only the unit weights change.
std::vector<double> fixed_weight_replicates(const FractionalDataset& fdata, const ReplicationScheme& scheme,
    const EstimatingFunction& U, const SolverOptions& solver = {}, unsigned threads = 1);

// Columns k, theta components, eta components.
std::string replicate_csv(const ReplicateEstimates& estimates, const std::vector<std::string>& theta_names,
    const std::vector<std::string>& eta_names);

} // namespace fracimp
