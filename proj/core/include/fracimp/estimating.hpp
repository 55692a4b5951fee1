#pragma once

#include "fracimp/dataset.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace fracimp {

enum class Smoothness { smooth, step };

// U(eta; y) evaluated on a completed item vector y. Builtin kinds carry enough
// structure for closed-form or order-statistic solving; custom kinds go
// through the generic solvers.
class EstimatingFunction {
public:
    enum class Kind { mean, proportion_below, quantile, custom };

    using Evaluator = std::function<void(std::span<const double> eta, std::span<const double> y, std::span<double> out)>;

    // eta - y
    static EstimatingFunction mean(std::size_t item);
    // eta - I{y < c}
    static EstimatingFunction proportion_below(std::size_t item, double c);
    // 0.5 - I{y < eta}
    static EstimatingFunction median(std::size_t item);
    // p - I{y < eta}; solves F(eta) = p.
    static EstimatingFunction quantile(std::size_t item, double p);
    // `items` lists the entries of y that the evaluator reads. For step
    // functions the sign change is searched over the values of items[0].
    static EstimatingFunction custom(std::size_t arity, Smoothness smoothness, std::vector<std::size_t> items,
        Evaluator evaluator);

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] std::size_t arity() const noexcept { return arity_; }
    [[nodiscard]] Smoothness smoothness() const noexcept { return smoothness_; }
    [[nodiscard]] const std::vector<std::size_t>& items() const noexcept { return items_; }
    [[nodiscard]] std::size_t item() const { return items_.at(0); }
    // c for proportion_below, p for quantile.
    [[nodiscard]] double parameter() const noexcept { return parameter_; }

    void evaluate(std::span<const double> eta, std::span<const double> y, std::span<double> out) const;
    [[nodiscard]] double evaluate(double eta, std::span<const double> y) const;

private:
    EstimatingFunction() = default;

    Kind kind_ = Kind::custom;
    std::size_t arity_ = 1;
    Smoothness smoothness_ = Smoothness::smooth;
    std::vector<std::size_t> items_;
    double parameter_ = 0.0;
    Evaluator evaluator_;
};

struct EEEstimate {
    std::vector<double> eta_hat;
    double residual_norm = 0.0;
    std::size_t iterations = 0;

    [[nodiscard]] double value() const { return eta_hat.at(0); }
};

struct SolverOptions {
    // Smooth equations stop when |sum W U| <= tolerance * sum W.
    double tolerance = 1e-10;
    std::size_t max_iterations = 200;
    std::size_t max_doublings = 60;
    std::optional<std::vector<double>> start;
};

// Solves sum_r weights[r] U(eta; rows[r]) = 0 over flat rows of width
// `stride`. Rows with zero weight are ignored.
EEEstimate solve_weighted(std::span<const double> values, std::size_t stride, std::span<const double> weights,
    const EstimatingFunction& U, const SolverOptions& options = {});

// Solves sum_i w_i U(eta; y_i) = 0. `unit_weights`, when given, replaces the
// design weights (replicates, domains).
EEEstimate solve_complete(const SurveyDataset& data, const EstimatingFunction& U,
    std::optional<std::span<const double>> unit_weights = std::nullopt, const SolverOptions& options = {});

// Solves sum_i w_i sum_j w*_ij U(eta; y*_ij) = 0. Optional overrides replace
// the unit weights w_i and/or the fractional weights w*_ij.
EEEstimate solve_fractional(const FractionalDataset& fdata, const EstimatingFunction& U,
    std::optional<std::span<const double>> unit_weights = std::nullopt,
    std::optional<std::span<const double>> fractional_weights = std::nullopt, const SolverOptions& options = {});

// Row weights w_i * w*_ij of a fractional data set.
std::vector<double> row_weights(const FractionalDataset& fdata,
    std::optional<std::span<const double>> unit_weights = std::nullopt,
    std::optional<std::span<const double>> fractional_weights = std::nullopt);

// Smallest y with cumulative weight share >= p (ties counted as not below).
double weighted_quantile(std::span<const double> y, std::span<const double> w, double p);

} // namespace fracimp
