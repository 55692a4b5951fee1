#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/rng.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fracimp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// One factor f(y_response | predictors; theta_c) of a sequentially factored
// joint model. Rows are full item vectors; components read only their own
// response and predictor slots.
class ConditionalComponent {
public:
    virtual ~ConditionalComponent() = default;

    [[nodiscard]] virtual std::size_t response() const = 0;
    [[nodiscard]] virtual std::vector<std::size_t> predictors() const = 0;
    [[nodiscard]] virtual std::size_t parameter_count() const = 0;
    [[nodiscard]] virtual std::vector<std::string> parameter_names() const = 0;

    [[nodiscard]] virtual double log_density(std::span<const double> y, const double* theta) const = 0;
    virtual void score(std::span<const double> y, const double* theta, double* out) const = 0;
    // Writes the parameter_count() square block d score / d theta^T.
    virtual void score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const = 0;
    [[nodiscard]] virtual double sample(std::span<const double> y, const double* theta, Rng& rng) const = 0;

    // Neutral starting value for Newton iterations.
    [[nodiscard]] virtual Vector initial_theta() const = 0;
    // Exact maximizer of sum_r w_r log f(y_r), when available in closed form.
    [[nodiscard]] virtual std::optional<Vector> weighted_fit(std::span<const double> values, std::size_t stride,
        std::span<const double> weights) const;
    // (mean, sd) when the response is conditionally normal.
    [[nodiscard]] virtual std::optional<std::pair<double, double>> normal_moments(std::span<const double> y,
        const double* theta) const;
};

// y ~ N(b0 + sum_k b_k z_k, sigma^2), parameters (b..., log sigma^2).
class GaussianRegression final : public ConditionalComponent {
public:
    GaussianRegression(std::size_t response, std::vector<std::size_t> predictors, std::vector<std::string> item_names = {});

    [[nodiscard]] std::size_t response() const override { return response_; }
    [[nodiscard]] std::vector<std::size_t> predictors() const override { return predictors_; }
    [[nodiscard]] std::size_t parameter_count() const override { return predictors_.size() + 2; }
    [[nodiscard]] std::vector<std::string> parameter_names() const override;

    [[nodiscard]] double log_density(std::span<const double> y, const double* theta) const override;
    void score(std::span<const double> y, const double* theta, double* out) const override;
    void score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const override;
    [[nodiscard]] double sample(std::span<const double> y, const double* theta, Rng& rng) const override;
    [[nodiscard]] Vector initial_theta() const override;
    [[nodiscard]] std::optional<Vector> weighted_fit(std::span<const double> values, std::size_t stride,
        std::span<const double> weights) const override;
    [[nodiscard]] std::optional<std::pair<double, double>> normal_moments(std::span<const double> y,
        const double* theta) const override;

    [[nodiscard]] double linear_predictor(std::span<const double> y, const double* theta) const;

private:
    std::size_t response_;
    std::vector<std::size_t> predictors_;
    std::vector<std::string> names_;
};

// Binary y in {0, 1} with logit P(y = 1) = b0 + sum_k b_k z_k.
class LogisticRegression final : public ConditionalComponent {
public:
    LogisticRegression(std::size_t response, std::vector<std::size_t> predictors, std::vector<std::string> item_names = {});

    [[nodiscard]] std::size_t response() const override { return response_; }
    [[nodiscard]] std::vector<std::size_t> predictors() const override { return predictors_; }
    [[nodiscard]] std::size_t parameter_count() const override { return predictors_.size() + 1; }
    [[nodiscard]] std::vector<std::string> parameter_names() const override;

    [[nodiscard]] double log_density(std::span<const double> y, const double* theta) const override;
    void score(std::span<const double> y, const double* theta, double* out) const override;
    void score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const override;
    [[nodiscard]] double sample(std::span<const double> y, const double* theta, Rng& rng) const override;
    [[nodiscard]] Vector initial_theta() const override;

private:
    [[nodiscard]] double eta(std::span<const double> y, const double* theta) const;

    std::size_t response_;
    std::vector<std::size_t> predictors_;
    std::vector<std::string> names_;
};

// log y = b0_h + b1_h log x + e, e ~ N(0, sigma_h^2), with the stratum h read
// from a categorical item. Parameters per stratum: (b0_h, b1_h, log sigma_h^2).
class StratifiedLogNormalRegression final : public ConditionalComponent {
public:
    StratifiedLogNormalRegression(std::size_t response, std::size_t stratum_item, std::size_t x_item, std::size_t strata);

    [[nodiscard]] std::size_t response() const override { return response_; }
    [[nodiscard]] std::vector<std::size_t> predictors() const override { return { stratum_item_, x_item_ }; }
    [[nodiscard]] std::size_t parameter_count() const override { return 3 * strata_; }
    [[nodiscard]] std::vector<std::string> parameter_names() const override;
    [[nodiscard]] std::size_t strata() const noexcept { return strata_; }
    [[nodiscard]] std::size_t stratum_item() const noexcept { return stratum_item_; }
    [[nodiscard]] std::size_t x_item() const noexcept { return x_item_; }

    [[nodiscard]] double log_density(std::span<const double> y, const double* theta) const override;
    void score(std::span<const double> y, const double* theta, double* out) const override;
    void score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const override;
    [[nodiscard]] double sample(std::span<const double> y, const double* theta, Rng& rng) const override;
    [[nodiscard]] Vector initial_theta() const override;
    [[nodiscard]] std::optional<Vector> weighted_fit(std::span<const double> values, std::size_t stride,
        std::span<const double> weights) const override;

    [[nodiscard]] std::size_t stratum_of(std::span<const double> y) const;

private:
    std::size_t response_;
    std::size_t stratum_item_;
    std::size_t x_item_;
    std::size_t strata_;
};

// Joint model f(y; theta) of the modeled items given fully observed
// covariates. theta_0 of any covariate law is never housed.
class ParametricModel {
public:
    virtual ~ParametricModel() = default;

    [[nodiscard]] virtual std::size_t parameter_count() const = 0;
    [[nodiscard]] virtual std::vector<std::string> parameter_names() const = 0;
    // Items whose law is modeled (may be missing).
    [[nodiscard]] virtual std::vector<std::size_t> modeled_items() const = 0;
    // Conditioning items; they must be observed wherever the model is used.
    [[nodiscard]] virtual std::vector<std::size_t> covariate_items() const = 0;

    [[nodiscard]] virtual double log_density(std::span<const double> y, const Vector& theta) const = 0;
    virtual void score(std::span<const double> y, const Vector& theta, Eigen::Ref<Vector> out) const = 0;
    virtual void score_jacobian(std::span<const double> y, const Vector& theta, Eigen::Ref<Matrix> out) const = 0;

    // Appends M completed item vectors drawn from f(y_mis | y_obs; theta).
    // Exact when the conditional factors sequentially, SIR with pool B
    // otherwise.
    virtual void sample_conditional(const MissingPattern& pattern, std::span<const double> y, const Vector& theta,
        std::size_t M, std::size_t B, Rng& rng, std::vector<double>& out) const
        = 0;
    // Log density of sample_conditional's target at a completed vector, up to
    // a term constant in y_mis when the conditional is not exact.
    [[nodiscard]] virtual double log_conditional(const MissingPattern& pattern, std::span<const double> y,
        const Vector& theta) const
        = 0;
    [[nodiscard]] virtual bool conditional_is_exact(const MissingPattern& pattern) const = 0;

    [[nodiscard]] virtual Vector initial_theta() const = 0;
    // Closed-form or block-wise maximizer of sum_r w_r log f(y_r); nullopt
    // sends callers to the generic Newton solver.
    [[nodiscard]] virtual std::optional<Vector> weighted_fit(std::span<const double> values, std::size_t stride,
        std::span<const double> weights) const;
};

// Product of conditional components, each conditioning only on covariates
// and responses of earlier components.
class SequentialModel : public ParametricModel {
public:
    SequentialModel(std::vector<std::shared_ptr<const ConditionalComponent>> components, std::size_t item_count);

    [[nodiscard]] std::size_t parameter_count() const override { return offsets_.back(); }
    [[nodiscard]] std::vector<std::string> parameter_names() const override;
    [[nodiscard]] std::vector<std::size_t> modeled_items() const override;
    [[nodiscard]] std::vector<std::size_t> covariate_items() const override { return covariates_; }

    [[nodiscard]] double log_density(std::span<const double> y, const Vector& theta) const override;
    void score(std::span<const double> y, const Vector& theta, Eigen::Ref<Vector> out) const override;
    void score_jacobian(std::span<const double> y, const Vector& theta, Eigen::Ref<Matrix> out) const override;

    void sample_conditional(const MissingPattern& pattern, std::span<const double> y, const Vector& theta,
        std::size_t M, std::size_t B, Rng& rng, std::vector<double>& out) const override;
    [[nodiscard]] double log_conditional(const MissingPattern& pattern, std::span<const double> y,
        const Vector& theta) const override;
    [[nodiscard]] bool conditional_is_exact(const MissingPattern& pattern) const override;

    [[nodiscard]] Vector initial_theta() const override;
    [[nodiscard]] std::optional<Vector> weighted_fit(std::span<const double> values, std::size_t stride,
        std::span<const double> weights) const override;

    [[nodiscard]] std::size_t component_count() const noexcept { return components_.size(); }
    [[nodiscard]] const ConditionalComponent& component(std::size_t c) const { return *components_.at(c); }
    // Offset of component c's block in theta.
    [[nodiscard]] std::size_t offset(std::size_t c) const { return offsets_.at(c); }
    [[nodiscard]] std::size_t item_count() const noexcept { return item_count_; }

    // Components drawn (response missing) and tilting (response observed but
    // depending on a missing item) under a pattern.
    struct Plan {
        std::vector<std::size_t> draw;
        std::vector<std::size_t> tilt;
    };
    [[nodiscard]] Plan plan(const MissingPattern& pattern) const;

private:
    std::vector<std::shared_ptr<const ConditionalComponent>> components_;
    std::vector<std::size_t> offsets_;
    std::vector<std::size_t> covariates_;
    std::size_t item_count_;
};

// f(y1, y2 | x) = f1(y1 | x; theta_1) f2(y2 | x, y1; theta_2).
class BivariateSequentialModel final : public SequentialModel {
public:
    BivariateSequentialModel(std::shared_ptr<const ConditionalComponent> f1,
        std::shared_ptr<const ConditionalComponent> f2, std::size_t item_count);

    [[nodiscard]] std::size_t y1() const { return component(0).response(); }
    [[nodiscard]] std::size_t y2() const { return component(1).response(); }
};

std::shared_ptr<SequentialModel> make_normal_model(std::size_t response, std::vector<std::size_t> predictors,
    std::size_t item_count);

struct FitOptions {
    std::size_t max_iterations = 200;
    // Converged when ||score||_inf <= tolerance * sum of weights.
    double tolerance = 1e-10;
    // Use a model's closed-form maximizer when it has one.
    bool closed_form = true;
    std::optional<Vector> start;
};

struct FitResult {
    Vector theta;
    std::size_t iterations = 0;
    double score_norm = 0.0;
};

// Solves sum_r w_r S(theta; y_r) = 0 over flat rows.
FitResult fit_weighted(const ParametricModel& model, std::span<const double> values, std::size_t stride,
    std::span<const double> weights, const FitOptions& options = {});

// Weighted pseudo-MLE on a data set whose modeled and covariate items are
// observed for every unit.
FitResult pseudo_mle(const SurveyDataset& data, const ParametricModel& model, const FitOptions& options = {});

// sum_i w_i sum_j w*_ij S(theta; y*_ij).
Vector imputed_mean_score(const FractionalDataset& fdata, const ParametricModel& model, const Vector& theta);

// Fits f1 and f2 by weighted pseudo-MLE on the units observing every modeled
// item (the complete cases).
Vector fit_conditional_components(const SurveyDataset& data, const SequentialModel& model,
    const FitOptions& options = {});

// Named real arrays as JSON: {"parameters": [{"name": ..., "value": ...}]}.
void save_parameters(const std::filesystem::path& path, const std::vector<std::string>& names, const Vector& theta);
std::pair<std::vector<std::string>, Vector> load_parameters(const std::filesystem::path& path);
std::string parameters_to_json(const std::vector<std::string>& names, const Vector& theta);

// Logistic regression P(d = 1 | z) = 1 / (1 + exp(-z'phi)) fitted by design
// weighted Newton. Rows of `design` include any intercept column.
struct LogisticFit {
    Vector phi;
    std::size_t iterations = 0;
};
LogisticFit fit_logistic(const Matrix& design, std::span<const double> response, std::span<const double> weights,
    const FitOptions& options = {});

} // namespace fracimp
