#include "fracimp/models.hpp"

#include "fracimp/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <set>

namespace fracimp {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

double softplus(double x)
{
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double logistic(double x)
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::string item_label(const std::vector<std::string>& names, std::size_t item)
{
    return item < names.size() ? names[item] : "item" + std::to_string(item);
}

// Weighted least squares of target on (1, z). Returns coefficients and the
// weighted mean squared residual.
std::pair<Vector, double> weighted_least_squares(const Matrix& Z, const Vector& t, const Vector& w,
    const std::string& what)
{
    const Matrix ZtW = Z.transpose() * w.asDiagonal();
    const Matrix A = ZtW * Z;
    Eigen::LDLT<Matrix> ldlt(A);
    const double scale = std::max(1.0, A.diagonal().cwiseAbs().maxCoeff());
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()
        || ldlt.vectorD().minCoeff() <= 1e-13 * scale) {
        fail(ErrorCode::singular, what + ": design matrix is rank deficient");
    }
    const Vector beta = ldlt.solve(ZtW * t);
    const Vector r = t - Z * beta;
    const double sw = w.sum();
    const double s2 = (w.array() * r.array().square()).sum() / sw;
    return { beta, s2 };
}

struct Objective {
    double value = 0.0;
    Vector gradient;
    Matrix hessian;
};

// Newton ascent with step-halving on a concave-near-optimum objective.
FitResult newton_maximize(std::size_t p, const std::function<void(const Vector&, Objective&, bool)>& eval,
    const Vector& start, double total, const FitOptions& opt, const std::vector<std::string>& names)
{
    Vector theta = start;
    Objective cur;
    cur.gradient.resize(static_cast<Eigen::Index>(p));
    cur.hessian.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
    eval(theta, cur, true);
    if (!std::isfinite(cur.value)) {
        fail(ErrorCode::contract, "pseudo-MLE: log-likelihood is not finite at the starting value");
    }
    Objective trial;
    trial.gradient.resize(static_cast<Eigen::Index>(p));
    trial.hessian.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));

    const auto flat_direction = [&](const Matrix& info) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(info);
        const Vector v = es.eigenvectors().col(0);
        Eigen::Index k = 0;
        v.cwiseAbs().maxCoeff(&k);
        const auto name = static_cast<std::size_t>(k) < names.size() ? names[static_cast<std::size_t>(k)]
                                                                       : "theta[" + std::to_string(k) + "]";
        const double reach = 1.0 + theta.lpNorm<Eigen::Infinity>();
        for (double sign : { 1.0, -1.0 }) {
            eval(theta + sign * reach * v, trial, false);
            if (std::isfinite(trial.value) && trial.value > cur.value + 1e-13 * std::abs(cur.value)) {
                fail(ErrorCode::non_convergence, "pseudo-MLE diverges along parameter '" + name
                        + "'; the log-likelihood keeps increasing (separated data?)");
            }
        }
        fail(ErrorCode::singular, "information matrix is singular; flat direction is dominated by parameter '" + name + "'");
    };

    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        const Matrix info = -cur.hessian;
        const double scale = std::max(1.0, info.diagonal().cwiseAbs().maxCoeff());
        Eigen::LDLT<Matrix> ldlt(info);
        Vector step;
        if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 1e-14 * scale) {
            step = ldlt.solve(cur.gradient);
        } else {
            Eigen::SelfAdjointEigenSolver<Matrix> es(info);
            const double lo = es.eigenvalues().minCoeff();
            if (std::abs(lo) <= 1e-12 * scale && cur.gradient.lpNorm<Eigen::Infinity>() <= opt.tolerance * total) {
                flat_direction(info);
            }
            // Levenberg shift away from the non-concave region.
            const double shift = std::abs(lo) + 1e-6 * scale;
            step = (info + shift * Matrix::Identity(info.rows(), info.cols())).ldlt().solve(cur.gradient);
        }
        const double gnorm = cur.gradient.lpNorm<Eigen::Infinity>();
        if (gnorm <= opt.tolerance * total && step.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + theta.lpNorm<Eigen::Infinity>())) {
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 1e-14 * scale) {
                flat_direction(info);
            }
            return FitResult { theta, it, gnorm };
        }
        double lambda = 1.0;
        bool moved = false;
        for (int halving = 0; halving < 50; ++halving) {
            const Vector cand = theta + lambda * step;
            eval(cand, trial, false);
            if (std::isfinite(trial.value) && trial.value >= cur.value - 1e-12 * (1.0 + std::abs(cur.value))) {
                theta = cand;
                moved = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!moved) {
            break;
        }
        eval(theta, cur, true);
    }
    const double gnorm = cur.gradient.lpNorm<Eigen::Infinity>();
    if (gnorm <= opt.tolerance * total) {
        return FitResult { theta, opt.max_iterations, gnorm };
    }
    fail(ErrorCode::non_convergence, "pseudo-MLE did not converge in " + std::to_string(opt.max_iterations)
            + " iterations (score norm " + format_double(gnorm) + ")");
}

double sum_weights(std::span<const double> w)
{
    double s = 0.0;
    for (double x : w) {
        s += x;
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// ConditionalComponent defaults

std::optional<Vector> ConditionalComponent::weighted_fit(std::span<const double>, std::size_t, std::span<const double>) const
{
    return std::nullopt;
}

std::optional<std::pair<double, double>> ConditionalComponent::normal_moments(std::span<const double>, const double*) const
{
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// GaussianRegression

GaussianRegression::GaussianRegression(std::size_t response, std::vector<std::size_t> predictors,
    std::vector<std::string> item_names)
    : response_(response)
    , predictors_(std::move(predictors))
    , names_(std::move(item_names))
{
    require(std::find(predictors_.begin(), predictors_.end(), response_) == predictors_.end(),
        "GaussianRegression: response cannot be its own predictor");
}

std::vector<std::string> GaussianRegression::parameter_names() const
{
    const auto y = item_label(names_, response_);
    std::vector<std::string> out { y + ":intercept" };
    for (auto k : predictors_) {
        out.push_back(y + ":" + item_label(names_, k));
    }
    out.push_back(y + ":log_sigma2");
    return out;
}

double GaussianRegression::linear_predictor(std::span<const double> y, const double* theta) const
{
    double mu = theta[0];
    for (std::size_t k = 0; k < predictors_.size(); ++k) {
        mu += theta[k + 1] * y[predictors_[k]];
    }
    return mu;
}

double GaussianRegression::log_density(std::span<const double> y, const double* theta) const
{
    const double tau = theta[predictors_.size() + 1];
    const double r = y[response_] - linear_predictor(y, theta);
    return -kHalfLog2Pi - 0.5 * tau - 0.5 * r * r * std::exp(-tau);
}

void GaussianRegression::score(std::span<const double> y, const double* theta, double* out) const
{
    const auto q = predictors_.size();
    const double inv = std::exp(-theta[q + 1]);
    const double r = y[response_] - linear_predictor(y, theta);
    out[0] = r * inv;
    for (std::size_t k = 0; k < q; ++k) {
        out[k + 1] = r * inv * y[predictors_[k]];
    }
    out[q + 1] = -0.5 + 0.5 * r * r * inv;
}

void GaussianRegression::score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const
{
    const auto q = predictors_.size();
    const double inv = std::exp(-theta[q + 1]);
    const double r = y[response_] - linear_predictor(y, theta);
    Vector z(static_cast<Eigen::Index>(q + 1));
    z[0] = 1.0;
    for (std::size_t k = 0; k < q; ++k) {
        z[static_cast<Eigen::Index>(k + 1)] = y[predictors_[k]];
    }
    const auto n = static_cast<Eigen::Index>(q + 1);
    out.topLeftCorner(n, n) = -inv * z * z.transpose();
    out.block(0, n, n, 1) = -r * inv * z;
    out.block(n, 0, 1, n) = (-r * inv * z).transpose();
    out(n, n) = -0.5 * r * r * inv;
}

double GaussianRegression::sample(std::span<const double> y, const double* theta, Rng& rng) const
{
    const double sd = std::exp(0.5 * theta[predictors_.size() + 1]);
    return linear_predictor(y, theta) + sd * standard_normal(rng);
}

Vector GaussianRegression::initial_theta() const
{
    return Vector::Zero(static_cast<Eigen::Index>(parameter_count()));
}

std::optional<Vector> GaussianRegression::weighted_fit(std::span<const double> values, std::size_t stride,
    std::span<const double> weights) const
{
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < weights.size(); ++r) {
        if (weights[r] != 0.0) {
            rows.push_back(r);
        }
    }
    const auto q = predictors_.size();
    if (rows.size() < q + 2) {
        fail(ErrorCode::identifiability, "Gaussian regression needs at least " + std::to_string(q + 2)
                + " rows with positive weight");
    }
    Matrix Z(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(q + 1));
    Vector t(static_cast<Eigen::Index>(rows.size()));
    Vector w(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t n = 0; n < rows.size(); ++n) {
        const auto* y = values.data() + rows[n] * stride;
        const auto e = static_cast<Eigen::Index>(n);
        Z(e, 0) = 1.0;
        for (std::size_t k = 0; k < q; ++k) {
            Z(e, static_cast<Eigen::Index>(k + 1)) = y[predictors_[k]];
        }
        t[e] = y[response_];
        w[e] = weights[rows[n]];
    }
    const auto [beta, s2] = weighted_least_squares(Z, t, w, "Gaussian regression for " + item_label(names_, response_));
    if (!(s2 > 0.0)) {
        fail(ErrorCode::singular, "Gaussian regression fits exactly; residual variance is zero");
    }
    Vector theta(static_cast<Eigen::Index>(q + 2));
    theta.head(static_cast<Eigen::Index>(q + 1)) = beta;
    theta[static_cast<Eigen::Index>(q + 1)] = std::log(s2);
    return theta;
}

std::optional<std::pair<double, double>> GaussianRegression::normal_moments(std::span<const double> y,
    const double* theta) const
{
    return std::pair { linear_predictor(y, theta), std::exp(0.5 * theta[predictors_.size() + 1]) };
}

// ---------------------------------------------------------------------------
// LogisticRegression

LogisticRegression::LogisticRegression(std::size_t response, std::vector<std::size_t> predictors,
    std::vector<std::string> item_names)
    : response_(response)
    , predictors_(std::move(predictors))
    , names_(std::move(item_names))
{
}

std::vector<std::string> LogisticRegression::parameter_names() const
{
    const auto y = item_label(names_, response_);
    std::vector<std::string> out { y + ":intercept" };
    for (auto k : predictors_) {
        out.push_back(y + ":" + item_label(names_, k));
    }
    return out;
}

double LogisticRegression::eta(std::span<const double> y, const double* theta) const
{
    double e = theta[0];
    for (std::size_t k = 0; k < predictors_.size(); ++k) {
        e += theta[k + 1] * y[predictors_[k]];
    }
    return e;
}

double LogisticRegression::log_density(std::span<const double> y, const double* theta) const
{
    const double e = eta(y, theta);
    return y[response_] * e - softplus(e);
}

void LogisticRegression::score(std::span<const double> y, const double* theta, double* out) const
{
    const double r = y[response_] - logistic(eta(y, theta));
    out[0] = r;
    for (std::size_t k = 0; k < predictors_.size(); ++k) {
        out[k + 1] = r * y[predictors_[k]];
    }
}

void LogisticRegression::score_jacobian(std::span<const double> y, const double* theta, Eigen::Ref<Matrix> out) const
{
    const double p = logistic(eta(y, theta));
    Vector z(static_cast<Eigen::Index>(predictors_.size() + 1));
    z[0] = 1.0;
    for (std::size_t k = 0; k < predictors_.size(); ++k) {
        z[static_cast<Eigen::Index>(k + 1)] = y[predictors_[k]];
    }
    out = -p * (1.0 - p) * z * z.transpose();
}

double LogisticRegression::sample(std::span<const double> y, const double* theta, Rng& rng) const
{
    return uniform01(rng) < logistic(eta(y, theta)) ? 1.0 : 0.0;
}

Vector LogisticRegression::initial_theta() const
{
    return Vector::Zero(static_cast<Eigen::Index>(parameter_count()));
}

// ---------------------------------------------------------------------------
// StratifiedLogNormalRegression

StratifiedLogNormalRegression::StratifiedLogNormalRegression(std::size_t response, std::size_t stratum_item,
    std::size_t x_item, std::size_t strata)
    : response_(response)
    , stratum_item_(stratum_item)
    , x_item_(x_item)
    , strata_(strata)
{
    require(strata >= 1, "StratifiedLogNormalRegression needs at least one stratum");
    require(response != stratum_item && response != x_item, "StratifiedLogNormalRegression: response overlaps predictors");
}

std::vector<std::string> StratifiedLogNormalRegression::parameter_names() const
{
    std::vector<std::string> out;
    for (std::size_t h = 0; h < strata_; ++h) {
        const auto s = std::to_string(h);
        out.push_back("beta0[" + s + "]");
        out.push_back("beta1[" + s + "]");
        out.push_back("log_sigma2[" + s + "]");
    }
    return out;
}

std::size_t StratifiedLogNormalRegression::stratum_of(std::span<const double> y) const
{
    const double code = y[stratum_item_];
    if (!(code >= 0.0) || code >= static_cast<double>(strata_)) {
        fail(ErrorCode::contract, "stratum code " + format_double(code) + " outside model strata");
    }
    return static_cast<std::size_t>(code);
}

double StratifiedLogNormalRegression::log_density(std::span<const double> y, const double* theta) const
{
    const double v = y[response_];
    const double x = y[x_item_];
    if (!(v > 0.0) || !(x > 0.0)) {
        return -std::numeric_limits<double>::infinity();
    }
    const auto* t = theta + 3 * stratum_of(y);
    const double ly = std::log(v);
    const double r = ly - t[0] - t[1] * std::log(x);
    return -ly - kHalfLog2Pi - 0.5 * t[2] - 0.5 * r * r * std::exp(-t[2]);
}

void StratifiedLogNormalRegression::score(std::span<const double> y, const double* theta, double* out) const
{
    std::fill(out, out + parameter_count(), 0.0);
    const auto h = stratum_of(y);
    const auto* t = theta + 3 * h;
    const double lx = std::log(y[x_item_]);
    const double r = std::log(y[response_]) - t[0] - t[1] * lx;
    const double inv = std::exp(-t[2]);
    out[3 * h] = r * inv;
    out[3 * h + 1] = r * inv * lx;
    out[3 * h + 2] = -0.5 + 0.5 * r * r * inv;
}

void StratifiedLogNormalRegression::score_jacobian(std::span<const double> y, const double* theta,
    Eigen::Ref<Matrix> out) const
{
    out.setZero();
    const auto h = stratum_of(y);
    const auto* t = theta + 3 * h;
    const double lx = std::log(y[x_item_]);
    const double r = std::log(y[response_]) - t[0] - t[1] * lx;
    const double inv = std::exp(-t[2]);
    const auto b = static_cast<Eigen::Index>(3 * h);
    out(b, b) = -inv;
    out(b, b + 1) = out(b + 1, b) = -inv * lx;
    out(b + 1, b + 1) = -inv * lx * lx;
    out(b, b + 2) = out(b + 2, b) = -r * inv;
    out(b + 1, b + 2) = out(b + 2, b + 1) = -r * inv * lx;
    out(b + 2, b + 2) = -0.5 * r * r * inv;
}

double StratifiedLogNormalRegression::sample(std::span<const double> y, const double* theta, Rng& rng) const
{
    const auto* t = theta + 3 * stratum_of(y);
    const double mu = t[0] + t[1] * std::log(y[x_item_]);
    return std::exp(mu + std::exp(0.5 * t[2]) * standard_normal(rng));
}

Vector StratifiedLogNormalRegression::initial_theta() const
{
    return Vector::Zero(static_cast<Eigen::Index>(parameter_count()));
}

std::optional<Vector> StratifiedLogNormalRegression::weighted_fit(std::span<const double> values, std::size_t stride,
    std::span<const double> weights) const
{
    std::vector<std::vector<std::size_t>> rows(strata_);
    for (std::size_t r = 0; r < weights.size(); ++r) {
        if (weights[r] != 0.0) {
            rows[stratum_of(values.subspan(r * stride, stride))].push_back(r);
        }
    }
    Vector theta(static_cast<Eigen::Index>(3 * strata_));
    for (std::size_t h = 0; h < strata_; ++h) {
        const auto& idx = rows[h];
        if (idx.size() < 3) {
            fail(ErrorCode::identifiability, "stratum " + std::to_string(h) + " has fewer than 3 rows for the log-normal fit");
        }
        Matrix Z(static_cast<Eigen::Index>(idx.size()), 2);
        Vector t(static_cast<Eigen::Index>(idx.size()));
        Vector w(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t n = 0; n < idx.size(); ++n) {
            const auto* y = values.data() + idx[n] * stride;
            const auto e = static_cast<Eigen::Index>(n);
            if (!(y[response_] > 0.0) || !(y[x_item_] > 0.0)) {
                fail(ErrorCode::validation, "log-normal model needs positive x and y");
            }
            Z(e, 0) = 1.0;
            Z(e, 1) = std::log(y[x_item_]);
            t[e] = std::log(y[response_]);
            w[e] = weights[idx[n]];
        }
        const auto [beta, s2] = weighted_least_squares(Z, t, w, "log-normal regression in stratum " + std::to_string(h));
        if (!(s2 > 0.0)) {
            fail(ErrorCode::singular, "stratum " + std::to_string(h) + " fits exactly; residual variance is zero");
        }
        const auto b = static_cast<Eigen::Index>(3 * h);
        theta[b] = beta[0];
        theta[b + 1] = beta[1];
        theta[b + 2] = std::log(s2);
    }
    return theta;
}

// ---------------------------------------------------------------------------
// ParametricModel / SequentialModel

std::optional<Vector> ParametricModel::weighted_fit(std::span<const double>, std::size_t, std::span<const double>) const
{
    return std::nullopt;
}

SequentialModel::SequentialModel(std::vector<std::shared_ptr<const ConditionalComponent>> components,
    std::size_t item_count)
    : components_(std::move(components))
    , item_count_(item_count)
{
    require(!components_.empty(), "SequentialModel needs at least one component");
    offsets_.push_back(0);
    std::set<std::size_t> responses;
    for (const auto& c : components_) {
        require(c != nullptr, "SequentialModel: null component");
        require(c->response() < item_count_, "SequentialModel: response item out of range");
        require(responses.insert(c->response()).second, "SequentialModel: two components share a response");
        offsets_.push_back(offsets_.back() + c->parameter_count());
    }
    std::set<std::size_t> seen;
    std::set<std::size_t> covariates;
    for (const auto& c : components_) {
        for (auto k : c->predictors()) {
            require(k < item_count_, "SequentialModel: predictor item out of range");
            if (responses.count(k) != 0U) {
                require(seen.count(k) != 0U, "SequentialModel: a component conditions on a later response");
            } else {
                covariates.insert(k);
            }
        }
        seen.insert(c->response());
    }
    covariates_.assign(covariates.begin(), covariates.end());
}

std::vector<std::string> SequentialModel::parameter_names() const
{
    std::vector<std::string> out;
    for (const auto& c : components_) {
        auto n = c->parameter_names();
        out.insert(out.end(), n.begin(), n.end());
    }
    return out;
}

std::vector<std::size_t> SequentialModel::modeled_items() const
{
    std::vector<std::size_t> out;
    for (const auto& c : components_) {
        out.push_back(c->response());
    }
    return out;
}

double SequentialModel::log_density(std::span<const double> y, const Vector& theta) const
{
    double s = 0.0;
    for (std::size_t c = 0; c < components_.size(); ++c) {
        s += components_[c]->log_density(y, theta.data() + offsets_[c]);
    }
    return s;
}

void SequentialModel::score(std::span<const double> y, const Vector& theta, Eigen::Ref<Vector> out) const
{
    for (std::size_t c = 0; c < components_.size(); ++c) {
        components_[c]->score(y, theta.data() + offsets_[c], out.data() + offsets_[c]);
    }
}

void SequentialModel::score_jacobian(std::span<const double> y, const Vector& theta, Eigen::Ref<Matrix> out) const
{
    out.setZero();
    for (std::size_t c = 0; c < components_.size(); ++c) {
        const auto b = static_cast<Eigen::Index>(offsets_[c]);
        const auto n = static_cast<Eigen::Index>(components_[c]->parameter_count());
        components_[c]->score_jacobian(y, theta.data() + offsets_[c], out.block(b, b, n, n));
    }
}

SequentialModel::Plan SequentialModel::plan(const MissingPattern& pattern) const
{
    require(pattern.size() == item_count_, "missing pattern width does not match the model");
    for (auto k : covariates_) {
        if (!pattern.observed(k)) {
            fail(ErrorCode::contract, "covariate item " + std::to_string(k) + " must be observed");
        }
    }
    Plan p;
    for (std::size_t c = 0; c < components_.size(); ++c) {
        if (!pattern.observed(components_[c]->response())) {
            p.draw.push_back(c);
            continue;
        }
        const auto preds = components_[c]->predictors();
        if (std::any_of(preds.begin(), preds.end(), [&](std::size_t k) { return !pattern.observed(k); })) {
            p.tilt.push_back(c);
        }
    }
    return p;
}

bool SequentialModel::conditional_is_exact(const MissingPattern& pattern) const
{
    return plan(pattern).tilt.empty();
}

void SequentialModel::sample_conditional(const MissingPattern& pattern, std::span<const double> y,
    const Vector& theta, std::size_t M, std::size_t B, Rng& rng, std::vector<double>& out) const
{
    require(y.size() == item_count_, "sample_conditional: row width does not match the model");
    const auto p = plan(pattern);
    std::vector<double> work(y.begin(), y.end());
    const auto draw_once = [&] {
        for (auto c : p.draw) {
            work[components_[c]->response()] = components_[c]->sample(work, theta.data() + offsets_[c], rng);
        }
    };
    if (p.tilt.empty()) {
        for (std::size_t m = 0; m < M; ++m) {
            draw_once();
            out.insert(out.end(), work.begin(), work.end());
        }
        return;
    }
    require(B >= 1, "SIR pool size must be at least 1");
    std::vector<double> pool(B * item_count_);
    std::vector<double> logw(B);
    for (std::size_t m = 0; m < M; ++m) {
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < B; ++b) {
            draw_once();
            std::copy(work.begin(), work.end(), pool.begin() + static_cast<std::ptrdiff_t>(b * item_count_));
            double lw = 0.0;
            for (auto c : p.tilt) {
                lw += components_[c]->log_density(work, theta.data() + offsets_[c]);
            }
            logw[b] = lw;
            top = std::max(top, lw);
        }
        if (!std::isfinite(top)) {
            fail(ErrorCode::underflow, "SIR: every pool weight is zero");
        }
        double total = 0.0;
        for (auto& lw : logw) {
            lw = std::exp(lw - top);
            total += lw;
        }
        const double u = uniform01(rng) * total;
        double acc = 0.0;
        std::size_t pick = B - 1;
        for (std::size_t b = 0; b < B; ++b) {
            acc += logw[b];
            if (u < acc) {
                pick = b;
                break;
            }
        }
        const auto first = pool.begin() + static_cast<std::ptrdiff_t>(pick * item_count_);
        out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(item_count_));
    }
}

double SequentialModel::log_conditional(const MissingPattern& pattern, std::span<const double> y,
    const Vector& theta) const
{
    const auto p = plan(pattern);
    double s = 0.0;
    for (auto c : p.draw) {
        s += components_[c]->log_density(y, theta.data() + offsets_[c]);
    }
    for (auto c : p.tilt) {
        s += components_[c]->log_density(y, theta.data() + offsets_[c]);
    }
    return s;
}

Vector SequentialModel::initial_theta() const
{
    Vector theta(static_cast<Eigen::Index>(parameter_count()));
    for (std::size_t c = 0; c < components_.size(); ++c) {
        theta.segment(static_cast<Eigen::Index>(offsets_[c]), static_cast<Eigen::Index>(components_[c]->parameter_count()))
            = components_[c]->initial_theta();
    }
    return theta;
}

std::optional<Vector> SequentialModel::weighted_fit(std::span<const double> values, std::size_t stride,
    std::span<const double> weights) const
{
    // The log-likelihood separates over components, so each block is fitted
    // on its own, in closed form where possible.
    Vector theta(static_cast<Eigen::Index>(parameter_count()));
    const double total = sum_weights(weights);
    for (std::size_t c = 0; c < components_.size(); ++c) {
        const auto& comp = *components_[c];
        const auto n = static_cast<Eigen::Index>(comp.parameter_count());
        auto block = comp.weighted_fit(values, stride, weights);
        if (!block) {
            const auto eval = [&](const Vector& t, Objective& o, bool derivatives) {
                o.value = 0.0;
                if (derivatives) {
                    o.gradient.setZero();
                    o.hessian.setZero();
                }
                Vector s(n);
                Matrix J(n, n);
                for (std::size_t r = 0; r < weights.size(); ++r) {
                    const double w = weights[r];
                    if (w == 0.0) {
                        continue;
                    }
                    const auto y = values.subspan(r * stride, stride);
                    o.value += w * comp.log_density(y, t.data());
                    if (derivatives) {
                        comp.score(y, t.data(), s.data());
                        comp.score_jacobian(y, t.data(), J);
                        o.gradient += w * s;
                        o.hessian += w * J;
                    }
                }
            };
            FitOptions opt;
            block = newton_maximize(static_cast<std::size_t>(n), eval, comp.initial_theta(), total, opt,
                comp.parameter_names())
                        .theta;
        }
        theta.segment(static_cast<Eigen::Index>(offsets_[c]), n) = *block;
    }
    return theta;
}

BivariateSequentialModel::BivariateSequentialModel(std::shared_ptr<const ConditionalComponent> f1,
    std::shared_ptr<const ConditionalComponent> f2, std::size_t item_count)
    : SequentialModel({ f1, f2 }, item_count)
{
    const auto p2 = f2->predictors();
    require(std::find(p2.begin(), p2.end(), f1->response()) != p2.end(),
        "BivariateSequentialModel: f2 must condition on the response of f1");
}

std::shared_ptr<SequentialModel> make_normal_model(std::size_t response, std::vector<std::size_t> predictors,
    std::size_t item_count)
{
    std::vector<std::shared_ptr<const ConditionalComponent>> comps {
        std::make_shared<GaussianRegression>(response, std::move(predictors))
    };
    return std::make_shared<SequentialModel>(std::move(comps), item_count);
}

// ---------------------------------------------------------------------------
// Fitting

FitResult fit_weighted(const ParametricModel& model, std::span<const double> values, std::size_t stride,
    std::span<const double> weights, const FitOptions& options)
{
    require(values.size() == weights.size() * stride, "fit_weighted: values/weights shape mismatch");
    const double total = sum_weights(weights);
    if (!(total > 0.0)) {
        fail(ErrorCode::identifiability, "pseudo-MLE: no rows with positive weight");
    }
    const auto p = model.parameter_count();
    if (options.closed_form) {
        if (auto theta = model.weighted_fit(values, stride, weights)) {
            Vector g = Vector::Zero(static_cast<Eigen::Index>(p));
            Vector s(static_cast<Eigen::Index>(p));
            for (std::size_t r = 0; r < weights.size(); ++r) {
                if (weights[r] != 0.0) {
                    model.score(values.subspan(r * stride, stride), *theta, s);
                    g += weights[r] * s;
                }
            }
            return FitResult { *theta, 1, g.lpNorm<Eigen::Infinity>() };
        }
    }
    const auto eval = [&](const Vector& t, Objective& o, bool derivatives) {
        o.value = 0.0;
        if (derivatives) {
            o.gradient.setZero();
            o.hessian.setZero();
        }
        Vector s(static_cast<Eigen::Index>(p));
        Matrix J(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
        for (std::size_t r = 0; r < weights.size(); ++r) {
            const double w = weights[r];
            if (w == 0.0) {
                continue;
            }
            const auto y = values.subspan(r * stride, stride);
            o.value += w * model.log_density(y, t);
            if (derivatives) {
                model.score(y, t, s);
                model.score_jacobian(y, t, J);
                o.gradient += w * s;
                o.hessian += w * J;
            }
        }
    };
    const Vector start = options.start ? *options.start : model.initial_theta();
    require(static_cast<std::size_t>(start.size()) == p, "fit_weighted: start has wrong dimension");
    return newton_maximize(p, eval, start, total, options, model.parameter_names());
}

namespace {

void collect_rows(const SurveyDataset& data, const ParametricModel& model, const std::vector<std::size_t>& units,
    std::vector<double>& values, std::vector<double>& weights)
{
    auto needed = model.modeled_items();
    const auto cov = model.covariate_items();
    needed.insert(needed.end(), cov.begin(), cov.end());
    for (auto i : units) {
        const auto& u = data.unit(i);
        for (auto k : needed) {
            if (!u.values.at(k)) {
                fail(ErrorCode::contract, "unit '" + u.id + "' is missing model item '" + data.items()[k].name + "'");
            }
        }
        const auto y = data.filled_values(i);
        values.insert(values.end(), y.begin(), y.end());
        weights.push_back(u.weight);
    }
}

} // namespace

FitResult pseudo_mle(const SurveyDataset& data, const ParametricModel& model, const FitOptions& options)
{
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    std::vector<double> values;
    std::vector<double> weights;
    collect_rows(data, model, all, values, weights);
    return fit_weighted(model, values, data.item_count(), weights, options);
}

Vector imputed_mean_score(const FractionalDataset& fdata, const ParametricModel& model, const Vector& theta)
{
    const auto p = static_cast<Eigen::Index>(model.parameter_count());
    require(theta.size() == p, "imputed_mean_score: theta has wrong dimension");
    Vector total = Vector::Zero(p);
    Vector s(p);
    const auto& base = fdata.base();
    for (std::size_t r = 0; r < fdata.size(); ++r) {
        const double w = base.unit(fdata.row_unit(r)).weight * fdata.row_weight(r);
        if (w == 0.0) {
            continue;
        }
        model.score(fdata.row_values(r), theta, s);
        total += w * s;
    }
    return total;
}

Vector fit_conditional_components(const SurveyDataset& data, const SequentialModel& model, const FitOptions& options)
{
    std::vector<std::size_t> complete;
    auto needed = model.modeled_items();
    const auto cov = model.covariate_items();
    needed.insert(needed.end(), cov.begin(), cov.end());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        if (std::all_of(needed.begin(), needed.end(), [&](std::size_t k) { return u.values.at(k).has_value(); })) {
            complete.push_back(i);
        }
    }
    std::size_t widest = 0;
    for (std::size_t c = 0; c < model.component_count(); ++c) {
        widest = std::max(widest, model.component(c).parameter_count());
    }
    if (complete.size() < widest) {
        fail(ErrorCode::identifiability, "only " + std::to_string(complete.size())
                + " complete cases; the conditional components need at least " + std::to_string(widest));
    }
    std::vector<double> values;
    std::vector<double> weights;
    collect_rows(data, model, complete, values, weights);
    return fit_weighted(model, values, data.item_count(), weights, options).theta;
}

// ---------------------------------------------------------------------------
// Parameter files

std::string parameters_to_json(const std::vector<std::string>& names, const Vector& theta)
{
    require(names.size() == static_cast<std::size_t>(theta.size()), "parameter names and values differ in length");
    nlohmann::ordered_json doc;
    doc["parameters"] = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < names.size(); ++k) {
        doc["parameters"].push_back({ { "name", names[k] }, { "value", theta[static_cast<Eigen::Index>(k)] } });
    }
    return doc.dump(2) + "\n";
}

void save_parameters(const std::filesystem::path& path, const std::vector<std::string>& names, const Vector& theta)
{
    write_file_atomic(path, parameters_to_json(names, theta));
}

std::pair<std::vector<std::string>, Vector> load_parameters(const std::filesystem::path& path)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::parse, path.string() + ": " + e.what());
    }
    if (!doc.contains("parameters") || !doc["parameters"].is_array()) {
        fail(ErrorCode::parse, path.string() + ": expected a 'parameters' array");
    }
    std::vector<std::string> names;
    std::vector<double> values;
    for (const auto& entry : doc["parameters"]) {
        if (!entry.contains("name") || !entry.contains("value") || !entry["value"].is_number()) {
            fail(ErrorCode::parse, path.string() + ": parameter entries need 'name' and numeric 'value'");
        }
        names.push_back(entry["name"].get<std::string>());
        values.push_back(entry["value"].get<double>());
    }
    return { names, Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())) };
}

// ---------------------------------------------------------------------------
// Logistic fit

LogisticFit fit_logistic(const Matrix& design, std::span<const double> response, std::span<const double> weights,
    const FitOptions& options)
{
    const auto n = design.rows();
    const auto p = design.cols();
    require(static_cast<std::size_t>(n) == response.size() && response.size() == weights.size(),
        "fit_logistic: dimension mismatch");
    double w1 = 0.0;
    double w0 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        (response[k] > 0.5 ? w1 : w0) += weights[k];
    }
    if (!(w1 > 0.0) || !(w0 > 0.0)) {
        fail(ErrorCode::identifiability, "logistic fit needs both response classes");
    }
    const auto eval = [&](const Vector& phi, Objective& o, bool derivatives) {
        const Vector eta = design * phi;
        o.value = 0.0;
        if (derivatives) {
            o.gradient.setZero();
            o.hessian.setZero();
        }
        Vector c(n);
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            o.value += weights[k] * (response[k] * eta[i] - softplus(eta[i]));
            const double pr = logistic(eta[i]);
            c[i] = weights[k] * (response[k] - pr);
            v[i] = weights[k] * pr * (1.0 - pr);
        }
        if (derivatives) {
            o.gradient = design.transpose() * c;
            o.hessian = -(design.transpose() * v.asDiagonal() * design);
        }
    };
    FitResult fit;
    try {
        fit = newton_maximize(static_cast<std::size_t>(p), eval, options.start ? *options.start : Vector::Zero(p),
            w0 + w1, options, {});
    } catch (const Error& e) {
        if (e.code() == ErrorCode::non_convergence || e.code() == ErrorCode::singular) {
            fail(ErrorCode::separation, std::string("logistic fit: data appear separated (") + e.what() + ")");
        }
        throw;
    }
    const Vector eta = design * fit.theta;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (weights[static_cast<std::size_t>(i)] > 0.0 && std::abs(eta[i]) > 35.0) {
            fail(ErrorCode::separation, "logistic fit: a linear predictor exceeds 35 in magnitude; data appear separated");
        }
    }
    return LogisticFit { fit.theta, fit.iterations };
}

} // namespace fracimp
