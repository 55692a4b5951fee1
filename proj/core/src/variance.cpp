#include "fracimp/variance.hpp"

#include "fracimp/error.hpp"
#include "fracimp/parallel.hpp"

#include <cmath>
#include <sstream>

namespace fracimp {

ReplicationScheme::ReplicationScheme(std::vector<double> weights, std::vector<std::size_t> strata)
    : weights_(std::move(weights))
    , strata_(std::move(strata))
{
    require(weights_.size() == strata_.size(), "ReplicationScheme: one stratum per unit required");
    for (auto h : strata_) {
        if (h >= sizes_.size()) {
            sizes_.resize(h + 1, 0);
        }
        ++sizes_[h];
    }
    for (std::size_t h = 0; h < sizes_.size(); ++h) {
        if (sizes_[h] == 1) {
            fail(ErrorCode::validation, "delete-1 jackknife: stratum " + std::to_string(h)
                    + " has a single unit; every stratum needs at least two");
        }
    }
}

double ReplicationScheme::scale(std::size_t k) const
{
    const double n = static_cast<double>(sizes_[strata_.at(k)]);
    return n / (n - 1.0);
}

double ReplicationScheme::factor(std::size_t k) const
{
    const double n = static_cast<double>(sizes_[strata_.at(k)]);
    return (n - 1.0) / n;
}

double ReplicationScheme::weight(std::size_t k, std::size_t i) const
{
    if (i == k) {
        return 0.0;
    }
    return strata_.at(i) == strata_.at(k) ? weights_[i] * scale(k) : weights_[i];
}

std::vector<double> ReplicationScheme::weights(std::size_t k) const
{
    std::vector<double> w(weights_.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = weight(k, i);
    }
    return w;
}

ReplicationScheme build_delete1(const SurveyDataset& data)
{
    require(!data.empty(), "build_delete1: empty data set");
    return ReplicationScheme(data.weights(), data.stratum_codes());
}

double jackknife_variance(std::span<const double> replicates, const ReplicationScheme& scheme, double eta_hat)
{
    require(replicates.size() == scheme.size(), "jackknife_variance: one replicate per unit required");
    double v = 0.0;
    for (std::size_t k = 0; k < replicates.size(); ++k) {
        const double d = replicates[k] - eta_hat;
        v += scheme.factor(k) * d * d;
    }
    return v;
}

ReplicateEngine::ReplicateEngine(const PFIResult& result, std::shared_ptr<const ParametricModel> model,
    ReplicationScheme scheme, ReplicateOptions options)
    : imps_(result.imputations)
    , fdata_(result.fdata)
    , model_(std::move(model))
    , theta_(result.theta)
    , scheme_(std::move(scheme))
    , options_(options)
{
    require(model_ != nullptr, "ReplicateEngine: null model");
    const auto& base = fdata_.base();
    require(scheme_.size() == base.size(), "ReplicateEngine: scheme does not match the data set");
    require(fdata_.size() == imps_.size(), "ReplicateEngine: imputations do not match the fractional data");
    const auto p = static_cast<Eigen::Index>(model_->parameter_count());
    const auto n = base.size();
    sbar_.assign(n, Vector::Zero(p));
    a_.assign(n, Matrix::Zero(p, p));
    parallel_for(n, options_.threads, [&](std::size_t i) {
        const auto [b, e] = fdata_.unit_rows(i);
        std::vector<Vector> s(e - b, Vector(p));
        Matrix jac(p, p);
        for (std::size_t r = b; r < e; ++r) {
            model_->score(fdata_.row_values(r), theta_, s[r - b]);
            sbar_[i] += fdata_.row_weight(r) * s[r - b];
        }
        for (std::size_t r = b; r < e; ++r) {
            model_->score_jacobian(fdata_.row_values(r), theta_, jac);
            const Vector c = s[r - b] - sbar_[i];
            a_[i].noalias() += fdata_.row_weight(r) * (jac + c * c.transpose());
        }
    });
    j_stratum_.assign(scheme_.stratum_count(), Matrix::Zero(p, p));
    g_stratum_.assign(scheme_.stratum_count(), Vector::Zero(p));
    for (std::size_t i = 0; i < n; ++i) {
        const double w = scheme_.base_weights()[i];
        j_stratum_[scheme_.stratum(i)] += w * a_[i];
        g_stratum_[scheme_.stratum(i)] += w * sbar_[i];
    }
    j_all_ = Matrix::Zero(p, p);
    g_all_ = Vector::Zero(p);
    for (std::size_t h = 0; h < j_stratum_.size(); ++h) {
        j_all_ += j_stratum_[h];
        g_all_ += g_stratum_[h];
    }
}

Vector ReplicateEngine::newton(const Matrix& J, const Vector& score, bool& singular) const
{
    // -J is the observed information; it must be positive definite.
    const Matrix info = -J;
    Eigen::LDLT<Matrix> ldlt(info);
    singular = ldlt.info() != Eigen::Success || !ldlt.isPositive();
    if (!singular) {
        const double lo = ldlt.vectorD().minCoeff();
        const double hi = ldlt.vectorD().cwiseAbs().maxCoeff();
        singular = !(lo > 1e-12 * hi);
    }
    if (singular) {
        return theta_;
    }
    return theta_ + ldlt.solve(score);
}

Vector ReplicateEngine::em(std::span<const double> unit_weights) const
{
    Vector theta = theta_;
    std::vector<double> W(imps_.size());
    FitOptions fo;
    fo.closed_form = options_.closed_form_mstep;
    for (std::size_t t = 0; t < options_.max_em_iter; ++t) {
        const auto w = fractional_weights(theta);
        for (std::size_t r = 0; r < W.size(); ++r) {
            W[r] = unit_weights[imps_.row_unit(r)] * w[r];
        }
        fo.start = theta;
        const Vector next = fit_weighted(*model_, imps_.values(), imps_.stride(), W, fo).theta;
        const double change = (next - theta).lpNorm<Eigen::Infinity>();
        theta = next;
        if (change < options_.em_tol) {
            return theta;
        }
    }
    return theta;
}

Vector ReplicateEngine::replicate_theta(std::size_t k, std::string* warning) const
{
    return replicate_theta(k, options_.method, warning);
}

Vector ReplicateEngine::replicate_theta(std::size_t k, ReplicateMethod method, std::string* warning) const
{
    require(k < scheme_.size(), "replicate_theta: replicate index out of range");
    if (method == ReplicateMethod::em) {
        return em(scheme_.weights(k));
    }
    const auto h = scheme_.stratum(k);
    const double c = scheme_.scale(k);
    const double wk = scheme_.base_weights()[k];
    const Matrix J = j_all_ + (c - 1.0) * j_stratum_[h] - c * wk * a_[k];
    const Vector s = g_all_ + (c - 1.0) * g_stratum_[h] - c * wk * sbar_[k];
    bool singular = false;
    Vector theta = newton(J, s, singular);
    if (singular) {
        if (warning != nullptr) {
            *warning = "replicate " + std::to_string(k) + ": singular Jacobian, used EM instead";
        }
        return em(scheme_.weights(k));
    }
    return theta;
}

Vector ReplicateEngine::theta_for_weights(std::span<const double> unit_weights, ReplicateMethod method,
    std::string* warning) const
{
    require(unit_weights.size() == scheme_.size(), "theta_for_weights: one weight per unit required");
    if (method == ReplicateMethod::em) {
        return em(unit_weights);
    }
    const auto p = static_cast<Eigen::Index>(model_->parameter_count());
    Matrix J = Matrix::Zero(p, p);
    Vector s = Vector::Zero(p);
    for (std::size_t i = 0; i < unit_weights.size(); ++i) {
        J += unit_weights[i] * a_[i];
        s += unit_weights[i] * sbar_[i];
    }
    bool singular = false;
    Vector theta = newton(J, s, singular);
    if (singular) {
        if (warning != nullptr) {
            *warning = "singular Jacobian, used EM instead";
        }
        return em(unit_weights);
    }
    return theta;
}

std::vector<double> ReplicateEngine::fractional_weights(const Vector& theta) const
{
    return w_step(imps_, *model_, theta);
}

EEEstimate ReplicateEngine::replicate_eta(std::size_t k, const Vector& theta_k, const EstimatingFunction& U,
    const SolverOptions& solver) const
{
    const auto unit_w = scheme_.weights(k);
    const auto frac_w = fractional_weights(theta_k);
    return solve_fractional(fdata_, U, std::span<const double>(unit_w), std::span<const double>(frac_w), solver);
}

ReplicateEstimates ReplicateEngine::run(const std::vector<EstimatingFunction>& U, const SolverOptions& solver) const
{
    const auto K = scheme_.size();
    ReplicateEstimates out;
    out.method = options_.method;
    out.theta.resize(K);
    out.eta.assign(K, std::vector<double>(U.size()));
    std::vector<std::string> warnings(K);
    parallel_for(K, options_.threads, [&](std::size_t k) {
        out.theta[k] = replicate_theta(k, &warnings[k]);
        const auto unit_w = scheme_.weights(k);
        const auto frac_w = fractional_weights(out.theta[k]);
        for (std::size_t q = 0; q < U.size(); ++q) {
            out.eta[k][q] = solve_fractional(fdata_, U[q], std::span<const double>(unit_w),
                std::span<const double>(frac_w), solver)
                                .value();
        }
    });
    for (auto& w : warnings) {
        if (!w.empty()) {
            out.warnings.push_back(std::move(w));
        }
    }
    return out;
}

std::vector<double> jackknife_variances(const ReplicateEstimates& estimates, const ReplicationScheme& scheme,
    std::span<const double> eta_hat)
{
    require(estimates.eta.size() == scheme.size(), "jackknife_variances: one replicate per unit required");
    std::vector<double> v(eta_hat.size(), 0.0);
    for (std::size_t q = 0; q < eta_hat.size(); ++q) {
        std::vector<double> reps(scheme.size());
        for (std::size_t k = 0; k < reps.size(); ++k) {
            reps[k] = estimates.eta[k].at(q);
        }
        v[q] = jackknife_variance(reps, scheme, eta_hat[q]);
    }
    return v;
}

std::vector<double> fixed_weight_replicates(const FractionalDataset& fdata, const ReplicationScheme& scheme,
    const EstimatingFunction& U, const SolverOptions& solver, unsigned threads)
{
    require(scheme.size() == fdata.base().size(), "fixed_weight_replicates: scheme does not match the data set");
    std::vector<double> out(scheme.size());
    parallel_for(scheme.size(), threads, [&](std::size_t k) {
        const auto w = scheme.weights(k);
        out[k] = solve_fractional(fdata, U, std::span<const double>(w), std::nullopt, solver).value();
    });
    return out;
}

std::string replicate_csv(const ReplicateEstimates& estimates, const std::vector<std::string>& theta_names,
    const std::vector<std::string>& eta_names)
{
    std::ostringstream out;
    out << 'k';
    for (const auto& n : theta_names) {
        out << ',' << quote_csv_field(n);
    }
    for (const auto& n : eta_names) {
        out << ',' << quote_csv_field(n);
    }
    out << '\n';
    for (std::size_t k = 0; k < estimates.theta.size(); ++k) {
        out << k;
        for (Eigen::Index a = 0; a < estimates.theta[k].size(); ++a) {
            out << ',' << format_double(estimates.theta[k][a]);
        }
        for (double e : estimates.eta[k]) {
            out << ',' << format_double(e);
        }
        out << '\n';
    }
    return out.str();
}

} // namespace fracimp
