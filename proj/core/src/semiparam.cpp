#include "fracimp/semiparam.hpp"

#include "fracimp/error.hpp"
#include "fracimp/parallel.hpp"
#include "fracimp/pfi.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fracimp {

namespace {

std::vector<std::size_t> respondents_of(const SurveyDataset& data, std::size_t y_item)
{
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.unit(i).values[y_item]) {
            r.push_back(i);
        }
    }
    return r;
}

// Every item other than y must be observed.
void require_only_y_missing(const SurveyDataset& data, std::size_t y_item, const char* who)
{
    require(y_item < data.item_count(), std::string(who) + ": y item out of range");
    for (const auto& u : data.units()) {
        for (std::size_t k = 0; k < data.item_count(); ++k) {
            if (k != y_item && !u.values[k]) {
                fail(ErrorCode::contract, std::string(who) + ": unit '" + u.id + "' is missing item '"
                        + data.items()[k].name + "'; only the study variable may be missing");
            }
        }
    }
}

double quantile_sorted(const std::vector<double>& v, double p)
{
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double logsumexp(std::span<const double> a)
{
    double top = -std::numeric_limits<double>::infinity();
    for (double v : a) {
        top = std::max(top, v);
    }
    if (!std::isfinite(top)) {
        return top;
    }
    double s = 0.0;
    for (double v : a) {
        s += std::exp(v - top);
    }
    return top + std::log(s);
}

} // namespace

double KernelSpec::evaluate(double u) const
{
    switch (kernel) {
    case Kernel::gaussian:
        return std::exp(-0.5 * u * u);
    case Kernel::epanechnikov:
        return std::abs(u) < 1.0 ? 0.75 * (1.0 - u * u) : 0.0;
    }
    return 0.0;
}

double silverman_bandwidth(std::span<const double> x)
{
    require(!x.empty(), "silverman_bandwidth: no values");
    std::vector<double> v(x.begin(), x.end());
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : v) {
        ss += (a - mean) * (a - mean);
    }
    const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    const double iqr = quantile_sorted(v, 0.75) - quantile_sorted(v, 0.25);
    double spread = std::min(sd, iqr / 1.34);
    if (!(spread > 0.0)) {
        spread = sd;
    }
    if (!(spread > 0.0)) {
        return 1.0;
    }
    return 0.9 * spread * std::pow(n, -0.2);
}

KernelFIResult kernel_fi(std::shared_ptr<const SurveyDataset> data, const std::vector<std::size_t>& x_items,
    std::size_t y_item, const EstimatingFunction& U, const KernelSpec& spec, const SolverOptions& solver,
    unsigned threads)
{
    require(data != nullptr, "kernel_fi: null data set");
    require(!x_items.empty(), "kernel_fi: no covariates");
    if (x_items.size() > 1 && !spec.product_kernel) {
        fail(ErrorCode::config, "kernel_fi: more than one covariate needs product_kernel");
    }
    require_only_y_missing(*data, y_item, "kernel_fi");
    for (auto k : x_items) {
        require(k < data->item_count() && k != y_item, "kernel_fi: invalid covariate item");
    }
    const auto R = respondents_of(*data, y_item);
    if (R.empty()) {
        fail(ErrorCode::no_solution, "kernel_fi: no respondents to donate values");
    }

    const auto d = x_items.size();
    KernelFIResult res;
    if (spec.bandwidth.empty()) {
        for (auto k : x_items) {
            std::vector<double> x;
            x.reserve(R.size());
            for (auto j : R) {
                x.push_back(*data->unit(j).values[k]);
            }
            res.bandwidth.push_back(silverman_bandwidth(x));
        }
    } else {
        if (spec.bandwidth.size() != d) {
            fail(ErrorCode::config, "kernel_fi: one bandwidth per covariate required");
        }
        for (double h : spec.bandwidth) {
            if (!(h > 0.0) || !std::isfinite(h)) {
                fail(ErrorCode::config, "kernel_fi: bandwidth must be positive");
            }
        }
        res.bandwidth = spec.bandwidth;
    }

    const auto n = data->size();
    std::vector<std::vector<double>> weights(n);
    parallel_for(n, threads, [&](std::size_t i) {
        const auto& u = data->unit(i);
        if (u.values[y_item]) {
            return;
        }
        auto& w = weights[i];
        w.resize(R.size());
        double total = 0.0;
        for (std::size_t j = 0; j < R.size(); ++j) {
            const auto& v = data->unit(R[j]);
            double k = 1.0;
            for (std::size_t a = 0; a < d; ++a) {
                k *= spec.evaluate((*u.values[x_items[a]] - *v.values[x_items[a]]) / res.bandwidth[a]);
            }
            w[j] = k;
            total += k;
        }
        if (!(total > 0.0)) {
            fail(ErrorCode::underflow, "kernel_fi: every kernel weight vanishes for unit '" + u.id
                    + "'; the bandwidth is too small");
        }
        for (auto& x : w) {
            x /= total;
        }
    });

    FractionalBuilder builder(data);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data->filled_values(i);
        if (weights[i].empty()) {
            builder.add(i, 0, row, 1.0);
            continue;
        }
        for (std::size_t j = 0; j < R.size(); ++j) {
            row[y_item] = *data->unit(R[j]).values[y_item];
            builder.add(i, static_cast<int>(R[j]), row, weights[i][j]);
        }
    }
    res.fdata = std::move(builder).build();
    res.estimate = solve_fractional(res.fdata, U, std::nullopt, std::nullopt, solver);
    return res;
}

SfiResult sfi_em(std::shared_ptr<const SurveyDataset> data, const ParametricModel& model, std::size_t y_item,
    const SfiOptions& options)
{
    require(data != nullptr, "sfi_em: null data set");
    require_only_y_missing(*data, y_item, "sfi_em");
    const auto modeled = model.modeled_items();
    if (modeled.size() != 1 || modeled[0] != y_item) {
        fail(ErrorCode::contract, "sfi_em: the model must describe the study variable alone");
    }
    const auto R = respondents_of(*data, y_item);
    if (R.empty()) {
        fail(ErrorCode::no_solution, "sfi_em: no respondents to donate values");
    }
    const auto n = data->size();
    const auto r = R.size();

    FractionalBuilder builder(data);
    std::vector<double> resp_values;
    std::vector<double> resp_weights;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data->filled_values(i);
        if (data->unit(i).values[y_item]) {
            builder.add(i, 0, row, 1.0);
            resp_values.insert(resp_values.end(), row.begin(), row.end());
            resp_weights.push_back(data->unit(i).weight);
            continue;
        }
        for (std::size_t j = 0; j < r; ++j) {
            row[y_item] = *data->unit(R[j]).values[y_item];
            builder.add(i, static_cast<int>(R[j]), row, 1.0 / static_cast<double>(r));
        }
    }
    FractionalDataset fdata = std::move(builder).build();

    const auto completed_mean = [&](const FractionalDataset& f) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t row = 0; row < f.size(); ++row) {
            num += data->unit(f.row_unit(row)).weight * f.row_weight(row) * f.row_values(row)[y_item];
        }
        for (const auto& u : data->units()) {
            den += u.weight;
        }
        return num / den;
    };

    // A single donor takes weight one whatever theta is.
    if (r == 1) {
        SfiResult res;
        res.theta = options.theta0 ? *options.theta0 : model.initial_theta();
        res.mean = completed_mean(fdata);
        res.fdata = std::move(fdata);
        res.converged = true;
        return res;
    }

    Vector theta;
    if (options.theta0) {
        theta = *options.theta0;
    } else {
        FitOptions fo;
        fo.closed_form = options.closed_form_mstep;
        theta = fit_weighted(model, resp_values, data->item_count(), resp_weights, fo).theta;
    }

    // log f(y_j | x_i; theta) for every unit i and donor j.
    std::vector<double> logf(n * r);
    const auto weights_at = [&](const Vector& th) {
        parallel_for(n, options.threads, [&](std::size_t i) {
            auto row = data->filled_values(i);
            for (std::size_t j = 0; j < r; ++j) {
                row[y_item] = *data->unit(R[j]).values[y_item];
                logf[i * r + j] = model.log_density(row, th);
            }
        });
        std::vector<double> log_denom(r);
        std::vector<double> terms(r);
        for (std::size_t j = 0; j < r; ++j) {
            for (std::size_t k = 0; k < r; ++k) {
                terms[k] = std::log(data->unit(R[k]).weight) + logf[R[k] * r + j];
            }
            log_denom[j] = logsumexp(terms);
            if (!std::isfinite(log_denom[j])) {
                fail(ErrorCode::underflow, "sfi_em: zero density denominator for donor '" + data->unit(R[j]).id + "'");
            }
        }
        std::vector<double> w(fdata.size());
        for (std::size_t i = 0; i < n; ++i) {
            const auto [b, e] = fdata.unit_rows(i);
            if (e - b == 1 && data->unit(i).values[y_item]) {
                w[b] = 1.0;
                continue;
            }
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < r; ++j) {
                w[b + j] = logf[i * r + j] - log_denom[j];
                top = std::max(top, w[b + j]);
            }
            if (!std::isfinite(top)) {
                fail(ErrorCode::underflow, "sfi_em: all fractional weights underflow for unit '" + data->unit(i).id + "'");
            }
            double total = 0.0;
            for (std::size_t j = 0; j < r; ++j) {
                w[b + j] = std::exp(w[b + j] - top);
                total += w[b + j];
            }
            for (std::size_t j = 0; j < r; ++j) {
                w[b + j] /= total;
            }
        }
        return w;
    };

    SfiResult res;
    for (std::size_t it = 1; it <= options.max_iter; ++it) {
        fdata = fdata.with_weights(weights_at(theta));
        const Vector next = m_step(fdata, model, theta, options.closed_form_mstep);
        const double change = (next - theta).lpNorm<Eigen::Infinity>();
        theta = next;
        res.iterations = it;
        if (change < options.tol) {
            res.converged = true;
            break;
        }
    }
    res.fdata = fdata.with_weights(weights_at(theta));
    res.theta = theta;
    res.mean = completed_mean(res.fdata);
    return res;
}

PropensityFit fit_propensity(const SurveyDataset& data, std::size_t y_item, const std::vector<std::size_t>& covariates,
    const PropensityOptions& options)
{
    require(y_item < data.item_count(), "fit_propensity: y item out of range");
    if (!options.transforms.empty() && options.transforms.size() != covariates.size()) {
        fail(ErrorCode::config, "fit_propensity: one transform per covariate required");
    }
    const auto n = data.size();
    Matrix z(n, covariates.size() + 1);
    std::vector<double> delta(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& u = data.unit(i);
        z(i, 0) = 1.0;
        for (std::size_t c = 0; c < covariates.size(); ++c) {
            const auto& v = u.values.at(covariates[c]);
            if (!v) {
                fail(ErrorCode::contract, "fit_propensity: unit '" + u.id + "' is missing covariate '"
                        + data.items()[covariates[c]].name + "'");
            }
            double t = *v;
            if (!options.transforms.empty() && options.transforms[c] == CovariateTransform::log) {
                if (!(t > 0.0)) {
                    fail(ErrorCode::validation, "fit_propensity: log transform of a nonpositive value for unit '"
                            + u.id + "'");
                }
                t = std::log(t);
            }
            z(i, c + 1) = t;
        }
        delta[i] = u.values[y_item] ? 1.0 : 0.0;
        w[i] = u.weight;
    }

    std::vector<Eigen::Index> keep { 0 };
    for (Eigen::Index c = 1; c < z.cols(); ++c) {
        if (n > 0 && (z.col(c).array() != z(0, c)).any()) {
            keep.push_back(c);
        }
    }
    Matrix design(n, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c) {
        design.col(static_cast<Eigen::Index>(c)) = z.col(keep[c]);
    }
    const auto fit = fit_logistic(design, delta, w, options.fit);

    PropensityFit res;
    res.phi = Vector::Zero(z.cols());
    for (std::size_t c = 0; c < keep.size(); ++c) {
        res.phi(keep[c]) = fit.phi(static_cast<Eigen::Index>(c));
    }
    res.iterations = fit.iterations;
    const Vector eta = z * res.phi;

    if (options.normalize) {
        double total = 0.0;
        double resp = 0.0;
        double tail = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            total += w[i];
            if (delta[i] == 1.0) {
                resp += w[i];
                tail += w[i] * std::exp(-eta(static_cast<Eigen::Index>(i)));
            }
        }
        res.shift = -std::log((total - resp) / tail);
        res.phi(0) += res.shift;
    }
    res.pi.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        res.pi[i] = 1.0 / (1.0 + std::exp(-(eta(static_cast<Eigen::Index>(i)) + res.shift)));
    }
    return res;
}

double OutcomeFit::predict(std::span<const double> y) const
{
    double m = beta(0);
    Eigen::Index col = 1;
    for (std::size_t c = 0; c < covariates.size(); ++c) {
        const double v = y[covariates[c]];
        if (levels[c] == 0) {
            m += beta(col++) * v;
            continue;
        }
        const auto code = static_cast<std::size_t>(v);
        if (code >= 1 && code < levels[c]) {
            m += beta(col + static_cast<Eigen::Index>(code) - 1);
        }
        col += static_cast<Eigen::Index>(levels[c]) - 1;
    }
    return m;
}

OutcomeFit fit_outcome_regression(const SurveyDataset& data, std::size_t y_item,
    const std::vector<std::size_t>& covariates)
{
    require(y_item < data.item_count(), "fit_outcome_regression: y item out of range");
    OutcomeFit fit;
    fit.covariates = covariates;
    Eigen::Index p = 1;
    for (auto c : covariates) {
        require(c < data.item_count() && c != y_item, "fit_outcome_regression: invalid covariate item");
        const auto& item = data.items()[c];
        std::size_t levels = 0;
        if (item.kind == ItemKind::categorical) {
            levels = std::max<std::size_t>(item.labels.size(), 1);
            for (const auto& u : data.units()) {
                if (u.values[c]) {
                    levels = std::max(levels, static_cast<std::size_t>(*u.values[c]) + 1);
                }
            }
            p += static_cast<Eigen::Index>(levels) - 1;
        } else {
            p += 1;
        }
        fit.levels.push_back(levels);
    }
    const auto R = respondents_of(data, y_item);
    Matrix X = Matrix::Zero(static_cast<Eigen::Index>(R.size()), p);
    Vector y(static_cast<Eigen::Index>(R.size()));
    for (std::size_t a = 0; a < R.size(); ++a) {
        const auto& u = data.unit(R[a]);
        const auto row = static_cast<Eigen::Index>(a);
        const double sw = std::sqrt(u.weight);
        X(row, 0) = sw;
        Eigen::Index col = 1;
        for (std::size_t c = 0; c < covariates.size(); ++c) {
            const auto& v = u.values[covariates[c]];
            if (!v) {
                fail(ErrorCode::contract, "fit_outcome_regression: respondent '" + u.id + "' is missing covariate '"
                        + data.items()[covariates[c]].name + "'");
            }
            if (fit.levels[c] == 0) {
                X(row, col++) = sw * *v;
                continue;
            }
            const auto code = static_cast<std::size_t>(*v);
            if (code >= 1) {
                X(row, col + static_cast<Eigen::Index>(code) - 1) = sw;
            }
            col += static_cast<Eigen::Index>(fit.levels[c]) - 1;
        }
        y(row) = sw * *u.values[y_item];
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    if (qr.rank() < p) {
        fail(ErrorCode::singular, "fit_outcome_regression: the working model is degenerate (rank "
                + std::to_string(qr.rank()) + " < " + std::to_string(p) + ")");
    }
    fit.beta = qr.solve(y);
    return fit;
}

DRFIResult dr_fi(std::shared_ptr<const SurveyDataset> data, std::size_t y_item, const OutcomeFit& outcome,
    const PropensityFit& propensity, const EstimatingFunction& U, const SolverOptions& solver)
{
    require(data != nullptr, "dr_fi: null data set");
    require_only_y_missing(*data, y_item, "dr_fi");
    const auto n = data->size();
    require(propensity.pi.size() == n, "dr_fi: one propensity per unit required");
    const auto R = respondents_of(*data, y_item);

    DRFIResult res;
    res.donor_weight.assign(n, 0.0);
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = outcome.predict(data->filled_values(i));
    }
    double denom = 0.0;
    for (auto j : R) {
        const double pi = propensity.pi[j];
        require(pi > 0.0 && pi <= 1.0, "dr_fi: propensities must lie in (0, 1]");
        res.donor_weight[j] = data->unit(j).weight * (1.0 / pi - 1.0);
        denom += res.donor_weight[j];
    }
    const bool any_missing = R.size() < n;
    if (any_missing && !(denom > 0.0)) {
        fail(ErrorCode::no_solution, "dr_fi: every respondent has propensity 1, so all donor weights are zero");
    }
    if (denom > 0.0) {
        for (auto j : R) {
            res.donor_weight[j] /= denom;
        }
    }

    FractionalBuilder builder(data);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& u = data->unit(i);
        auto row = data->filled_values(i);
        if (u.values[y_item]) {
            builder.add(i, 0, row, 1.0);
            res.total_fi += u.weight * *u.values[y_item];
            continue;
        }
        double imputed = 0.0;
        for (auto j : R) {
            row[y_item] = m[i] + (*data->unit(j).values[y_item] - m[j]);
            builder.add(i, static_cast<int>(j), row, res.donor_weight[j]);
            imputed += res.donor_weight[j] * row[y_item];
        }
        res.total_fi += u.weight * imputed;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& u = data->unit(i);
        double term = m[i];
        if (u.values[y_item]) {
            term += (*u.values[y_item] - m[i]) / propensity.pi[i];
        }
        res.total_dr += u.weight * term;
    }
    res.fdata = std::move(builder).build();
    res.estimate = solve_fractional(res.fdata, U, std::nullopt, std::nullopt, solver);
    return res;
}

} // namespace fracimp
