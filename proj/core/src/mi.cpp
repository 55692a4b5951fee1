#include "fracimp/mi.hpp"

#include "fracimp/error.hpp"
#include "fracimp/parallel.hpp"
#include "fracimp/rng.hpp"

#include <cmath>
#include <sstream>

namespace fracimp {

namespace {

struct StratumFit {
    Eigen::Vector2d beta;
    Eigen::Matrix2d xtx_inv;
    double ssr = 0.0;
    std::size_t n = 0;
};

double chi_squared(std::size_t df, Rng& rng)
{
    double s = 0.0;
    for (std::size_t k = 0; k < df; ++k) {
        const double z = standard_normal(rng);
        s += z * z;
    }
    return s;
}

} // namespace

std::vector<SurveyDataset> mi_impute(const SurveyDataset& data, const StratifiedLogNormalRegression& model,
    std::size_t m, std::uint64_t seed, const MIOptions& options)
{
    require(m >= 1, "mi_impute: m must be at least 1");
    const auto y_item = model.response();
    const auto s_item = model.stratum_item();
    const auto x_item = model.x_item();
    const auto H = model.strata();

    std::vector<std::vector<std::size_t>> resp(H);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        if (!u.values[s_item] || !u.values[x_item]) {
            fail(ErrorCode::contract, "mi_impute: unit '" + u.id + "' is missing its stratum or covariate");
        }
        const auto h = static_cast<std::size_t>(*u.values[s_item]);
        require(h < H, "mi_impute: stratum code out of range");
        if (u.values[y_item]) {
            resp[h].push_back(i);
        }
    }

    std::vector<StratumFit> fits(H);
    for (std::size_t h = 0; h < H; ++h) {
        auto& f = fits[h];
        f.n = resp[h].size();
        if (f.n == 0) {
            fail(ErrorCode::identifiability, "mi_impute: stratum " + std::to_string(h) + " has no respondents");
        }
        if (f.n < 3) {
            fail(ErrorCode::identifiability, "mi_impute: stratum " + std::to_string(h)
                    + " has fewer than three respondents; the posterior is improper");
        }
        Eigen::Matrix2d xtx = Eigen::Matrix2d::Zero();
        Eigen::Vector2d xtz = Eigen::Vector2d::Zero();
        for (auto i : resp[h]) {
            const auto& u = data.unit(i);
            const Eigen::Vector2d x(1.0, std::log(*u.values[x_item]));
            xtx += x * x.transpose();
            xtz += x * std::log(*u.values[y_item]);
        }
        if (std::abs(xtx.determinant()) <= 1e-12 * xtx.squaredNorm()) {
            fail(ErrorCode::singular, "mi_impute: log x is constant among respondents of stratum " + std::to_string(h));
        }
        f.xtx_inv = xtx.inverse();
        f.beta = f.xtx_inv * xtz;
        for (auto i : resp[h]) {
            const auto& u = data.unit(i);
            const double e = std::log(*u.values[y_item]) - f.beta(0) - f.beta(1) * std::log(*u.values[x_item]);
            f.ssr += e * e;
        }
    }

    std::vector<SurveyDataset> out(m);
    parallel_for(m, options.threads, [&](std::size_t k) {
        std::vector<Eigen::Vector2d> beta(H);
        std::vector<double> sigma(H);
        for (std::size_t h = 0; h < H; ++h) {
            auto rng = substream(derive_seed(seed, Stream::posterior, k), Stream::posterior, h);
            const auto& f = fits[h];
            const double sigma2 = f.ssr > 0.0 ? f.ssr / chi_squared(f.n - 2, rng) : 0.0;
            const Eigen::Matrix2d L = Eigen::LLT<Eigen::Matrix2d>(f.xtx_inv).matrixL();
            const Eigen::Vector2d z(standard_normal(rng), standard_normal(rng));
            beta[h] = f.beta + std::sqrt(sigma2) * (L * z);
            sigma[h] = std::sqrt(sigma2);
        }
        auto units = data.units();
        for (std::size_t i = 0; i < units.size(); ++i) {
            auto& u = units[i];
            if (u.values[y_item]) {
                continue;
            }
            auto rng = substream(derive_seed(seed, Stream::imputation, k), Stream::imputation, i);
            const auto h = static_cast<std::size_t>(*u.values[s_item]);
            const double mu = beta[h](0) + beta[h](1) * std::log(*u.values[x_item]);
            u.values[y_item] = std::exp(mu + sigma[h] * standard_normal(rng));
        }
        out[k] = data.with_units(std::move(units));
    });
    return out;
}

RubinResult rubin_combine(std::span<const double> estimates, std::span<const double> variances)
{
    require(estimates.size() == variances.size(), "rubin_combine: one variance per estimate required");
    require(estimates.size() >= 2, "rubin_combine: at least two imputations are needed");
    RubinResult r;
    r.m = estimates.size();
    const double m = static_cast<double>(r.m);
    for (std::size_t k = 0; k < r.m; ++k) {
        r.estimate += estimates[k];
        r.within += variances[k];
    }
    r.estimate /= m;
    r.within /= m;
    for (double e : estimates) {
        r.between += (e - r.estimate) * (e - r.estimate);
    }
    r.between /= m - 1.0;
    r.total = r.within + (1.0 + 1.0 / m) * r.between;
    return r;
}

AsymptoticVariances asymptotic_variances(const InformationTriple& info, std::size_t m)
{
    require(m >= 1, "asymptotic_variances: m must be at least 1");
    require(info.com.rows() == info.com.cols() && info.obs.rows() == info.obs.cols()
            && info.com.rows() == info.obs.rows() && info.com.rows() > 0,
        "asymptotic_variances: information matrices must be square and of equal size");
    const auto scale = std::max(info.com.cwiseAbs().maxCoeff(), 1e-300);
    if ((info.com - info.com.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale
        || (info.obs - info.obs.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        fail(ErrorCode::validation, "asymptotic_variances: information matrices must be symmetric");
    }
    const Matrix mis = info.mis();
    Eigen::SelfAdjointEigenSolver<Matrix> es(mis);
    if (es.eigenvalues().minCoeff() < -1e-10 * scale) {
        fail(ErrorCode::validation, "asymptotic_variances: I_com - I_obs is not positive semidefinite");
    }
    Eigen::LDLT<Matrix> obs(info.obs);
    if (obs.info() != Eigen::Success || !obs.isPositive() || !(obs.vectorD().minCoeff() > 1e-12 * scale)) {
        fail(ErrorCode::singular, "asymptotic_variances: I_obs is singular");
    }
    Eigen::LDLT<Matrix> com(info.com);
    const auto p = info.com.rows();
    const Matrix obs_inv = obs.solve(Matrix::Identity(p, p));
    const Matrix com_inv = com.solve(Matrix::Identity(p, p));
    const double inv_m = 1.0 / static_cast<double>(m);
    AsymptoticVariances v;
    v.j = mis * com_inv;
    v.v_fi = obs_inv + inv_m * com_inv * mis * com_inv;
    v.v_mi = v.v_fi + inv_m * v.j.transpose() * obs_inv * v.j;
    return v;
}

StratifiedMean stratified_mean(const SurveyDataset& data, std::size_t y_item, const std::vector<std::size_t>& strata)
{
    const auto H = std::max<std::size_t>(data.stratum_count(), 1);
    std::vector<double> N(H, 0.0);
    std::vector<double> n(H, 0.0);
    std::vector<double> sum(H, 0.0);
    std::vector<double> sumsq(H, 0.0);
    const auto& codes = data.stratum_codes();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        if (!u.values.at(y_item)) {
            fail(ErrorCode::contract, "stratified_mean: unit '" + u.id + "' has no value");
        }
        const auto h = codes.empty() ? 0 : codes[i];
        N[h] += u.weight;
        n[h] += 1.0;
        sum[h] += *u.values[y_item];
    }
    std::vector<double> mean(H, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        mean[h] = n[h] > 0.0 ? sum[h] / n[h] : 0.0;
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto h = codes.empty() ? 0 : codes[i];
        const double d = *data.unit(i).values[y_item] - mean[h];
        sumsq[h] += d * d;
    }
    std::vector<std::size_t> use = strata;
    if (use.empty()) {
        for (std::size_t h = 0; h < H; ++h) {
            use.push_back(h);
        }
    }
    double total_N = 0.0;
    for (auto h : use) {
        require(h < H, "stratified_mean: stratum out of range");
        total_N += N[h];
    }
    StratifiedMean r;
    for (auto h : use) {
        if (n[h] == 0.0) {
            continue;
        }
        r.estimate += N[h] * mean[h];
        if (n[h] > 1.0) {
            const double s2 = sumsq[h] / (n[h] - 1.0);
            r.variance += N[h] * N[h] * std::max(0.0, 1.0 - n[h] / N[h]) * s2 / n[h];
        }
    }
    r.estimate /= total_N;
    r.variance /= total_N * total_N;
    return r;
}

std::string completed_long_csv(const std::vector<SurveyDataset>& completed)
{
    std::ostringstream out;
    if (completed.empty()) {
        return {};
    }
    const auto& first = completed.front();
    out << "imputation,unit_id,weight";
    if (first.has_strata()) {
        out << ",stratum";
    }
    for (const auto& item : first.items()) {
        out << ',' << quote_csv_field(item.name);
    }
    out << '\n';
    for (std::size_t k = 0; k < completed.size(); ++k) {
        const auto& d = completed[k];
        for (std::size_t i = 0; i < d.size(); ++i) {
            const auto& u = d.unit(i);
            out << k + 1 << ',' << quote_csv_field(u.id) << ',' << format_double(u.weight);
            if (d.has_strata()) {
                out << ',' << quote_csv_field(d.strata()[i]);
            }
            for (std::size_t a = 0; a < u.values.size(); ++a) {
                out << ',';
                const auto& item = d.items()[a];
                if (!u.values[a]) {
                    out << "NA";
                } else if (item.kind == ItemKind::categorical && static_cast<std::size_t>(*u.values[a]) < item.labels.size()) {
                    out << quote_csv_field(item.labels[static_cast<std::size_t>(*u.values[a])]);
                } else {
                    out << format_double(*u.values[a]);
                }
            }
            out << '\n';
        }
    }
    return out.str();
}

} // namespace fracimp
