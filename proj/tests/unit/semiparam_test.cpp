#include "doctest.h"
#include "oracles.hpp"

#include "fracimp/error.hpp"
#include "fracimp/pfi.hpp"
#include "fracimp/semiparam.hpp"

#include <cmath>
#include <numeric>

using namespace fracimp;
using oracle::NA;

namespace {

// x ~ N(0, 1), y = 1 + 2x + e with P(respond) = logistic(0.5 + x).
std::shared_ptr<const SurveyDataset> mar_data(std::uint64_t seed, int n, bool weighted = true, double sd = 1.0)
{
    auto rng = substream(seed, Stream::population, 0);
    std::vector<std::vector<double>> rows;
    std::vector<double> w;
    for (int i = 0; i < n; ++i) {
        const double x = standard_normal(rng);
        const double y = 1.0 + 2.0 * x + sd * standard_normal(rng);
        const double p = 1.0 / (1.0 + std::exp(-(0.5 + x)));
        rows.push_back({ x, uniform01(rng) < p ? y : NA });
        w.push_back(weighted ? 1.0 + 3.0 * uniform01(rng) : 1.0);
    }
    return std::make_shared<const SurveyDataset>(oracle::make_data({ "x", "y" }, rows, w));
}

double weighted_mean(const FractionalDataset& f, std::size_t item)
{
    double num = 0.0;
    double den = 0.0;
    for (std::size_t r = 0; r < f.size(); ++r) {
        const double w = f.base().unit(f.row_unit(r)).weight * f.row_weight(r);
        num += w * f.row_values(r)[item];
        den += w;
    }
    return num / den;
}

struct Mc {
    double mean;
    double se;
    double var;
};

Mc summarize(const std::vector<double>& v)
{
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double s = 0.0;
    for (double a : v) {
        s += (a - m) * (a - m);
    }
    const double var = s / (n - 1.0);
    return { m, std::sqrt(var / n), var };
}

} // namespace

TEST_CASE("kernel_fi")
{
    const auto U = EstimatingFunction::mean(1);
    SUBCASE("identical x: uniform weights and the respondent mean")
    {
        auto d = std::make_shared<const SurveyDataset>(
            oracle::make_data({ "x", "y" }, { { 2, 1 }, { 2, 4 }, { 2, NA }, { 2, 7 } }, { 1, 1, 1, 1 }));
        const auto res = kernel_fi(d, { 0 }, 1, U);
        const auto [lo, hi] = res.fdata.unit_rows(2);
        REQUIRE(hi - lo == 3);
        for (auto r = lo; r < hi; ++r) {
            CHECK(res.fdata.row_weight(r) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        }
        CHECK(res.estimate.value() == doctest::Approx(4.0).epsilon(1e-12));
        CHECK(res.bandwidth[0] == 1.0);
    }
    SUBCASE("imputed mean at each x equals the direct Nadaraya-Watson prediction")
    {
        const auto d = mar_data(3, 80);
        for (auto kern : { KernelSpec::Kernel::gaussian, KernelSpec::Kernel::epanechnikov }) {
            KernelSpec spec;
            spec.kernel = kern;
            const double h = kern == KernelSpec::Kernel::gaussian ? 0.6 : 2.0;
            spec.bandwidth = { h };
            const auto res = kernel_fi(d, { 0 }, 1, U, spec);
            for (std::size_t i = 0; i < d->size(); ++i) {
                if (d->unit(i).values[1]) {
                    continue;
                }
                const double xi = *d->unit(i).values[0];
                double num = 0.0;
                double den = 0.0;
                for (std::size_t j = 0; j < d->size(); ++j) {
                    if (!d->unit(j).values[1]) {
                        continue;
                    }
                    const double u = (xi - *d->unit(j).values[0]) / h;
                    const double k = kern == KernelSpec::Kernel::gaussian ? std::exp(-0.5 * u * u)
                                                                          : (std::abs(u) < 1 ? 0.75 * (1 - u * u) : 0.0);
                    num += k * *d->unit(j).values[1];
                    den += k;
                }
                const auto [lo, hi] = res.fdata.unit_rows(i);
                double imputed = 0.0;
                for (auto r = lo; r < hi; ++r) {
                    CHECK(res.fdata.row_weight(r) >= 0.0);
                    imputed += res.fdata.row_weight(r) * res.fdata.row_values(r)[1];
                }
                CHECK(imputed == doctest::Approx(num / den).epsilon(1e-13));
            }
            CHECK(res.fdata.max_normalization_error() <= 1e-13);
        }
    }
    SUBCASE("no missing units: equals solve_complete")
    {
        auto d = std::make_shared<const SurveyDataset>(
            oracle::make_data({ "x", "y" }, { { 0, 1 }, { 1, 3 }, { 2, 2 } }, { 1, 2, 3 }));
        CHECK(kernel_fi(d, { 0 }, 1, U).estimate.value() == doctest::Approx(solve_complete(*d, U).value()).epsilon(1e-14));
    }
    SUBCASE("a vanishing kernel is a bandwidth-too-small error")
    {
        auto d = std::make_shared<const SurveyDataset>(oracle::make_data({ "x", "y" }, { { 0, 1 }, { 10, NA } }));
        KernelSpec spec;
        spec.kernel = KernelSpec::Kernel::epanechnikov;
        spec.bandwidth = { 0.5 };
        CHECK_THROWS_AS((void)kernel_fi(d, { 0 }, 1, U, spec), Error);
    }
    SUBCASE("Silverman bandwidth")
    {
        const double x[] = { 1, 2, 3, 4, 5 };
        // sd = 1.5811, IQR = 2 so IQR / 1.34 = 1.4925 is the spread.
        CHECK(silverman_bandwidth(x) == doctest::Approx(0.9 * (2.0 / 1.34) * std::pow(5.0, -0.2)));
    }
}

TEST_CASE("sfi_em")
{
    SUBCASE("single respondent gets weight one for every nonrespondent")
    {
        auto d = std::make_shared<const SurveyDataset>(
            oracle::make_data({ "x", "y" }, { { 0, NA }, { 1, 2 }, { 2, NA } }));
        auto model = make_normal_model(1, { 0 }, 2);
        const auto res = sfi_em(d, *model, 1);
        for (std::size_t r = 0; r < res.fdata.size(); ++r) {
            CHECK(res.fdata.row_weight(r) == 1.0);
            CHECK(res.fdata.row_values(r)[1] == 2.0);
        }
    }
    SUBCASE("f free of x with equal weights: uniform 1/r")
    {
        const auto d = mar_data(5, 40, false);
        auto model = make_normal_model(1, {}, 2);
        const auto res = sfi_em(d, *model, 1);
        std::size_t r = 0;
        for (const auto& u : d->units()) {
            r += u.values[1] ? 1 : 0;
        }
        for (std::size_t row = 0; row < res.fdata.size(); ++row) {
            if (!d->unit(res.fdata.row_unit(row)).values[1]) {
                CHECK(res.fdata.row_weight(row) == doctest::Approx(1.0 / static_cast<double>(r)).epsilon(1e-12));
            }
        }
    }
    SUBCASE("donor values are observed respondent values and the mean is the completed mean")
    {
        const auto d = mar_data(6, 60);
        auto model = make_normal_model(1, { 0 }, 2);
        const auto res = sfi_em(d, *model, 1);
        CHECK(res.converged);
        for (std::size_t row = 0; row < res.fdata.size(); ++row) {
            const auto i = res.fdata.row_unit(row);
            if (d->unit(i).values[1]) {
                continue;
            }
            const auto j = static_cast<std::size_t>(res.fdata.donors()[row]);
            CHECK(res.fdata.row_values(row)[1] == *d->unit(j).values[1]);
        }
        CHECK(res.mean == doctest::Approx(weighted_mean(res.fdata, 1)).epsilon(1e-13));
    }
    SUBCASE("relative efficiency against PFI under a correct normal model")
    {
        auto model = make_normal_model(1, { 0 }, 2);
        std::vector<double> sfi;
        std::vector<double> pfi;
        for (std::uint64_t rep = 1; rep <= 500; ++rep) {
            const auto d = mar_data(1000 + rep, 80, false);
            sfi.push_back(sfi_em(d, *model, 1).mean);
            const Vector theta0 = fit_conditional_components(*d, *model);
            const auto em = run_em(d, *model, plugin_proposal(model, theta0), theta0, PFIConfig {}, rep);
            pfi.push_back(weighted_mean(em.fdata, 1));
        }
        const double re = summarize(sfi).var / summarize(pfi).var;
        INFO("relative efficiency ", re);
        CHECK(re >= 0.9);
        CHECK(re <= 1.1);
    }
}

TEST_CASE("fit_propensity")
{
    SUBCASE("constant covariate gives the weighted response rate")
    {
        const auto d = oracle::make_data({ "x", "y" }, { { 1, 2 }, { 1, NA }, { 1, 3 }, { 1, NA } }, { 1, 2, 3, 4 });
        const auto fit = fit_propensity(d, 1, { 0 });
        CHECK(fit.phi[1] == 0.0);
        for (double p : fit.pi) {
            CHECK(p == doctest::Approx(0.4).epsilon(1e-9));
        }
    }
    SUBCASE("generating coefficients recovered within 3 SE at n = 2000")
    {
        auto rng = substream(77, Stream::population, 0);
        std::vector<std::vector<double>> rows;
        const int n = 2000;
        for (int i = 0; i < n; ++i) {
            const double x = std::exp(15.0 + 0.8 * standard_normal(rng));
            const double p = 1.0 / (1.0 + std::exp(4.0 - 0.3 * std::log(x)));
            rows.push_back({ x, uniform01(rng) < p ? 1.0 : NA });
        }
        const auto d = oracle::make_data({ "x", "y" }, rows);
        PropensityOptions o;
        o.transforms = { CovariateTransform::log };
        const auto fit = fit_propensity(d, 1, { 0 }, o);
        Eigen::Matrix2d info = Eigen::Matrix2d::Zero();
        for (int i = 0; i < n; ++i) {
            const Eigen::Vector2d z(1.0, std::log(rows[static_cast<std::size_t>(i)][0]));
            const double p = fit.pi[static_cast<std::size_t>(i)];
            info += p * (1.0 - p) * z * z.transpose();
        }
        const Eigen::Matrix2d cov = info.inverse();
        CHECK(std::abs(fit.phi[0] - (-4.0)) <= 3.0 * std::sqrt(cov(0, 0)));
        CHECK(std::abs(fit.phi[1] - 0.3) <= 3.0 * std::sqrt(cov(1, 1)));
    }
    SUBCASE("all respondents is an error")
    {
        const auto d = oracle::make_data({ "x", "y" }, { { 1, 2 }, { 2, 3 }, { 3, 1 } });
        CHECK_THROWS_AS((void)fit_propensity(d, 1, { 0 }), Error);
    }
    SUBCASE("separated response classes are an error")
    {
        const auto d = oracle::make_data({ "x", "y" }, { { 1, NA }, { 2, NA }, { 3, 1 }, { 4, 1 } });
        CHECK_THROWS_AS((void)fit_propensity(d, 1, { 0 }), Error);
    }
    SUBCASE("normalization makes respondents' inverse propensities sum to the total weight")
    {
        const auto d = mar_data(9, 150);
        PropensityOptions o;
        o.normalize = true;
        const auto fit = fit_propensity(*d, 1, { 0 }, o);
        double lhs = 0.0;
        double rhs = 0.0;
        for (std::size_t i = 0; i < d->size(); ++i) {
            rhs += d->unit(i).weight;
            if (d->unit(i).values[1]) {
                lhs += d->unit(i).weight / fit.pi[i];
            }
            CHECK(fit.pi[i] > 0.0);
            CHECK(fit.pi[i] < 1.0);
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("dr_fi")
{
    const auto U = EstimatingFunction::mean(1);
    SUBCASE("fractional imputation form equals the DR estimator on random data")
    {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto d = mar_data(seed, 50 + static_cast<int>(seed) * 7);
            PropensityOptions o;
            o.normalize = true;
            const auto res = dr_fi(d, 1, fit_outcome_regression(*d, 1, { 0 }), fit_propensity(*d, 1, { 0 }, o), U);
            CHECK(std::abs(res.total_fi - res.total_dr) <= 1e-10 * std::abs(res.total_dr));
            double total = 0.0;
            for (const auto& u : d->units()) {
                total += u.weight;
            }
            CHECK(res.estimate.value() == doctest::Approx(res.total_fi / total).epsilon(1e-10));
        }
    }
    SUBCASE("cell propensities and a saturated model reduce to the IPW estimator")
    {
        auto rng = substream(12, Stream::sample, 0);
        std::vector<UnitRecord> units;
        for (int i = 0; i < 120; ++i) {
            const double g = std::floor(uniform01(rng) * 3.0);
            const double y = 2.0 * g + standard_normal(rng);
            const bool resp = i < 6 || uniform01(rng) < 0.4 + 0.2 * g;
            UnitRecord u { "u" + std::to_string(i), 1.0 + uniform01(rng), {} };
            u.values = { g, resp ? std::optional<double>(y) : std::nullopt };
            if (i < 6) {
                u.values[0] = static_cast<double>(i % 3);
            }
            units.push_back(std::move(u));
        }
        auto d = std::make_shared<const SurveyDataset>(
            std::vector<Item> { { "g", ItemKind::categorical, { "a", "b", "c" } }, { "y", ItemKind::continuous, {} } },
            units);
        double all[3] = { 0, 0, 0 };
        double resp[3] = { 0, 0, 0 };
        for (const auto& u : d->units()) {
            const auto g = static_cast<std::size_t>(*u.values[0]);
            all[g] += u.weight;
            resp[g] += u.values[1] ? u.weight : 0.0;
        }
        PropensityFit pf;
        double ipw = 0.0;
        double total = 0.0;
        for (const auto& u : d->units()) {
            const auto g = static_cast<std::size_t>(*u.values[0]);
            pf.pi.push_back(resp[g] / all[g]);
            total += u.weight;
            if (u.values[1]) {
                ipw += u.weight * *u.values[1] / pf.pi.back();
            }
        }
        const auto res = dr_fi(d, 1, fit_outcome_regression(*d, 1, { 0 }), pf, U);
        CHECK(res.total_dr == doctest::Approx(ipw).epsilon(1e-12));
        CHECK(res.total_fi == doctest::Approx(ipw).epsilon(1e-12));
        CHECK(res.estimate.value() == doctest::Approx(ipw / total).epsilon(1e-12));
    }
    SUBCASE("no missing data: the full-sample estimate")
    {
        auto d = std::make_shared<const SurveyDataset>(
            oracle::make_data({ "x", "y" }, { { 0, 1 }, { 1, 3 }, { 2, 2 }, { 3, 7 } }, { 1, 2, 3, 1 }));
        PropensityFit pf;
        pf.pi.assign(d->size(), 1.0);
        const auto res = dr_fi(d, 1, fit_outcome_regression(*d, 1, { 0 }), pf, U);
        CHECK(res.estimate.value() == doctest::Approx(solve_complete(*d, U).value()).epsilon(1e-13));
    }
    SUBCASE("propensity one for every respondent is an error")
    {
        auto d = std::make_shared<const SurveyDataset>(oracle::make_data({ "x", "y" }, { { 0, 1 }, { 1, NA }, { 2, 2 } }));
        PropensityFit pf;
        pf.pi.assign(d->size(), 1.0);
        CHECK_THROWS_AS((void)dr_fi(d, 1, fit_outcome_regression(*d, 1, { 0 }), pf, U), Error);
    }
}

TEST_CASE("double robustness over 500 replicates")
{
    // E(y) = 1. Wrong outcome model: intercept only. Wrong propensity: constant.
    std::vector<double> or_ok;
    std::vector<double> rp_ok;
    std::vector<double> both_wrong;
    const auto U = EstimatingFunction::mean(1);
    for (std::uint64_t rep = 1; rep <= 500; ++rep) {
        const auto d = mar_data(5000 + rep, 1000, false);
        double n = static_cast<double>(d->size());
        const auto good_or = fit_outcome_regression(*d, 1, { 0 });
        const auto bad_or = fit_outcome_regression(*d, 1, {});
        const auto good_rp = fit_propensity(*d, 1, { 0 });
        const auto bad_rp = fit_propensity(*d, 1, {});
        or_ok.push_back(dr_fi(d, 1, good_or, bad_rp, U).total_dr / n);
        rp_ok.push_back(dr_fi(d, 1, bad_or, good_rp, U).total_dr / n);
        both_wrong.push_back(dr_fi(d, 1, bad_or, bad_rp, U).total_dr / n);
    }
    for (const auto* v : { &or_ok, &rp_ok }) {
        const auto s = summarize(*v);
        INFO("bias ", s.mean - 1.0, " se ", s.se);
        CHECK(std::abs(s.mean - 1.0) < 3.0 * s.se);
    }
    const auto s = summarize(both_wrong);
    CHECK(std::abs(s.mean - 1.0) > 3.0 * s.se);
}
