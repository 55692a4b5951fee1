#include "doctest.h"
#include "oracles.hpp"

#include "fracimp/error.hpp"
#include "fracimp/mi.hpp"
#include "fracimp/sim.hpp"

#include <cmath>
#include <numeric>

using namespace fracimp;

namespace {

StudyConfig small_study(std::size_t R)
{
    StudyConfig c;
    c.replicates = R;
    c.methods.mi_m = 5;
    c.methods.pfi_M = 20;
    c.seed = 17;
    return c;
}

// One method, one parameter, given estimates and variance estimates.
StudyRecords synthetic(const std::vector<double>& est, const std::vector<double>& var, double truth)
{
    StudyRecords r;
    r.methods = { "X" };
    r.parameters = { "mu" };
    r.truth.mean = truth;
    for (std::size_t k = 0; k < est.size(); ++k) {
        ReplicateRecord rr;
        MethodRecord m;
        m.ok = true;
        m.estimate = { est[k] };
        m.variance = { var[k] };
        rr.methods.push_back(m);
        r.replicates.push_back(rr);
    }
    return r;
}

} // namespace

TEST_CASE("generate_population")
{
    const PopulationSpec spec;
    const auto pop = generate_population(spec, 1);
    REQUIRE(pop.size() == 352 + 566 + 1963 + 2181 + 2198);

    SUBCASE("population mean is the size-weighted mean of the stratum means")
    {
        double num = 0.0;
        for (std::size_t h = 0; h < spec.strata(); ++h) {
            num += static_cast<double>(spec.sizes[h]) * pop.truth.stratum_means[h];
        }
        CHECK(pop.truth.mean == doctest::Approx(num / static_cast<double>(pop.size())).epsilon(1e-13));
    }
    SUBCASE("stratum means fall in decreasing order")
    {
        for (std::size_t h = 1; h < spec.strata(); ++h) {
            CHECK(pop.truth.stratum_means[h] < pop.truth.stratum_means[h - 1]);
        }
    }
    SUBCASE("zero residual sd makes y a function of x")
    {
        PopulationSpec flat = spec;
        flat.sigma.assign(spec.strata(), 0.0);
        const auto p = generate_population(flat, 2);
        for (std::size_t i = 0; i < p.size(); i += 37) {
            const auto h = p.stratum[i];
            CHECK(p.y[i] == doctest::Approx(std::exp(flat.beta0[h] + flat.beta1[h] * std::log(p.x[i]))).epsilon(1e-12));
        }
    }
    SUBCASE("estimators on the full population recover the truth")
    {
        const auto d = population_dataset(pop);
        for (std::size_t h = 0; h < spec.strata(); ++h) {
            const auto s = stratified_mean(d, 2, { h });
            CHECK(s.estimate == doctest::Approx(pop.truth.stratum_means[h]).epsilon(1e-12));
            CHECK(s.variance == doctest::Approx(0.0));
        }
        CHECK(stratified_mean(d, 2).estimate == doctest::Approx(pop.truth.mean).epsilon(1e-12));
    }
    SUBCASE("default response model gives a response rate near 0.6")
    {
        const double rate = expected_response_rate(pop, ResponseSpec {});
        INFO("response rate ", rate);
        CHECK(std::abs(rate - 0.60) <= 0.02);
    }
    SUBCASE("same seed, same population")
    {
        const auto again = generate_population(spec, 1);
        CHECK(again.y == pop.y);
        CHECK(generate_population(spec, 3).y != pop.y);
    }
    SUBCASE("invalid specs are rejected")
    {
        PopulationSpec bad = spec;
        bad.sizes[2] = 0;
        CHECK_THROWS_AS(generate_population(bad, 1), Error);
        bad = spec;
        bad.sigma.pop_back();
        CHECK_THROWS_AS(generate_population(bad, 1), Error);
    }
}

TEST_CASE("draw_sample")
{
    const auto pop = generate_population(PopulationSpec {}, 1);

    SUBCASE("design weights of the default allocation")
    {
        const auto s = draw_sample(pop, DesignSpec {}, 5);
        const double expected[] = { 12.57, 17.69, 42.67, 47.41, 45.79 };
        REQUIRE(s.size() == 200);
        for (const auto& u : s.units()) {
            const auto h = static_cast<std::size_t>(*u.values[0]);
            CHECK(std::round(u.weight * 100.0) / 100.0 == doctest::Approx(expected[h]));
        }
    }
    SUBCASE("census has unit weights and every unit once")
    {
        PopulationSpec tiny;
        tiny.sizes = { 5, 4 };
        tiny.log_x_mean = { 1, 2 };
        tiny.log_x_sd = { 1, 1 };
        tiny.beta0 = { 0, 0 };
        tiny.beta1 = { 1, 1 };
        tiny.sigma = { 1, 1 };
        const auto p = generate_population(tiny, 1);
        DesignSpec census;
        census.sample_sizes = { 5, 4 };
        const auto s = draw_sample(p, census, 1);
        REQUIRE(s.size() == 9);
        double ysum = 0.0;
        for (const auto& u : s.units()) {
            CHECK(u.weight == 1.0);
            ysum += *u.values[2];
        }
        CHECK(ysum == doctest::Approx(std::accumulate(p.y.begin(), p.y.end(), 0.0)));
    }
    SUBCASE("inclusion frequencies match n_h / N_h")
    {
        PopulationSpec tiny;
        tiny.sizes = { 8, 5 };
        tiny.log_x_mean = { 1, 2 };
        tiny.log_x_sd = { 1, 1 };
        tiny.beta0 = { 0, 0 };
        tiny.beta1 = { 1, 1 };
        tiny.sigma = { 1, 1 };
        const auto p = generate_population(tiny, 1);
        DesignSpec d;
        d.sample_sizes = { 3, 2 };
        const int reps = 10000;
        std::vector<double> hits(p.size(), 0.0);
        for (int r = 0; r < reps; ++r) {
            const auto s = draw_sample(p, d, static_cast<std::uint64_t>(r));
            for (const auto& u : s.units()) {
                hits[std::stoul(u.id.substr(1)) - 1] += 1.0;
            }
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double pi = p.stratum[i] == 0 ? 3.0 / 8.0 : 2.0 / 5.0;
            const double se = std::sqrt(pi * (1.0 - pi) / reps);
            CHECK(std::abs(hits[i] / reps - pi) <= 4.0 * se);
        }
    }
    SUBCASE("infeasible sample sizes are rejected")
    {
        DesignSpec d;
        d.sample_sizes = { 1, 32, 46, 46, 48 };
        CHECK_THROWS_AS((void)draw_sample(pop, d, 1), Error);
        d.sample_sizes = { 400, 32, 46, 46, 48 };
        CHECK_THROWS_AS((void)draw_sample(pop, d, 1), Error);
    }
}

TEST_CASE("apply_response")
{
    const auto pop = generate_population(PopulationSpec {}, 1);
    DesignSpec big;
    big.sample_sizes = { 300, 500, 1500, 1500, 1500 };
    const auto s = draw_sample(pop, big, 2);
    const auto rate = [](const SurveyDataset& d) {
        double r = 0.0;
        for (const auto& u : d.units()) {
            r += u.values[2] ? 1.0 : 0.0;
        }
        return r / static_cast<double>(d.size());
    };
    SUBCASE("a = b = 0 gives response probability one half")
    {
        const ResponseSpec half { 0.0, 0.0 };
        CHECK(half.probability(123.0) == 0.5);
        const double r = rate(apply_response(s, half, 3));
        CHECK(std::abs(r - 0.5) <= 4.0 * std::sqrt(0.25 / static_cast<double>(s.size())));
    }
    SUBCASE("very negative a gives full response")
    {
        CHECK(rate(apply_response(s, ResponseSpec { -1000.0, 0.3 }, 3)) == 1.0);
    }
    SUBCASE("default response model realizes a rate near 0.6")
    {
        const auto m = apply_response(s, ResponseSpec {}, 4);
        CHECK(std::abs(rate(m) - 0.60) <= 0.02);
        for (std::size_t i = 0; i < m.size(); ++i) {
            CHECK(m.unit(i).values[0].has_value());
            CHECK(m.unit(i).values[1].has_value());
        }
    }
}

TEST_CASE("summarize")
{
    SUBCASE("metrics by direct formula")
    {
        const std::vector<double> est { 1.0, 2.0, 4.0, 5.0 };
        const std::vector<double> var { 1.0, 2.0, 3.0, 4.0 };
        const auto rep = summarize(synthetic(est, var, 3.0));
        const auto& m = rep.method("X");
        CHECK(m.mean[0] == doctest::Approx(3.0));
        const double mc_var = (4.0 + 1.0 + 1.0 + 4.0) / 3.0;
        CHECK(m.var[0] == doctest::Approx(mc_var));
        CHECK(m.ve[0] == doctest::Approx(2.5));
        CHECK(m.rb_pct[0] == doctest::Approx((2.5 - mc_var) / mc_var * 100.0));
        double width = 0.0;
        double cover = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            const double half = 1.959963984540054 * std::sqrt(var[k]);
            width += 2.0 * half / 4.0;
            cover += (std::abs(est[k] - 3.0) <= half ? 1.0 : 0.0) / 4.0;
        }
        CHECK(m.ci_width[0] == doctest::Approx(width));
        CHECK(m.coverage[0] == doctest::Approx(cover));
    }
    SUBCASE("failed replicates are excluded and counted")
    {
        auto rec = synthetic({ 1.0, 2.0, 3.0 }, { 1.0, 1.0, 1.0 }, 2.0);
        rec.replicates[1].methods[0].ok = false;
        rec.replicates[1].methods[0].error = "boom";
        const auto rep = summarize(rec);
        CHECK(rep.method("X").used == 2);
        CHECK(rep.method("X").failed == 1);
        CHECK(rep.method("X").mean[0] == doctest::Approx(2.0));
        REQUIRE(rep.failures.size() == 1);
        CHECK(rep.failures[0].find("boom") != std::string::npos);
    }
    SUBCASE("relative bias formula on random pairs")
    {
        auto rng = substream(4, Stream::population, 0);
        std::vector<double> est;
        std::vector<double> var;
        for (int k = 0; k < 200; ++k) {
            est.push_back(standard_normal(rng));
            var.push_back(0.5 + uniform01(rng));
        }
        const auto rep = summarize(synthetic(est, var, 0.0));
        const auto& m = rep.method("X");
        CHECK(m.rb_pct[0] == doctest::Approx((m.ve[0] - m.var[0]) / m.var[0] * 100.0).epsilon(1e-14));
    }
}

TEST_CASE("run_study")
{
    const auto cfg = small_study(3);
    const auto rec = run_replicates(cfg);
    REQUIRE(rec.methods == std::vector<std::string> { "FULL", "MI", "PFI" });
    REQUIRE(rec.parameters.size() == 6);

    SUBCASE("same seed gives the same records and report whatever the thread count")
    {
        auto threaded = cfg;
        threaded.threads = 3;
        CHECK(records_csv(run_replicates(threaded)) == records_csv(rec));
        CHECK(summarize(rec).csv() == run_study(cfg).csv());
        auto other = cfg;
        other.seed = 18;
        CHECK(records_csv(run_replicates(other)) != records_csv(rec));
    }
    SUBCASE("every method produced finite estimates")
    {
        for (const auto& r : rec.replicates) {
            for (const auto& m : r.methods) {
                REQUIRE(m.ok);
                for (std::size_t q = 0; q < 6; ++q) {
                    CHECK(std::isfinite(m.estimate[q]));
                    CHECK(m.variance[q] >= 0.0);
                }
            }
        }
    }
    SUBCASE("report CSV has the metric-by-method columns")
    {
        const auto csv = summarize(rec).csv();
        const auto header = csv.substr(0, csv.find('\n'));
        CHECK(header
            == "parameter,Mean_FULL,Mean_MI,Mean_PFI,Var_FULL,Var_MI,Var_PFI,RB_pct_FULL,RB_pct_MI,RB_pct_PFI,"
               "CI_width_FULL,CI_width_MI,CI_width_PFI,Coverage_FULL,Coverage_MI,Coverage_PFI");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    }
    SUBCASE("MI without enough imputations is a config error")
    {
        auto bad = cfg;
        bad.methods.mi_m = 1;
        CHECK_THROWS_AS((void)run_replicates(bad), Error);
    }
}

TEST_CASE("coverage grows when every interval is doubled")
{
    auto cfg = small_study(40);
    cfg.methods.mi = false;
    cfg.methods.pfi = false;
    const auto rec = run_replicates(cfg);
    const auto narrow = summarize(rec, 0.5);
    const auto wide = summarize(rec, 1.0);
    for (std::size_t q = 0; q < 6; ++q) {
        const double a = narrow.method("FULL").coverage[q];
        const double b = wide.method("FULL").coverage[q];
        CHECK(b >= a);
        if (a < 1.0) {
            CHECK(b > a);
        }
        CHECK(wide.method("FULL").ci_width[q] == doctest::Approx(2.0 * narrow.method("FULL").ci_width[q]));
    }
}
