#include "doctest.h"

#include "json.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const fs::path kData = FI_TEST_DATA;
const fs::path kWork = FI_TEST_WORK;

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct Run {
    int code = -1;
    std::string err;
};

// Runs fi from the data directory so relative input paths resolve.
Run fi(const std::string& args)
{
    fs::create_directories(kWork);
    const auto err = kWork / "stderr.txt";
    const std::string cmd = "cd \"" + kData.string() + "\" && \"" + std::string(FI_EXE) + "\" " + args + " 2> \""
        + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Run r;
#ifdef WEXITSTATUS
    r.code = WEXITSTATUS(status);
#else
    r.code = status;
#endif
    r.err = slurp(err);
    return r;
}

fs::path fresh(const std::string& name)
{
    const auto p = kWork / name;
    fs::remove_all(p);
    return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p)
{
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        rows.push_back(cells);
    }
    return rows;
}

void check_same_files(const fs::path& a, const fs::path& b)
{
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) {
        names.push_back(e.path().filename().string());
    }
    REQUIRE_FALSE(names.empty());
    for (const auto& n : names) {
        INFO(n);
        REQUIRE(fs::exists(b / n));
        CHECK(slurp(a / n) == slurp(b / n));
    }
}

} // namespace

TEST_CASE("impute is deterministic and independent of the thread count")
{
    const auto a = fresh("det_a");
    const auto b = fresh("det_b");
    REQUIRE(fi("impute --config toy_pfi.json --quiet --threads 1 --out \"" + a.string() + "\"").code == 0);
    REQUIRE(fi("impute --config toy_pfi.json --quiet --threads 4 --out \"" + b.string() + "\"").code == 0);
    for (const char* f : { "fractional.csv", "parameters.json", "em_trace.csv", "estimates.csv", "diagnostics.json" }) {
        CHECK(fs::exists(a / f));
    }
    check_same_files(a, b);
    const auto c = fresh("det_c");
    REQUIRE(fi("impute --config toy_pfi.json --quiet --seed 2 --out \"" + c.string() + "\"").code == 0);
    CHECK(slurp(a / "fractional.csv") != slurp(c / "fractional.csv"));
}

TEST_CASE("a missing input file exits with code 2 and names the path")
{
    const auto out = fresh("missing");
    const auto r = fi("impute --config toy_pfi.json --input no_such_file.csv --quiet --out \"" + out.string() + "\"");
    CHECK(r.code == 2);
    CHECK(r.err.find("no_such_file.csv") != std::string::npos);
    const auto j = nlohmann::json::parse(r.err);
    CHECK(j.at("error").at("code") == "io");
    CHECK_FALSE(fs::exists(out));
}

TEST_CASE("usage and configuration errors exit with code 3")
{
    CHECK(fi("impute --no-such-flag").code == 3);
    const auto out = fresh("badcfg");
    const auto r = fi("impute --config toy_pfi.json --method nonsense --quiet --out \"" + out.string() + "\"");
    CHECK(r.code == 3);
    CHECK(nlohmann::json::parse(r.err).at("error").at("code") == "config");
    CHECK_FALSE(fs::exists(out));
}

TEST_CASE("complete data: unit weights and the weighted pseudo-MLE")
{
    const auto out = fresh("complete");
    REQUIRE(fi("impute --config toy_pfi.json --input toy_complete.csv --quiet --out \"" + out.string() + "\"").code == 0);
    const auto frac = read_csv(out / "fractional.csv");
    REQUIRE(frac.size() == 31);
    for (std::size_t r = 1; r < frac.size(); ++r) {
        CHECK(std::stod(frac[r].back()) == 1.0);
    }

    // Weighted least squares on the input file.
    const auto in = read_csv(kData / "toy_complete.csv");
    Eigen::Matrix2d xtx = Eigen::Matrix2d::Zero();
    Eigen::Vector2d xty = Eigen::Vector2d::Zero();
    std::vector<double> w, x, y;
    for (std::size_t r = 1; r < in.size(); ++r) {
        w.push_back(std::stod(in[r][1]));
        x.push_back(std::stod(in[r][2]));
        y.push_back(std::stod(in[r][3]));
        const Eigen::Vector2d v(1.0, x.back());
        xtx += w.back() * v * v.transpose();
        xty += w.back() * v * y.back();
    }
    const Eigen::Vector2d beta = xtx.ldlt().solve(xty);
    double sse = 0.0;
    double sw = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double e = y[i] - beta(0) - beta(1) * x[i];
        sse += w[i] * e * e;
        sw += w[i];
    }
    const auto params = nlohmann::json::parse(slurp(out / "parameters.json")).at("parameters");
    REQUIRE(params.size() == 3);
    CHECK(params[0].at("value").get<double>() == doctest::Approx(beta(0)).epsilon(1e-9));
    CHECK(params[1].at("value").get<double>() == doctest::Approx(beta(1)).epsilon(1e-9));
    CHECK(params[2].at("value").get<double>() == doctest::Approx(std::log(sse / sw)).epsilon(1e-9));
}

TEST_CASE("every imputation method runs through impute and variance")
{
    const std::vector<std::string> methods { "pfi", "fhdi", "kernel", "sfi", "dr" };
    for (const auto& m : methods) {
        INFO(m);
        const auto out = fresh("method_" + m);
        const auto r = fi("variance --config toy_methods.json --method " + m + " --quiet --out \"" + out.string() + "\"");
        REQUIRE(r.code == 0);
        const auto est = read_csv(out / "estimates.csv");
        REQUIRE(est.size() == 2);
        CHECK(est[0] == std::vector<std::string> { "estimand", "estimate", "variance", "se" });
        CHECK(std::isfinite(std::stod(est[1][1])));
        CHECK(std::stod(est[1][2]) > 0.0);
    }
    const auto out = fresh("method_mi");
    REQUIRE(fi("variance --config toy_mi.json --quiet --out \"" + out.string() + "\"").code == 0);
    CHECK(std::stod(read_csv(out / "estimates.csv")[1][2]) > 0.0);
}

TEST_CASE("two-phase command reproduces the regression estimator")
{
    const auto out = fresh("twophase");
    REQUIRE(fi("twophase --config toy_twophase.json --quiet --out \"" + out.string() + "\"").code == 0);
    const auto s = nlohmann::json::parse(slurp(out / "summary.json"));
    CHECK(s.at("total").get<double>() == doctest::Approx(s.at("regression_total").get<double>()).epsilon(1e-10));
}

TEST_CASE("simulate smoke run")
{
    const auto a = fresh("sim_a");
    const auto start = std::chrono::steady_clock::now();
    REQUIRE(fi("simulate --config toy_sim.json --quiet --out \"" + a.string() + "\"").code == 0);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(seconds < 60.0);

    const auto report = read_csv(a / "report.csv");
    REQUIRE(report.size() == 7);
    std::vector<std::string> expected { "parameter" };
    for (const char* metric : { "Mean", "Var", "RB_pct", "CI_width", "Coverage" }) {
        for (const char* method : { "FULL", "MI", "PFI" }) {
            expected.push_back(std::string(metric) + "_" + method);
        }
    }
    CHECK(report[0] == expected);
    for (const char* f : { "report.txt", "records.csv", "summary.json" }) {
        CHECK(fs::exists(a / f));
    }

    const auto b = fresh("sim_b");
    REQUIRE(fi("simulate --config toy_sim.json --quiet --threads 2 --out \"" + b.string() + "\"").code == 0);
    check_same_files(a, b);
}
