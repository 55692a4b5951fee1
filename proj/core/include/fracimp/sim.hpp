#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/variance.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace fracimp {

// log y = b0_h + b1_h log x + e, e ~ N(0, sigma_h^2), log x ~ N(mu_h, s_h^2).
struct PopulationSpec {
    std::vector<std::size_t> sizes { 352, 566, 1963, 2181, 2198 };
    std::vector<double> log_x_mean { 16.3, 15.9, 14.9, 14.6, 14.1 };
    std::vector<double> log_x_sd { 0.4, 0.4, 0.4, 0.4, 0.4 };
    std::vector<double> beta0 { -3.78, -3.88, -4.71, -4.88, -5.4 };
    std::vector<double> beta1 { 0.5, 0.5, 0.5, 0.5, 0.5 };
    std::vector<double> sigma { 0.5, 0.5, 0.5, 0.5, 0.5 };

    void validate() const;
    [[nodiscard]] std::size_t strata() const noexcept { return sizes.size(); }
};

struct TrueParameters {
    std::vector<double> stratum_means;
    double mean = 0.0;

    // Stratum means followed by the population mean.
    [[nodiscard]] std::vector<double> all() const;
};

struct Population {
    std::vector<std::size_t> stratum;
    std::vector<double> x;
    std::vector<double> y;
    TrueParameters truth;
    std::size_t strata = 0;

    [[nodiscard]] std::size_t size() const noexcept { return y.size(); }
};

Population generate_population(const PopulationSpec& spec, std::uint64_t seed);

// Items (stratum, x, y); the stratum item is categorical with labels "1".."H"
// and also defines the design strata.
SurveyDataset population_dataset(const Population& population);

struct DesignSpec {
    std::vector<std::size_t> sample_sizes { 28, 32, 46, 46, 48 };
    bool without_replacement = true;

    void validate(const Population& population) const;
};

// Stratified simple random sample with weights N_h / n_h.
SurveyDataset draw_sample(const Population& population, const DesignSpec& design, std::uint64_t seed);

// pi = 1 / (1 + exp(a - b log x))
struct ResponseSpec {
    double a = 4.0;
    double b = 0.3;

    [[nodiscard]] double probability(double x) const;
};

// Masks y where the Bernoulli(pi) response indicator is 0.
SurveyDataset apply_response(const SurveyDataset& sample, const ResponseSpec& response, std::uint64_t seed);

// sum over population units of pi(x) / N.
double expected_response_rate(const Population& population, const ResponseSpec& response);

struct StudyMethods {
    bool full = true;
    bool mi = true;
    std::size_t mi_m = 100;
    bool pfi = true;
    std::size_t pfi_M = 100;
    ReplicateMethod replicate_method = ReplicateMethod::one_step_newton;
};

struct StudyConfig {
    PopulationSpec population;
    DesignSpec design;
    ResponseSpec response;
    StudyMethods methods;
    std::size_t replicates = 500;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::size_t max_em_iter = 500;
    double em_tol = 1e-8;
};

// Estimates and variance estimates of one method in one Monte Carlo replicate.
struct MethodRecord {
    bool ok = false;
    std::string error;
    std::vector<double> estimate;
    std::vector<double> variance;
};

struct ReplicateRecord {
    double response_rate = 0.0;
    // Indexed like StudyRecords::methods.
    std::vector<MethodRecord> methods;
};

struct StudyRecords {
    std::vector<std::string> methods;
    std::vector<std::string> parameters;
    TrueParameters truth;
    std::vector<ReplicateRecord> replicates;
};

using ProgressCallback = std::function<void(std::size_t done, std::size_t total)>;

StudyRecords run_replicates(const StudyConfig& config, const ProgressCallback& progress = {});

struct MethodSummary {
    std::string method;
    std::vector<double> mean;
    std::vector<double> var;
    std::vector<double> ve;
    std::vector<double> rb_pct;
    std::vector<double> ci_width;
    std::vector<double> coverage;
    std::size_t used = 0;
    std::size_t failed = 0;
};

struct SimulationReport {
    std::vector<std::string> parameters;
    TrueParameters truth;
    std::vector<MethodSummary> methods;
    std::size_t replicates = 0;
    double response_rate = 0.0;
    std::vector<std::string> failures;

    [[nodiscard]] const MethodSummary& method(const std::string& name) const;
    // parameter, then Mean/Var/RB_pct/CI_width/Coverage for every method.
    [[nodiscard]] std::string csv() const;
    [[nodiscard]] std::string table() const;
};

// RB = (ve - var) / var x 100; CI = estimate -/+ z_0.975 sqrt(V) times
// `width_scale`.
SimulationReport summarize(const StudyRecords& records, double width_scale = 1.0);

SimulationReport run_study(const StudyConfig& config, const ProgressCallback& progress = {});

// Per-replicate estimates and variances in long format.
std::string records_csv(const StudyRecords& records);

} // namespace fracimp
