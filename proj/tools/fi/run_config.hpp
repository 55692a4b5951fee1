#pragma once

#include "fracimp/dataset.hpp"
#include "fracimp/sim.hpp"
#include "fracimp/variance.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fi {

enum class Command { impute, variance, simulate, twophase };
enum class Method { pfi, fhdi, kernel, sfi, dr, mi };

struct DataSource {
    std::filesystem::path path;
    std::string weight = "weight";
    std::optional<std::string> id;
    std::optional<std::string> stratum;
    std::string missing = "NA";
    // Each entry: {"name", "kind": continuous|categorical, "labels": [...]}.
    // Every other column is read as continuous when empty.
    nlohmann::json items = nlohmann::json::array();
};

struct ComponentSpec {
    std::string family;
    std::string response;
    std::vector<std::string> predictors;
    std::string stratum;
    std::string x;
};

struct EstimandSpec {
    std::string type = "mean";
    std::string item;
    double p = 0.5;
    double c = 0.0;

    [[nodiscard]] std::string label() const;
};

struct PfiSettings {
    std::size_t M = 100;
    // 0 selects max(100, M).
    std::size_t sir_pool = 0;
};

struct FhdiSettings {
    std::vector<std::string> items;
    std::size_t categories = 4;
    std::size_t donors = 10;
    bool fefi = false;
};

struct KernelSettings {
    std::vector<std::string> x;
    std::string y;
    std::string kernel = "gaussian";
    std::vector<double> bandwidth;
    bool product = false;
};

struct DrSettings {
    std::string y;
    std::vector<std::string> covariates;
    std::vector<std::string> log_covariates;
    bool normalize = false;
};

struct MiSettings {
    std::size_t m = 10;
    std::string y;
    std::string stratum;
    std::string x;
};

struct TwoPhaseSettings {
    DataSource phase1;
    DataSource phase2;
    std::vector<std::string> x;
    std::string y;
    // 0 keeps every donor.
    std::size_t m = 0;
    bool nested = false;
};

struct SimulationSettings {
    fracimp::StudyConfig study;
    double width_scale = 1.0;
};

struct RunConfig {
    Command command = Command::impute;
    Method method = Method::pfi;
    DataSource data;
    std::filesystem::path output = "fi-out";
    std::uint64_t seed = 1;
    unsigned threads = 0;
    bool quiet = false;
    std::size_t max_em_iter = 500;
    double em_tol = 1e-8;
    fracimp::ReplicateMethod replicate_method = fracimp::ReplicateMethod::one_step_newton;
    std::vector<ComponentSpec> model;
    std::vector<EstimandSpec> estimands;
    PfiSettings pfi;
    FhdiSettings fhdi;
    KernelSettings kernel;
    DrSettings dr;
    MiSettings mi;
    TwoPhaseSettings twophase;
    SimulationSettings simulation;

    // Checks ranges and that referenced files exist.
    void validate() const;
};

// Overlays the keys present in `j` onto `config`. Unknown keys are config
// errors.
void apply_json(RunConfig& config, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

Method parse_method(const std::string& name);
std::string to_string(Method method);

fracimp::CsvSchema resolve_schema(const DataSource& source);
fracimp::SurveyDataset load_data(const DataSource& source);

} // namespace fi
