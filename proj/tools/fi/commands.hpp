#pragma once

#include "run_config.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace fi {

using Logger = std::function<void(const std::string&)>;

// Files produced by a command, written only after the command succeeded.
class Artifacts {
public:
    void add(std::string name, std::string content);
    // Creates `dir` and writes every file with write-then-rename.
    void commit(const std::filesystem::path& dir) const;
    [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& files() const noexcept { return files_; }

private:
    std::vector<std::pair<std::string, std::string>> files_;
};

// fractional.csv, parameters.json, em_trace.csv (pfi), estimates.csv,
// diagnostics.json; completed.csv for mi.
Artifacts cmd_impute(const RunConfig& config, const Logger& log);

// estimates.csv with jackknife variances, replicates.csv.
Artifacts cmd_variance(const RunConfig& config, const Logger& log);

// report.csv, report.txt, records.csv, summary.json.
Artifacts cmd_simulate(const RunConfig& config, const Logger& log);

// fractional.csv, summary.json.
Artifacts cmd_twophase(const RunConfig& config, const Logger& log);

} // namespace fi
