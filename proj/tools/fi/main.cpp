#include "commands.hpp"
#include "run_config.hpp"

#include "fracimp/error.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <iostream>
#include <string>

namespace {

constexpr int kExitNumeric = 1;
constexpr int kExitIo = 2;
constexpr int kExitUsage = 3;

int exit_code(fracimp::ErrorCode code)
{
    switch (code) {
    case fracimp::ErrorCode::io: return kExitIo;
    case fracimp::ErrorCode::config:
    case fracimp::ErrorCode::parse:
    case fracimp::ErrorCode::validation:
    case fracimp::ErrorCode::contract: return kExitUsage;
    default: return kExitNumeric;
    }
}

void report_error(std::string_view code, const std::string& message)
{
    nlohmann::ordered_json j;
    j["error"] = { { "code", code }, { "message", message } };
    std::cerr << j.dump() << '\n';
}

struct Flags {
    std::string config;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    std::string out;
    bool quiet = false;
    std::string input;
    std::string method;
    std::size_t M = 0;
    std::size_t m = 0;
    std::string replicate_method;
    std::size_t replicates = 0;
    std::string phase1;
    std::string phase2;
};

struct Bound {
    CLI::Option* config = nullptr;
    CLI::Option* seed = nullptr;
    CLI::Option* threads = nullptr;
    CLI::Option* out = nullptr;
    CLI::Option* input = nullptr;
    CLI::Option* method = nullptr;
    CLI::Option* M = nullptr;
    CLI::Option* m = nullptr;
    CLI::Option* replicate_method = nullptr;
    CLI::Option* replicates = nullptr;
    CLI::Option* phase1 = nullptr;
    CLI::Option* phase2 = nullptr;
};

Bound add_shared(CLI::App* cmd, Flags& f)
{
    Bound b;
    b.config = cmd->add_option("--config", f.config, "JSON run configuration");
    b.seed = cmd->add_option("--seed", f.seed, "Master random seed");
    b.threads = cmd->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
    b.out = cmd->add_option("--out", f.out, "Output directory");
    cmd->add_flag("--quiet", f.quiet, "Suppress progress messages");
    return b;
}

bool given(const CLI::Option* o)
{
    return o != nullptr && o->count() > 0;
}

void overlay(fi::RunConfig& c, const Flags& f, const Bound& b)
{
    nlohmann::json j = nlohmann::json::object();
    if (given(b.seed)) {
        j["seed"] = f.seed;
    }
    if (given(b.threads)) {
        j["threads"] = f.threads;
    }
    if (given(b.out)) {
        j["output"] = f.out;
    }
    if (given(b.input)) {
        j["input"] = f.input;
    }
    if (given(b.method)) {
        j["method"] = f.method;
    }
    if (given(b.replicate_method)) {
        j["replicate_method"] = f.replicate_method;
    }
    fi::apply_json(c, j);
    if (f.quiet) {
        c.quiet = true;
    }
    if (given(b.M)) {
        c.pfi.M = f.M;
        c.simulation.study.methods.pfi_M = f.M;
    }
    if (given(b.m)) {
        c.mi.m = f.m;
        c.simulation.study.methods.mi_m = f.m;
        c.twophase.m = f.m;
    }
    if (given(b.replicates)) {
        c.simulation.study.replicates = f.replicates;
    }
    if (given(b.phase1)) {
        c.twophase.phase1.path = f.phase1;
    }
    if (given(b.phase2)) {
        c.twophase.phase2.path = f.phase2;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app { "Fractional imputation for survey data with item nonresponse" };
    app.require_subcommand(1);
    Flags flags;

    auto* impute = app.add_subcommand("impute", "Create a fractionally imputed data set");
    auto* variance = app.add_subcommand("variance", "Estimate parameters with replication variances");
    auto* simulate = app.add_subcommand("simulate", "Run the stratified-sampling simulation study");
    auto* twophase = app.add_subcommand("twophase", "Fractional imputation for two-phase samples");
    twophase->alias("two-phase");

    Bound bi = add_shared(impute, flags);
    Bound bv = add_shared(variance, flags);
    Bound bs = add_shared(simulate, flags);
    Bound bt = add_shared(twophase, flags);
    for (auto [cmd, b] : { std::pair { impute, &bi }, std::pair { variance, &bv } }) {
        b->input = cmd->add_option("--input", flags.input, "Input CSV");
        b->method = cmd->add_option("--method", flags.method, "pfi, fhdi, kernel, sfi, dr or mi");
        b->M = cmd->add_option("-M,--imputations", flags.M, "Imputed values per missing item (pfi)");
        b->m = cmd->add_option("-m,--mi-imputations", flags.m, "Completed data sets (mi)");
    }
    bv.replicate_method = variance->add_option("--replicate-method", flags.replicate_method,
        "one_step_newton or em");
    bs.replicates = simulate->add_option("--replicates", flags.replicates, "Monte Carlo replicates");
    bs.M = simulate->add_option("-M", flags.M, "PFI imputation size");
    bs.m = simulate->add_option("-m", flags.m, "MI imputation count");
    bs.replicate_method = simulate->add_option("--replicate-method", flags.replicate_method,
        "one_step_newton or em");
    bt.phase1 = twophase->add_option("--phase1", flags.phase1, "Phase-1 CSV (x only)");
    bt.phase2 = twophase->add_option("--phase2", flags.phase2, "Phase-2 CSV (x and y)");
    bt.m = twophase->add_option("-m,--donors", flags.m, "Donors per phase-1 unit (0 keeps all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", e.what());
        return kExitUsage;
    }

    fi::Command command = fi::Command::impute;
    const Bound* bound = &bi;
    if (variance->parsed()) {
        command = fi::Command::variance;
        bound = &bv;
    } else if (simulate->parsed()) {
        command = fi::Command::simulate;
        bound = &bs;
    } else if (twophase->parsed()) {
        command = fi::Command::twophase;
        bound = &bt;
    }

    try {
        fi::RunConfig config = given(bound->config) ? fi::load_config(flags.config) : fi::RunConfig {};
        config.command = command;
        overlay(config, flags, *bound);
        if (command == fi::Command::simulate && bound->replicate_method && given(bound->replicate_method)) {
            config.simulation.study.methods.replicate_method = config.replicate_method;
        }
        const fi::Logger log = [&](const std::string& msg) {
            if (!config.quiet || msg.rfind("warning:", 0) == 0) {
                std::cerr << "fi: " << msg << '\n';
            }
        };
        fi::Artifacts out;
        switch (command) {
        case fi::Command::impute: out = fi::cmd_impute(config, log); break;
        case fi::Command::variance: out = fi::cmd_variance(config, log); break;
        case fi::Command::simulate: out = fi::cmd_simulate(config, log); break;
        case fi::Command::twophase: out = fi::cmd_twophase(config, log); break;
        }
        out.commit(config.output);
        log("wrote " + std::to_string(out.files().size()) + " files to " + config.output.string());
    } catch (const fracimp::Error& e) {
        report_error(fracimp::to_string(e.code()), e.what());
        return exit_code(e.code());
    } catch (const std::exception& e) {
        report_error("internal", e.what());
        return kExitNumeric;
    }
    return 0;
}
