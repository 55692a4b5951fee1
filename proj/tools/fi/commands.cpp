#include "commands.hpp"

#include "fracimp/calib.hpp"
#include "fracimp/error.hpp"
#include "fracimp/estimating.hpp"
#include "fracimp/fhdi.hpp"
#include "fracimp/mi.hpp"
#include "fracimp/models.hpp"
#include "fracimp/parallel.hpp"
#include "fracimp/pfi.hpp"
#include "fracimp/semiparam.hpp"
#include "fracimp/sim.hpp"
#include "fracimp/variance.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <sstream>

namespace fi {

using fracimp::ErrorCode;
using fracimp::EstimatingFunction;
using fracimp::fail;
using fracimp::FractionalDataset;
using fracimp::SurveyDataset;
using fracimp::Vector;
using nlohmann::ordered_json;

void Artifacts::add(std::string name, std::string content)
{
    files_.emplace_back(std::move(name), std::move(content));
}

void Artifacts::commit(const std::filesystem::path& dir) const
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(ErrorCode::io, "cannot create output directory '" + dir.string() + "': " + ec.message());
    }
    for (const auto& [name, content] : files_) {
        fracimp::write_file_atomic(dir / name, content);
    }
}

namespace {

std::size_t item_of(const SurveyDataset& data, const std::string& name, const std::string& what)
{
    if (name.empty()) {
        fail(ErrorCode::config, what + " is not set");
    }
    for (std::size_t k = 0; k < data.item_count(); ++k) {
        if (data.items()[k].name == name) {
            return k;
        }
    }
    fail(ErrorCode::config, what + ": the data have no item '" + name + "'");
}

std::vector<std::size_t> items_of(const SurveyDataset& data, const std::vector<std::string>& names,
    const std::string& what)
{
    std::vector<std::size_t> out;
    for (const auto& n : names) {
        out.push_back(item_of(data, n, what));
    }
    return out;
}

std::vector<std::string> item_names(const SurveyDataset& data)
{
    std::vector<std::string> out;
    for (const auto& item : data.items()) {
        out.push_back(item.name);
    }
    return out;
}

bool has_missing(const SurveyDataset& data, std::size_t item)
{
    return std::any_of(data.units().begin(), data.units().end(), [&](const auto& u) { return !u.values[item]; });
}

struct Estimand {
    std::string label;
    EstimatingFunction U;
};

std::vector<Estimand> resolve_estimands(const RunConfig& config, const SurveyDataset& data)
{
    std::vector<Estimand> out;
    for (const auto& e : config.estimands) {
        const auto k = item_of(data, e.item, "estimand item");
        if (e.type == "quantile") {
            out.push_back({ e.label(), EstimatingFunction::quantile(k, e.p) });
        } else if (e.type == "median") {
            out.push_back({ e.label(), EstimatingFunction::median(k) });
        } else if (e.type == "proportion_below") {
            out.push_back({ e.label(), EstimatingFunction::proportion_below(k, e.c) });
        } else {
            out.push_back({ e.label(), EstimatingFunction::mean(k) });
        }
    }
    if (out.empty()) {
        for (std::size_t k = 0; k < data.item_count(); ++k) {
            if (data.items()[k].kind == fracimp::ItemKind::continuous && has_missing(data, k)) {
                out.push_back({ "mean(" + data.items()[k].name + ")", EstimatingFunction::mean(k) });
            }
        }
    }
    return out;
}

std::shared_ptr<const fracimp::SequentialModel> build_model(const RunConfig& config, const SurveyDataset& data)
{
    if (config.model.empty()) {
        fail(ErrorCode::config, "method " + to_string(config.method) + " needs a model");
    }
    const auto names = item_names(data);
    std::vector<std::shared_ptr<const fracimp::ConditionalComponent>> comps;
    for (const auto& c : config.model) {
        const auto y = item_of(data, c.response, "model response");
        if (c.family == "normal") {
            comps.push_back(std::make_shared<fracimp::GaussianRegression>(
                y, items_of(data, c.predictors, "model predictor"), names));
        } else if (c.family == "logistic") {
            comps.push_back(std::make_shared<fracimp::LogisticRegression>(
                y, items_of(data, c.predictors, "model predictor"), names));
        } else if (c.family == "stratified_lognormal") {
            const auto s = item_of(data, c.stratum, "model stratum");
            if (data.items()[s].kind != fracimp::ItemKind::categorical) {
                fail(ErrorCode::config, "model stratum '" + c.stratum + "' must be categorical");
            }
            comps.push_back(std::make_shared<fracimp::StratifiedLogNormalRegression>(
                y, s, item_of(data, c.x, "model x"), data.items()[s].labels.size()));
        } else {
            fail(ErrorCode::config, "unknown model family '" + c.family
                    + "' (expected normal, logistic or stratified_lognormal)");
        }
    }
    return std::make_shared<const fracimp::SequentialModel>(std::move(comps), data.item_count());
}

std::string unit_list(const SurveyDataset& data, const std::vector<std::size_t>& units)
{
    std::string out;
    for (std::size_t k = 0; k < units.size() && k < 10; ++k) {
        out += (k ? ", " : "") + data.unit(units[k]).id;
    }
    if (units.size() > 10) {
        out += ", ...";
    }
    return out;
}

ordered_json weight_summary(const FractionalDataset& fdata)
{
    const auto d = fracimp::weight_diagnostics(fdata);
    std::vector<double> ess;
    for (std::size_t i = 0; i < fdata.base().size(); ++i) {
        const auto [b, e] = fdata.unit_rows(i);
        if (e - b > 1) {
            ess.push_back(d.ess[i]);
        }
    }
    ordered_json j;
    j["rows"] = fdata.size();
    j["units"] = fdata.base().size();
    j["imputed_units"] = ess.size();
    j["unimputed_units"] = fdata.unimputed().size();
    j["max_normalization_error"] = fdata.max_normalization_error();
    j["has_negative_weights"] = fdata.has_negative_weights();
    if (!ess.empty()) {
        std::sort(ess.begin(), ess.end());
        j["ess_min"] = ess.front();
        j["ess_median"] = ess[ess.size() / 2];
        j["max_fractional_weight"] = *std::max_element(d.max_weight.begin(), d.max_weight.end());
    }
    ordered_json low = ordered_json::array();
    for (auto i : d.low_ess_units) {
        low.push_back(fdata.base().unit(i).id);
    }
    j["low_ess_units"] = low;
    return j;
}

struct ImputationRun {
    std::optional<FractionalDataset> fdata;
    std::optional<fracimp::PFIResult> pfi;
    std::shared_ptr<const fracimp::ParametricModel> model;
    std::vector<std::string> parameter_names;
    std::optional<Vector> theta;
    std::vector<SurveyDataset> completed;
    ordered_json diagnostics = ordered_json::object();
    std::vector<std::string> warnings;
    Artifacts extra;
};

ImputationRun run_pfi(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data, const Logger& log)
{
    ImputationRun run;
    auto model = build_model(config, *data);
    const Vector theta0 = fracimp::fit_conditional_components(*data, *model);
    const std::size_t pool = config.pfi.sir_pool > 0 ? config.pfi.sir_pool : std::max<std::size_t>(100, config.pfi.M);
    const auto h = fracimp::plugin_proposal(model, theta0, pool);
    fracimp::PFIConfig pc;
    pc.M = config.pfi.M;
    pc.max_em_iter = config.max_em_iter;
    pc.em_tol = config.em_tol;
    pc.sir_pool = pool;
    pc.threads = config.threads;
    log("pfi: M = " + std::to_string(pc.M) + ", " + std::to_string(model->parameter_count()) + " parameters");
    auto result = fracimp::run_em(data, *model, h, theta0, pc, config.seed);
    if (!result.converged) {
        fail(ErrorCode::non_convergence, "EM did not converge in " + std::to_string(config.max_em_iter)
                + " iterations; raise max_em_iter or em_tol");
    }
    log("pfi: converged after " + std::to_string(result.em_trace.size()) + " iterations");
    run.parameter_names = model->parameter_names();
    run.theta = result.theta;
    run.diagnostics["converged"] = result.converged;
    run.diagnostics["iterations"] = result.em_trace.size();
    if (!result.marginal_units.empty()) {
        run.warnings.push_back(std::to_string(result.marginal_units.size())
            + " units have every modeled item missing: " + unit_list(*data, result.marginal_units));
    }
    run.extra.add("em_trace.csv", fracimp::em_trace_csv(result, run.parameter_names));
    run.fdata = result.fdata;
    run.model = model;
    run.pfi = std::move(result);
    return run;
}

ImputationRun run_fhdi(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data, const Logger& log)
{
    ImputationRun run;
    std::vector<std::size_t> items;
    if (config.fhdi.items.empty()) {
        for (std::size_t k = 0; k < data->item_count(); ++k) {
            items.push_back(k);
        }
    } else {
        items = items_of(*data, config.fhdi.items, "fhdi item");
    }
    const bool all_categorical = std::all_of(items.begin(), items.end(),
        [&](auto k) { return data->items()[k].kind == fracimp::ItemKind::categorical; });
    if (config.fhdi.fefi) {
        if (!all_categorical) {
            fail(ErrorCode::config, "fhdi.fefi needs categorical items only");
        }
        const auto em = fracimp::categorical_em(*data, items);
        log("fhdi: categorical EM finished after " + std::to_string(em.iterations) + " iterations");
        run.fdata = fracimp::fefi_categorical(data, em);
        run.extra.add("cell_model.csv", fracimp::cell_model_csv(*data, em.model));
        run.diagnostics["em_iterations"] = em.iterations;
        run.diagnostics["loglik"] = em.loglik_trace.empty() ? 0.0 : em.loglik_trace.back();
        return run;
    }
    const auto cells = fracimp::discretize(*data, items, config.fhdi.categories);
    std::vector<std::size_t> shadow_items(items.size());
    for (std::size_t k = 0; k < items.size(); ++k) {
        shadow_items[k] = k;
    }
    const auto em = fracimp::categorical_em(cells.shadow, shadow_items);
    log("fhdi: cell EM finished after " + std::to_string(em.iterations) + " iterations");
    fracimp::FhdiOptions fo;
    fo.donors_per_cell = config.fhdi.donors;
    fo.threads = config.threads;
    auto result = fracimp::fhdi_continuous(data, cells, em, config.seed, fo);
    run.warnings = std::move(result.warnings);
    run.fdata = std::move(result.fdata);
    run.extra.add("cell_model.csv", fracimp::cell_model_csv(cells.shadow, em.model));
    run.diagnostics["em_iterations"] = em.iterations;
    run.diagnostics["em_converged"] = em.converged;
    return run;
}

ImputationRun run_kernel(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data,
    const std::vector<Estimand>& estimands, const Logger& log)
{
    ImputationRun run;
    const auto x = items_of(*data, config.kernel.x, "kernel.x");
    const auto y = item_of(*data, config.kernel.y, "kernel.y");
    fracimp::KernelSpec spec;
    if (config.kernel.kernel == "epanechnikov") {
        spec.kernel = fracimp::KernelSpec::Kernel::epanechnikov;
    } else if (config.kernel.kernel != "gaussian") {
        fail(ErrorCode::config, "kernel.kernel must be gaussian or epanechnikov");
    }
    spec.bandwidth = config.kernel.bandwidth;
    spec.product_kernel = config.kernel.product;
    const auto U = estimands.empty() ? EstimatingFunction::mean(y) : estimands.front().U;
    auto result = fracimp::kernel_fi(data, x, y, U, spec, {}, config.threads);
    std::string bw;
    for (double h : result.bandwidth) {
        bw += (bw.empty() ? "" : ", ") + fracimp::format_double(h);
    }
    log("kernel: bandwidth " + bw);
    run.diagnostics["bandwidth"] = result.bandwidth;
    run.fdata = std::move(result.fdata);
    return run;
}

ImputationRun run_sfi(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data, const Logger& log)
{
    ImputationRun run;
    auto model = build_model(config, *data);
    if (model->component_count() != 1) {
        fail(ErrorCode::config, "sfi needs a single-component model of y given covariates");
    }
    fracimp::SfiOptions so;
    so.max_iter = config.max_em_iter;
    so.tol = config.em_tol;
    so.threads = config.threads;
    auto result = fracimp::sfi_em(data, *model, model->component(0).response(), so);
    if (!result.converged) {
        fail(ErrorCode::non_convergence, "semiparametric EM did not converge in " + std::to_string(so.max_iter)
                + " iterations");
    }
    log("sfi: converged after " + std::to_string(result.iterations) + " iterations");
    run.parameter_names = model->parameter_names();
    run.theta = result.theta;
    run.model = model;
    run.diagnostics["iterations"] = result.iterations;
    run.fdata = std::move(result.fdata);
    return run;
}

ImputationRun run_dr(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data,
    const std::vector<Estimand>& estimands, const Logger& log)
{
    ImputationRun run;
    const auto y = item_of(*data, config.dr.y, "dr.y");
    const auto cov = items_of(*data, config.dr.covariates, "dr.covariates");
    fracimp::PropensityOptions po;
    po.normalize = config.dr.normalize;
    for (const auto& name : config.dr.covariates) {
        const bool is_log = std::find(config.dr.log_covariates.begin(), config.dr.log_covariates.end(), name)
            != config.dr.log_covariates.end();
        po.transforms.push_back(is_log ? fracimp::CovariateTransform::log : fracimp::CovariateTransform::identity);
    }
    const auto outcome = fracimp::fit_outcome_regression(*data, y, cov);
    const auto propensity = fracimp::fit_propensity(*data, y, cov, po);
    const auto U = estimands.empty() ? EstimatingFunction::mean(y) : estimands.front().U;
    auto result = fracimp::dr_fi(data, y, outcome, propensity, U);
    log("dr: FI total " + fracimp::format_double(result.total_fi) + ", DR total "
        + fracimp::format_double(result.total_dr));
    std::vector<std::string> names { "outcome:intercept" };
    for (std::size_t k = 1; k < static_cast<std::size_t>(outcome.beta.size()); ++k) {
        names.push_back("outcome:b" + std::to_string(k));
    }
    names.push_back("propensity:intercept");
    for (std::size_t k = 1; k < static_cast<std::size_t>(propensity.phi.size()); ++k) {
        names.push_back("propensity:" + config.dr.covariates.at(k - 1));
    }
    Vector theta(outcome.beta.size() + propensity.phi.size());
    theta << outcome.beta, propensity.phi;
    run.parameter_names = std::move(names);
    run.theta = theta;
    run.diagnostics["total_fi"] = result.total_fi;
    run.diagnostics["total_dr"] = result.total_dr;
    run.diagnostics["propensity_shift"] = propensity.shift;
    run.fdata = std::move(result.fdata);
    return run;
}

fracimp::StratifiedLogNormalRegression mi_model(const RunConfig& config, const SurveyDataset& data)
{
    MiSettings s = config.mi;
    if (s.y.empty() && !config.model.empty() && config.model.front().family == "stratified_lognormal") {
        s.y = config.model.front().response;
        s.stratum = config.model.front().stratum;
        s.x = config.model.front().x;
    }
    const auto st = item_of(data, s.stratum, "mi.stratum");
    if (data.items()[st].kind != fracimp::ItemKind::categorical) {
        fail(ErrorCode::config, "mi.stratum '" + s.stratum + "' must be categorical");
    }
    return { item_of(data, s.y, "mi.y"), st, item_of(data, s.x, "mi.x"), data.items()[st].labels.size() };
}

ImputationRun run_mi(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data, const Logger& log)
{
    ImputationRun run;
    const auto model = mi_model(config, *data);
    run.completed = fracimp::mi_impute(*data, model, config.mi.m, config.seed, { config.threads });
    log("mi: " + std::to_string(run.completed.size()) + " completed data sets");
    run.extra.add("completed.csv", fracimp::completed_long_csv(run.completed));
    return run;
}

ImputationRun run_method(const RunConfig& config, const std::shared_ptr<const SurveyDataset>& data,
    const std::vector<Estimand>& estimands, const Logger& log)
{
    switch (config.method) {
    case Method::pfi: return run_pfi(config, data, log);
    case Method::fhdi: return run_fhdi(config, data, log);
    case Method::kernel: return run_kernel(config, data, estimands, log);
    case Method::sfi: return run_sfi(config, data, log);
    case Method::dr: return run_dr(config, data, estimands, log);
    case Method::mi: return run_mi(config, data, log);
    }
    fail(ErrorCode::config, "unknown method");
}

std::shared_ptr<const SurveyDataset> load_input(const RunConfig& config, const Logger& log)
{
    auto data = std::make_shared<const SurveyDataset>(load_data(config.data));
    log("read " + std::to_string(data->size()) + " units and " + std::to_string(data->item_count()) + " items from "
        + config.data.path.string());
    return data;
}

// Per-replicate estimates of a complete data set under the delete-1 jackknife.
double complete_jackknife_variance(const SurveyDataset& data, const EstimatingFunction& U, double estimate,
    unsigned threads)
{
    const auto scheme = fracimp::build_delete1(data);
    std::vector<double> reps(scheme.size());
    fracimp::parallel_for(scheme.size(), threads, [&](std::size_t k) {
        const auto w = scheme.weights(k);
        reps[k] = fracimp::solve_complete(data, U, std::span<const double>(w)).value();
    });
    return fracimp::jackknife_variance(reps, scheme, estimate);
}

std::vector<fracimp::RubinResult> mi_estimates(const std::vector<SurveyDataset>& completed,
    const std::vector<Estimand>& estimands, unsigned threads)
{
    std::vector<fracimp::RubinResult> out;
    for (const auto& e : estimands) {
        std::vector<double> est(completed.size());
        std::vector<double> var(completed.size());
        for (std::size_t k = 0; k < completed.size(); ++k) {
            est[k] = fracimp::solve_complete(completed[k], e.U).value();
            var[k] = complete_jackknife_variance(completed[k], e.U, est[k], threads);
        }
        out.push_back(fracimp::rubin_combine(est, var));
    }
    return out;
}

ordered_json diagnostics_doc(const RunConfig& config, const ImputationRun& run)
{
    ordered_json doc;
    doc["method"] = to_string(config.method);
    doc["seed"] = config.seed;
    for (const auto& [k, v] : run.diagnostics.items()) {
        doc[k] = v;
    }
    if (run.fdata) {
        doc["weights"] = weight_summary(*run.fdata);
    }
    doc["warnings"] = run.warnings;
    return doc;
}

} // namespace

Artifacts cmd_impute(const RunConfig& config, const Logger& log)
{
    config.validate();
    const auto data = load_input(config, log);
    const auto estimands = resolve_estimands(config, *data);
    auto run = run_method(config, data, estimands, log);
    for (const auto& w : run.warnings) {
        log("warning: " + w);
    }

    Artifacts out;
    std::ostringstream est;
    est << "estimand,estimate\n";
    if (config.method == Method::mi) {
        for (const auto& e : estimands) {
            double sum = 0.0;
            for (const auto& c : run.completed) {
                sum += fracimp::solve_complete(c, e.U).value();
            }
            est << fracimp::quote_csv_field(e.label) << ','
                << fracimp::format_double(sum / static_cast<double>(run.completed.size())) << '\n';
        }
    } else {
        out.add("fractional.csv", fracimp::fractional_csv(*run.fdata));
        for (const auto& e : estimands) {
            est << fracimp::quote_csv_field(e.label) << ','
                << fracimp::format_double(fracimp::solve_fractional(*run.fdata, e.U).value()) << '\n';
        }
    }
    if (run.theta) {
        out.add("parameters.json", fracimp::parameters_to_json(run.parameter_names, *run.theta));
    }
    for (const auto& [name, content] : run.extra.files()) {
        out.add(name, content);
    }
    out.add("estimates.csv", est.str());
    out.add("diagnostics.json", diagnostics_doc(config, run).dump(2) + '\n');
    return out;
}

Artifacts cmd_variance(const RunConfig& config, const Logger& log)
{
    config.validate();
    const auto data = load_input(config, log);
    const auto estimands = resolve_estimands(config, *data);
    if (estimands.empty()) {
        fail(ErrorCode::config, "no estimands: list them under 'estimands'");
    }
    auto run = run_method(config, data, estimands, log);

    std::vector<double> eta(estimands.size());
    std::vector<double> var(estimands.size());
    std::vector<std::string> warnings = run.warnings;
    Artifacts out;
    if (config.method == Method::mi) {
        const auto rubin = mi_estimates(run.completed, estimands, config.threads);
        for (std::size_t q = 0; q < estimands.size(); ++q) {
            eta[q] = rubin[q].estimate;
            var[q] = rubin[q].total;
        }
    } else {
        const auto scheme = fracimp::build_delete1(*data);
        std::vector<fracimp::EstimatingFunction> Us;
        for (const auto& e : estimands) {
            Us.push_back(e.U);
        }
        for (std::size_t q = 0; q < estimands.size(); ++q) {
            eta[q] = fracimp::solve_fractional(*run.fdata, Us[q]).value();
        }
        fracimp::ReplicateEstimates reps;
        if (config.method == Method::pfi) {
            fracimp::ReplicateOptions ro;
            ro.method = config.replicate_method;
            ro.max_em_iter = config.max_em_iter;
            ro.em_tol = config.em_tol;
            ro.threads = config.threads;
            const fracimp::ReplicateEngine engine(*run.pfi, run.model, scheme, ro);
            reps = engine.run(Us);
            warnings.insert(warnings.end(), reps.warnings.begin(), reps.warnings.end());
        } else {
            reps.eta.assign(scheme.size(), std::vector<double>(Us.size()));
            reps.theta.assign(scheme.size(), Vector());
            for (std::size_t q = 0; q < Us.size(); ++q) {
                const auto r = fracimp::fixed_weight_replicates(*run.fdata, scheme, Us[q], {}, config.threads);
                for (std::size_t k = 0; k < r.size(); ++k) {
                    reps.eta[k][q] = r[k];
                }
            }
        }
        var = fracimp::jackknife_variances(reps, scheme, eta);
        std::vector<std::string> labels;
        for (const auto& e : estimands) {
            labels.push_back(e.label);
        }
        out.add("replicates.csv", fracimp::replicate_csv(reps,
                                      config.method == Method::pfi ? run.parameter_names : std::vector<std::string> {},
                                      labels));
    }
    for (const auto& w : warnings) {
        log("warning: " + w);
    }
    std::ostringstream est;
    est << "estimand,estimate,variance,se\n";
    for (std::size_t q = 0; q < estimands.size(); ++q) {
        est << fracimp::quote_csv_field(estimands[q].label) << ',' << fracimp::format_double(eta[q]) << ','
            << fracimp::format_double(var[q]) << ',' << fracimp::format_double(std::sqrt(var[q])) << '\n';
    }
    out.add("estimates.csv", est.str());
    run.warnings = warnings;
    auto doc = diagnostics_doc(config, run);
    doc["replicate_method"] = config.method == Method::pfi
        ? (config.replicate_method == fracimp::ReplicateMethod::em ? "em" : "one_step_newton")
        : (config.method == Method::mi ? "rubin" : "fixed_fractional_weights");
    out.add("diagnostics.json", doc.dump(2) + '\n');
    return out;
}

Artifacts cmd_simulate(const RunConfig& config, const Logger& log)
{
    config.validate();
    auto study = config.simulation.study;
    study.seed = config.seed;
    study.threads = config.threads;
    log("simulate: " + std::to_string(study.replicates) + " replicates");
    std::size_t last_pct = 0;
    const auto records = fracimp::run_replicates(study, [&](std::size_t done, std::size_t total) {
        const auto pct = done * 10 / total;
        if (pct != last_pct) {
            last_pct = pct;
            log("simulate: " + std::to_string(done) + "/" + std::to_string(total));
        }
    });
    const auto report = fracimp::summarize(records, config.simulation.width_scale);
    for (const auto& f : report.failures) {
        log("warning: " + f);
    }
    Artifacts out;
    out.add("report.csv", report.csv());
    out.add("report.txt", report.table());
    out.add("records.csv", fracimp::records_csv(records));
    ordered_json doc;
    doc["seed"] = config.seed;
    doc["replicates"] = report.replicates;
    doc["response_rate"] = report.response_rate;
    doc["truth"] = ordered_json::object();
    const auto truth = report.truth.all();
    for (std::size_t q = 0; q < truth.size(); ++q) {
        doc["truth"][report.parameters[q]] = truth[q];
    }
    doc["failures"] = report.failures;
    out.add("summary.json", doc.dump(2) + '\n');
    return out;
}

Artifacts cmd_twophase(const RunConfig& config, const Logger& log)
{
    config.validate();
    const auto& s = config.twophase;
    const auto p1 = load_data(s.phase1);
    const auto p2 = load_data(s.phase2);
    log("twophase: " + std::to_string(p1.size()) + " phase-1 and " + std::to_string(p2.size()) + " phase-2 units");
    const auto tp = fracimp::make_two_phase(p1, p2, s.x, s.y, s.nested);
    const auto result = s.m == 0 ? fracimp::two_phase_fefi(tp) : fracimp::two_phase_reduced(tp, s.m, config.seed);
    auto warnings = tp.warnings;
    warnings.insert(warnings.end(), result.warnings.begin(), result.warnings.end());
    for (const auto& w : warnings) {
        log("warning: " + w);
    }
    Artifacts out;
    out.add("fractional.csv", fracimp::fractional_csv(result.fdata));
    ordered_json doc;
    doc["m"] = s.m;
    doc["seed"] = config.seed;
    doc["total"] = result.total;
    doc["mean"] = result.total / tp.phase1->total_weight();
    doc["regression_total"] = result.regression_total;
    doc["beta"] = std::vector<double>(result.model.beta.data(), result.model.beta.data() + result.model.beta.size());
    doc["weights"] = weight_summary(result.fdata);
    doc["warnings"] = warnings;
    out.add("summary.json", doc.dump(2) + '\n');
    return out;
}

} // namespace fi
