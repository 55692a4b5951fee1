#include "run_config.hpp"

#include "fracimp/error.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace fi {

using fracimp::ErrorCode;
using fracimp::fail;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed)
{
    if (!j.is_object()) {
        fail(ErrorCode::config, section + ": expected an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            fail(ErrorCode::config, section + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section)
{
    if (!j.contains(key)) {
        return;
    }
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCode::config, section + "." + key + ": " + e.what());
    }
}

template <class T>
void read_optional(const json& j, const char* key, std::optional<T>& out, const std::string& section)
{
    if (!j.contains(key)) {
        return;
    }
    if (j.at(key).is_null()) {
        out.reset();
        return;
    }
    T value {};
    read(j, key, value, section);
    out = value;
}

void read_path(const json& j, const char* key, std::filesystem::path& out, const std::string& section)
{
    std::string s;
    if (j.contains(key)) {
        read(j, key, s, section);
        out = s;
    }
}

void apply_source(DataSource& s, const json& j, const std::string& section)
{
    check_keys(j, section, { "path", "weight", "id", "stratum", "missing", "items" });
    read_path(j, "path", s.path, section);
    read(j, "weight", s.weight, section);
    read_optional(j, "id", s.id, section);
    read_optional(j, "stratum", s.stratum, section);
    read(j, "missing", s.missing, section);
    if (j.contains("items")) {
        if (!j.at("items").is_array()) {
            fail(ErrorCode::config, section + ".items: expected an array");
        }
        for (const auto& item : j.at("items")) {
            if (item.is_string()) {
                continue;
            }
            check_keys(item, section + ".items[]", { "name", "kind", "labels" });
            if (!item.contains("name")) {
                fail(ErrorCode::config, section + ".items[]: every item needs a name");
            }
        }
        s.items = j.at("items");
    }
}

fracimp::ReplicateMethod parse_replicate_method(const std::string& name)
{
    if (name == "one_step_newton" || name == "newton") {
        return fracimp::ReplicateMethod::one_step_newton;
    }
    if (name == "em") {
        return fracimp::ReplicateMethod::em;
    }
    fail(ErrorCode::config, "unknown replicate method '" + name + "' (expected one_step_newton or em)");
}

void apply_simulation(SimulationSettings& s, const json& j)
{
    const std::string sec = "simulation";
    check_keys(j, sec,
        { "replicates", "methods", "M", "m", "replicate_method", "max_em_iter", "em_tol", "population", "design",
            "response", "width_scale" });
    auto& st = s.study;
    read(j, "replicates", st.replicates, sec);
    read(j, "M", st.methods.pfi_M, sec);
    read(j, "m", st.methods.mi_m, sec);
    read(j, "max_em_iter", st.max_em_iter, sec);
    read(j, "em_tol", st.em_tol, sec);
    read(j, "width_scale", s.width_scale, sec);
    if (j.contains("replicate_method")) {
        std::string name;
        read(j, "replicate_method", name, sec);
        st.methods.replicate_method = parse_replicate_method(name);
    }
    if (j.contains("methods")) {
        std::vector<std::string> methods;
        read(j, "methods", methods, sec);
        st.methods.full = st.methods.mi = st.methods.pfi = false;
        for (const auto& m : methods) {
            if (m == "FULL") {
                st.methods.full = true;
            } else if (m == "MI") {
                st.methods.mi = true;
            } else if (m == "PFI") {
                st.methods.pfi = true;
            } else {
                fail(ErrorCode::config, "simulation.methods: unknown method '" + m + "' (expected FULL, MI, PFI)");
            }
        }
    }
    if (j.contains("population")) {
        const auto& p = j.at("population");
        const std::string ps = "simulation.population";
        check_keys(p, ps, { "sizes", "log_x_mean", "log_x_sd", "beta0", "beta1", "sigma" });
        read(p, "sizes", st.population.sizes, ps);
        read(p, "log_x_mean", st.population.log_x_mean, ps);
        read(p, "log_x_sd", st.population.log_x_sd, ps);
        read(p, "beta0", st.population.beta0, ps);
        read(p, "beta1", st.population.beta1, ps);
        read(p, "sigma", st.population.sigma, ps);
    }
    if (j.contains("design")) {
        const auto& d = j.at("design");
        const std::string ds = "simulation.design";
        check_keys(d, ds, { "sample_sizes", "without_replacement" });
        read(d, "sample_sizes", st.design.sample_sizes, ds);
        read(d, "without_replacement", st.design.without_replacement, ds);
    }
    if (j.contains("response")) {
        const auto& r = j.at("response");
        const std::string rs = "simulation.response";
        check_keys(r, rs, { "a", "b" });
        read(r, "a", st.response.a, rs);
        read(r, "b", st.response.b, rs);
    }
}

std::vector<std::string> header_of(const std::filesystem::path& path)
{
    const auto text = fracimp::read_file(path);
    const auto end = text.find('\n');
    auto line = text.substr(0, end);
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (line.empty()) {
        fail(ErrorCode::parse, "'" + path.string() + "' has no header row");
    }
    return fracimp::split_csv_line(line);
}

std::vector<std::string> distinct_values(const std::filesystem::path& path, const std::string& column,
    const std::string& missing)
{
    std::istringstream in(fracimp::read_file(path));
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = fracimp::split_csv_line(line);
    const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), column) - header.begin());
    std::set<std::string> values;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = fracimp::split_csv_line(line);
        if (col < fields.size() && !fields[col].empty() && fields[col] != missing) {
            values.insert(fields[col]);
        }
    }
    return { values.begin(), values.end() };
}

} // namespace

std::string EstimandSpec::label() const
{
    if (type == "quantile") {
        return "quantile(" + item + "," + fracimp::format_double(p) + ")";
    }
    if (type == "median") {
        return "median(" + item + ")";
    }
    if (type == "proportion_below") {
        return "proportion_below(" + item + "," + fracimp::format_double(c) + ")";
    }
    return "mean(" + item + ")";
}

Method parse_method(const std::string& name)
{
    static const std::pair<const char*, Method> table[] = { { "pfi", Method::pfi }, { "fhdi", Method::fhdi },
        { "kernel", Method::kernel }, { "sfi", Method::sfi }, { "dr", Method::dr }, { "mi", Method::mi } };
    for (const auto& [n, m] : table) {
        if (name == n) {
            return m;
        }
    }
    fail(ErrorCode::config, "unknown method '" + name + "' (expected pfi, fhdi, kernel, sfi, dr or mi)");
}

std::string to_string(Method method)
{
    switch (method) {
    case Method::pfi: return "pfi";
    case Method::fhdi: return "fhdi";
    case Method::kernel: return "kernel";
    case Method::sfi: return "sfi";
    case Method::dr: return "dr";
    case Method::mi: return "mi";
    }
    return "unknown";
}

void apply_json(RunConfig& c, const json& j)
{
    const std::string sec = "config";
    check_keys(j, sec,
        { "command", "method", "data", "input", "output", "seed", "threads", "quiet", "max_em_iter", "em_tol",
            "replicate_method", "model", "estimands", "pfi", "fhdi", "kernel", "dr", "mi", "twophase",
            "simulation" });
    if (j.contains("command")) {
        std::string name;
        read(j, "command", name, sec);
        if (name == "impute") {
            c.command = Command::impute;
        } else if (name == "variance") {
            c.command = Command::variance;
        } else if (name == "simulate") {
            c.command = Command::simulate;
        } else if (name == "twophase" || name == "two-phase") {
            c.command = Command::twophase;
        } else {
            fail(ErrorCode::config, "unknown command '" + name + "'");
        }
    }
    if (j.contains("method")) {
        std::string name;
        read(j, "method", name, sec);
        c.method = parse_method(name);
    }
    if (j.contains("data")) {
        apply_source(c.data, j.at("data"), "data");
    }
    read_path(j, "input", c.data.path, sec);
    read_path(j, "output", c.output, sec);
    read(j, "seed", c.seed, sec);
    read(j, "threads", c.threads, sec);
    read(j, "quiet", c.quiet, sec);
    read(j, "max_em_iter", c.max_em_iter, sec);
    read(j, "em_tol", c.em_tol, sec);
    if (j.contains("replicate_method")) {
        std::string name;
        read(j, "replicate_method", name, sec);
        c.replicate_method = parse_replicate_method(name);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        const auto& comps = m.is_object() && m.contains("components") ? m.at("components") : m;
        if (!comps.is_array()) {
            fail(ErrorCode::config, "model: expected a list of components");
        }
        c.model.clear();
        for (const auto& cj : comps) {
            check_keys(cj, "model.components[]", { "family", "response", "predictors", "stratum", "x" });
            ComponentSpec s;
            read(cj, "family", s.family, "model");
            read(cj, "response", s.response, "model");
            read(cj, "predictors", s.predictors, "model");
            read(cj, "stratum", s.stratum, "model");
            read(cj, "x", s.x, "model");
            c.model.push_back(std::move(s));
        }
    }
    if (j.contains("estimands")) {
        if (!j.at("estimands").is_array()) {
            fail(ErrorCode::config, "estimands: expected an array");
        }
        c.estimands.clear();
        for (const auto& ej : j.at("estimands")) {
            check_keys(ej, "estimands[]", { "type", "item", "p", "c" });
            EstimandSpec e;
            read(ej, "type", e.type, "estimands");
            read(ej, "item", e.item, "estimands");
            read(ej, "p", e.p, "estimands");
            read(ej, "c", e.c, "estimands");
            c.estimands.push_back(std::move(e));
        }
    }
    if (j.contains("pfi")) {
        const auto& p = j.at("pfi");
        check_keys(p, "pfi", { "M", "sir_pool" });
        read(p, "M", c.pfi.M, "pfi");
        read(p, "sir_pool", c.pfi.sir_pool, "pfi");
    }
    if (j.contains("fhdi")) {
        const auto& p = j.at("fhdi");
        check_keys(p, "fhdi", { "items", "categories", "donors", "fefi" });
        read(p, "items", c.fhdi.items, "fhdi");
        read(p, "categories", c.fhdi.categories, "fhdi");
        read(p, "donors", c.fhdi.donors, "fhdi");
        read(p, "fefi", c.fhdi.fefi, "fhdi");
    }
    if (j.contains("kernel")) {
        const auto& p = j.at("kernel");
        check_keys(p, "kernel", { "x", "y", "kernel", "bandwidth", "product" });
        read(p, "x", c.kernel.x, "kernel");
        read(p, "y", c.kernel.y, "kernel");
        read(p, "kernel", c.kernel.kernel, "kernel");
        read(p, "bandwidth", c.kernel.bandwidth, "kernel");
        read(p, "product", c.kernel.product, "kernel");
    }
    if (j.contains("dr")) {
        const auto& p = j.at("dr");
        check_keys(p, "dr", { "y", "covariates", "log_covariates", "normalize" });
        read(p, "y", c.dr.y, "dr");
        read(p, "covariates", c.dr.covariates, "dr");
        read(p, "log_covariates", c.dr.log_covariates, "dr");
        read(p, "normalize", c.dr.normalize, "dr");
    }
    if (j.contains("mi")) {
        const auto& p = j.at("mi");
        check_keys(p, "mi", { "m", "y", "stratum", "x" });
        read(p, "m", c.mi.m, "mi");
        read(p, "y", c.mi.y, "mi");
        read(p, "stratum", c.mi.stratum, "mi");
        read(p, "x", c.mi.x, "mi");
    }
    if (j.contains("twophase")) {
        const auto& p = j.at("twophase");
        check_keys(p, "twophase", { "phase1", "phase2", "x", "y", "m", "nested" });
        if (p.contains("phase1")) {
            apply_source(c.twophase.phase1, p.at("phase1"), "twophase.phase1");
        }
        if (p.contains("phase2")) {
            apply_source(c.twophase.phase2, p.at("phase2"), "twophase.phase2");
        }
        read(p, "x", c.twophase.x, "twophase");
        read(p, "y", c.twophase.y, "twophase");
        read(p, "m", c.twophase.m, "twophase");
        read(p, "nested", c.twophase.nested, "twophase");
    }
    if (j.contains("simulation")) {
        apply_simulation(c.simulation, j.at("simulation"));
    }
}

RunConfig load_config(const std::filesystem::path& path)
{
    const auto text = fracimp::read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::parse, path.string() + ": " + e.what());
    }
    RunConfig c;
    apply_json(c, j);
    return c;
}

namespace {

void require_file(const std::filesystem::path& path, const std::string& what)
{
    if (path.empty()) {
        fail(ErrorCode::config, what + " is not set");
    }
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
        fail(ErrorCode::io, what + " '" + path.string() + "' does not exist");
    }
}

} // namespace

void RunConfig::validate() const
{
    if (output.empty()) {
        fail(ErrorCode::config, "output directory is not set");
    }
    if (!(em_tol > 0.0) || max_em_iter == 0) {
        fail(ErrorCode::config, "em_tol must be positive and max_em_iter at least 1");
    }
    switch (command) {
    case Command::impute:
    case Command::variance:
        require_file(data.path, "input file");
        break;
    case Command::twophase:
        require_file(twophase.phase1.path, "phase-1 file");
        require_file(twophase.phase2.path, "phase-2 file");
        if (twophase.x.empty() || twophase.y.empty()) {
            fail(ErrorCode::config, "twophase: x and y must be named");
        }
        break;
    case Command::simulate:
        if (simulation.study.replicates == 0) {
            fail(ErrorCode::config, "simulation.replicates must be at least 1");
        }
        if (!(simulation.width_scale > 0.0)) {
            fail(ErrorCode::config, "simulation.width_scale must be positive");
        }
        simulation.study.population.validate();
        break;
    }
    if (command == Command::impute || command == Command::variance) {
        if (method == Method::pfi && pfi.M == 0) {
            fail(ErrorCode::config, "pfi.M must be at least 1");
        }
        if (method == Method::mi && mi.m < 2) {
            fail(ErrorCode::config, "mi.m must be at least 2");
        }
        if (method == Method::fhdi && (fhdi.categories < 2 || fhdi.donors == 0)) {
            fail(ErrorCode::config, "fhdi: categories must be at least 2 and donors at least 1");
        }
        for (double h : kernel.bandwidth) {
            if (!(h > 0.0)) {
                fail(ErrorCode::config, "kernel.bandwidth entries must be positive");
            }
        }
        for (const auto& e : estimands) {
            if (e.type != "mean" && e.type != "median" && e.type != "quantile" && e.type != "proportion_below") {
                fail(ErrorCode::config, "estimand type '" + e.type + "' is not one of mean, median, quantile, proportion_below");
            }
            if (e.type == "quantile" && !(e.p > 0.0 && e.p < 1.0)) {
                fail(ErrorCode::config, "quantile p must lie in (0, 1)");
            }
        }
    }
}

fracimp::CsvSchema resolve_schema(const DataSource& source)
{
    fracimp::CsvSchema schema;
    schema.weight_column = source.weight;
    schema.id_column = source.id;
    schema.stratum_column = source.stratum;
    schema.missing_token = source.missing;
    const auto header = header_of(source.path);
    if (source.items.empty()) {
        for (const auto& col : header) {
            if (col == source.weight || (source.id && col == *source.id)
                || (source.stratum && col == *source.stratum)) {
                continue;
            }
            schema.items.push_back(fracimp::Item { col, fracimp::ItemKind::continuous, {} });
        }
        return schema;
    }
    for (const auto& ij : source.items) {
        fracimp::Item item;
        if (ij.is_string()) {
            item.name = ij.get<std::string>();
        } else {
            item.name = ij.at("name").get<std::string>();
            const auto kind = ij.value("kind", std::string(ij.contains("labels") ? "categorical" : "continuous"));
            if (kind == "categorical") {
                item.kind = fracimp::ItemKind::categorical;
                if (ij.contains("labels")) {
                    item.labels = ij.at("labels").get<std::vector<std::string>>();
                } else {
                    item.labels = distinct_values(source.path, item.name, source.missing);
                }
            } else if (kind != "continuous") {
                fail(ErrorCode::config, "item '" + item.name + "': kind must be continuous or categorical");
            }
        }
        schema.items.push_back(std::move(item));
    }
    return schema;
}

fracimp::SurveyDataset load_data(const DataSource& source)
{
    return fracimp::load_csv(source.path, resolve_schema(source));
}

} // namespace fi
