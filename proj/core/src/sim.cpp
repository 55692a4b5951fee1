#include "fracimp/sim.hpp"

#include "fracimp/error.hpp"
#include "fracimp/mi.hpp"
#include "fracimp/models.hpp"
#include "fracimp/parallel.hpp"
#include "fracimp/pfi.hpp"
#include "fracimp/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>

namespace fracimp {

namespace {

constexpr double kZ975 = 1.959963984540054;
constexpr std::size_t kStratumItem = 0;
constexpr std::size_t kXItem = 1;
constexpr std::size_t kYItem = 2;

// Neumaier compensated sum.
class Sum {
public:
    void add(double v)
    {
        const double t = sum_ + v;
        if (std::abs(sum_) >= std::abs(v)) {
            comp_ += (sum_ - t) + v;
        } else {
            comp_ += (v - t) + sum_;
        }
        sum_ = t;
    }
    [[nodiscard]] double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

std::vector<Item> study_items(std::size_t strata)
{
    Item s { "stratum", ItemKind::categorical, {} };
    for (std::size_t h = 0; h < strata; ++h) {
        s.labels.push_back(std::to_string(h + 1));
    }
    return { s, Item { "x", ItemKind::continuous, {} }, Item { "y", ItemKind::continuous, {} } };
}

std::vector<std::string> parameter_names(std::size_t strata)
{
    std::vector<std::string> names;
    for (std::size_t h = 0; h < strata; ++h) {
        names.push_back("eta" + std::to_string(h + 1));
    }
    names.push_back("eta" + std::to_string(strata + 1));
    return names;
}

MethodRecord full_estimates(const SurveyDataset& sample, std::size_t H)
{
    MethodRecord r;
    for (std::size_t h = 0; h < H; ++h) {
        const auto s = stratified_mean(sample, kYItem, { h });
        r.estimate.push_back(s.estimate);
        r.variance.push_back(s.variance);
    }
    const auto s = stratified_mean(sample, kYItem);
    r.estimate.push_back(s.estimate);
    r.variance.push_back(s.variance);
    r.ok = true;
    return r;
}

MethodRecord mi_estimates(const SurveyDataset& masked, std::size_t H, std::size_t m, std::uint64_t seed)
{
    const StratifiedLogNormalRegression model(kYItem, kStratumItem, kXItem, H);
    const auto completed = mi_impute(masked, model, m, seed);
    std::vector<std::vector<double>> est(H + 1, std::vector<double>(m));
    std::vector<std::vector<double>> var(H + 1, std::vector<double>(m));
    for (std::size_t k = 0; k < m; ++k) {
        const auto f = full_estimates(completed[k], H);
        for (std::size_t q = 0; q <= H; ++q) {
            est[q][k] = f.estimate[q];
            var[q][k] = f.variance[q];
        }
    }
    MethodRecord r;
    for (std::size_t q = 0; q <= H; ++q) {
        const auto c = rubin_combine(est[q], var[q]);
        r.estimate.push_back(c.estimate);
        r.variance.push_back(c.total);
    }
    r.ok = true;
    return r;
}

// Stratum and population means of the fractionally imputed y given per-unit
// conditional means.
std::vector<double> domain_means(const SurveyDataset& data, std::span<const double> unit_w,
    std::span<const double> unit_mean, std::size_t H)
{
    std::vector<double> num(H + 1, 0.0);
    std::vector<double> den(H + 1, 0.0);
    const auto& codes = data.stratum_codes();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto h = codes[i];
        num[h] += unit_w[i] * unit_mean[i];
        den[h] += unit_w[i];
        num[H] += unit_w[i] * unit_mean[i];
        den[H] += unit_w[i];
    }
    for (std::size_t q = 0; q <= H; ++q) {
        num[q] /= den[q];
    }
    return num;
}

std::vector<double> unit_means(const ImputationSet& imps, std::span<const double> frac_w)
{
    std::vector<double> out(imps.base().size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto [b, e] = imps.unit_rows(i);
        for (std::size_t r = b; r < e; ++r) {
            out[i] += frac_w[r] * imps.row_values(r)[kYItem];
        }
    }
    return out;
}

MethodRecord pfi_estimates(const SurveyDataset& masked, std::size_t H, const StudyConfig& config, std::uint64_t seed)
{
    auto data = std::make_shared<const SurveyDataset>(masked);
    auto component = std::make_shared<const StratifiedLogNormalRegression>(kYItem, kStratumItem, kXItem, H);
    auto model = std::make_shared<const SequentialModel>(
        std::vector<std::shared_ptr<const ConditionalComponent>> { component }, 3);
    const Vector theta0 = fit_conditional_components(masked, *model);
    const auto h = plugin_proposal(model, theta0);
    PFIConfig pc;
    pc.M = config.methods.pfi_M;
    pc.sir_pool = std::max(pc.sir_pool, pc.M);
    pc.max_em_iter = config.max_em_iter;
    pc.em_tol = config.em_tol;
    const auto result = run_em(data, *model, h, theta0, pc, seed);
    if (!result.converged) {
        fail(ErrorCode::non_convergence, "EM did not converge");
    }

    const auto& imps = result.imputations;
    const auto base_w = masked.weights();
    MethodRecord r;
    r.estimate = domain_means(masked, base_w, unit_means(imps, result.fdata.weights()), H);

    ReplicateOptions ro;
    ro.method = config.methods.replicate_method;
    ro.max_em_iter = config.max_em_iter;
    ro.em_tol = config.em_tol;
    const ReplicateEngine engine(result, model, build_delete1(masked), ro);
    const auto& scheme = engine.scheme();
    std::vector<std::vector<double>> reps(H + 1, std::vector<double>(scheme.size()));
    for (std::size_t k = 0; k < scheme.size(); ++k) {
        const Vector theta_k = engine.replicate_theta(k);
        const auto w = engine.fractional_weights(theta_k);
        const auto eta = domain_means(masked, scheme.weights(k), unit_means(imps, w), H);
        for (std::size_t q = 0; q <= H; ++q) {
            reps[q][k] = eta[q];
        }
    }
    for (std::size_t q = 0; q <= H; ++q) {
        r.variance.push_back(jackknife_variance(reps[q], scheme, r.estimate[q]));
    }
    r.ok = true;
    return r;
}

template <class F>
MethodRecord guarded(F&& f)
{
    try {
        return f();
    } catch (const std::exception& e) {
        MethodRecord r;
        r.error = e.what();
        return r;
    }
}

} // namespace

void PopulationSpec::validate() const
{
    const auto H = sizes.size();
    if (H == 0 || log_x_mean.size() != H || log_x_sd.size() != H || beta0.size() != H || beta1.size() != H
        || sigma.size() != H) {
        fail(ErrorCode::config, "population: every per-stratum list needs one entry per stratum");
    }
    for (std::size_t h = 0; h < H; ++h) {
        if (sizes[h] == 0) {
            fail(ErrorCode::config, "population: stratum sizes must be positive");
        }
        if (sigma[h] < 0.0 || log_x_sd[h] < 0.0) {
            fail(ErrorCode::config, "population: standard deviations must be nonnegative");
        }
    }
}

std::vector<double> TrueParameters::all() const
{
    auto v = stratum_means;
    v.push_back(mean);
    return v;
}

Population generate_population(const PopulationSpec& spec, std::uint64_t seed)
{
    spec.validate();
    Population pop;
    pop.strata = spec.strata();
    pop.truth.stratum_means.assign(pop.strata, 0.0);
    Sum total;
    std::size_t N = 0;
    for (std::size_t h = 0; h < pop.strata; ++h) {
        auto rng = substream(seed, Stream::population, h);
        Sum sh;
        for (std::size_t i = 0; i < spec.sizes[h]; ++i) {
            const double lx = spec.log_x_mean[h] + spec.log_x_sd[h] * standard_normal(rng);
            const double ly = spec.beta0[h] + spec.beta1[h] * lx + spec.sigma[h] * standard_normal(rng);
            pop.stratum.push_back(h);
            pop.x.push_back(std::exp(lx));
            pop.y.push_back(std::exp(ly));
            sh.add(pop.y.back());
            total.add(pop.y.back());
        }
        pop.truth.stratum_means[h] = sh.value() / static_cast<double>(spec.sizes[h]);
        N += spec.sizes[h];
    }
    pop.truth.mean = total.value() / static_cast<double>(N);
    return pop;
}

SurveyDataset population_dataset(const Population& population)
{
    std::vector<UnitRecord> units;
    std::vector<std::string> strata;
    for (std::size_t i = 0; i < population.size(); ++i) {
        units.push_back(UnitRecord { "u" + std::to_string(i + 1), 1.0,
            { static_cast<double>(population.stratum[i]), population.x[i], population.y[i] } });
        strata.push_back(std::to_string(population.stratum[i] + 1));
    }
    return SurveyDataset(study_items(population.strata), std::move(units), std::move(strata));
}

void DesignSpec::validate(const Population& population) const
{
    if (sample_sizes.size() != population.strata) {
        fail(ErrorCode::config, "design: one sample size per stratum required");
    }
    std::vector<std::size_t> N(population.strata, 0);
    for (auto h : population.stratum) {
        ++N[h];
    }
    for (std::size_t h = 0; h < N.size(); ++h) {
        if (sample_sizes[h] < 2 || (without_replacement && sample_sizes[h] > N[h])) {
            fail(ErrorCode::config, "design: stratum " + std::to_string(h + 1) + " needs 2 <= n_h <= N_h");
        }
    }
}

SurveyDataset draw_sample(const Population& population, const DesignSpec& design, std::uint64_t seed)
{
    design.validate(population);
    std::vector<std::vector<std::size_t>> members(population.strata);
    for (std::size_t i = 0; i < population.size(); ++i) {
        members[population.stratum[i]].push_back(i);
    }
    std::vector<UnitRecord> units;
    std::vector<std::string> strata;
    for (std::size_t h = 0; h < population.strata; ++h) {
        auto rng = substream(seed, Stream::sample, h);
        auto& pool = members[h];
        const auto Nh = pool.size();
        const auto nh = design.sample_sizes[h];
        std::vector<std::size_t> chosen;
        if (design.without_replacement) {
            for (std::size_t k = 0; k < nh; ++k) {
                std::uniform_int_distribution<std::size_t> pick(k, Nh - 1);
                std::swap(pool[k], pool[pick(rng)]);
            }
            chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nh));
            std::sort(chosen.begin(), chosen.end());
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, Nh - 1);
            for (std::size_t k = 0; k < nh; ++k) {
                chosen.push_back(pool[pick(rng)]);
            }
        }
        const double w = static_cast<double>(Nh) / static_cast<double>(nh);
        for (auto i : chosen) {
            units.push_back(UnitRecord { "u" + std::to_string(i + 1), w,
                { static_cast<double>(h), population.x[i], population.y[i] } });
            strata.push_back(std::to_string(h + 1));
        }
    }
    return SurveyDataset(study_items(population.strata), std::move(units), std::move(strata));
}

double ResponseSpec::probability(double x) const
{
    return 1.0 / (1.0 + std::exp(a - b * std::log(x)));
}

SurveyDataset apply_response(const SurveyDataset& sample, const ResponseSpec& response, std::uint64_t seed)
{
    const auto x_item = sample.item_index("x");
    const auto y_item = sample.item_index("y");
    auto units = sample.units();
    for (std::size_t i = 0; i < units.size(); ++i) {
        auto& u = units[i];
        if (!u.values[x_item]) {
            fail(ErrorCode::contract, "apply_response: unit '" + u.id + "' has no x");
        }
        auto rng = substream(seed, Stream::response, i);
        if (!(uniform01(rng) < response.probability(*u.values[x_item]))) {
            u.values[y_item].reset();
        }
    }
    return sample.with_units(std::move(units));
}

double expected_response_rate(const Population& population, const ResponseSpec& response)
{
    Sum s;
    for (double x : population.x) {
        s.add(response.probability(x));
    }
    return s.value() / static_cast<double>(population.size());
}

StudyRecords run_replicates(const StudyConfig& config, const ProgressCallback& progress)
{
    require(config.replicates >= 1, "run_study: at least one replicate is required");
    const auto pop = generate_population(config.population, derive_seed(config.seed, Stream::population, 0));
    config.design.validate(pop);
    const auto H = pop.strata;

    StudyRecords rec;
    rec.parameters = parameter_names(H);
    rec.truth = pop.truth;
    if (config.methods.full) {
        rec.methods.push_back("FULL");
    }
    if (config.methods.mi) {
        if (config.methods.mi_m < 2) {
            fail(ErrorCode::config, "run_study: MI needs m >= 2");
        }
        rec.methods.push_back("MI");
    }
    if (config.methods.pfi) {
        rec.methods.push_back("PFI");
    }
    if (rec.methods.empty()) {
        fail(ErrorCode::config, "run_study: no method selected");
    }
    rec.replicates.resize(config.replicates);

    std::atomic<std::size_t> done { 0 };
    std::mutex progress_mutex;
    parallel_for(config.replicates, config.threads, [&](std::size_t r) {
        const auto sample = draw_sample(pop, config.design, derive_seed(config.seed, Stream::sample, r));
        const auto masked = apply_response(sample, config.response, derive_seed(config.seed, Stream::response, r));
        auto& out = rec.replicates[r];
        std::size_t resp = 0;
        for (const auto& u : masked.units()) {
            resp += u.values[kYItem] ? 1 : 0;
        }
        out.response_rate = static_cast<double>(resp) / static_cast<double>(masked.size());
        if (config.methods.full) {
            out.methods.push_back(guarded([&] { return full_estimates(sample, H); }));
        }
        if (config.methods.mi) {
            out.methods.push_back(guarded([&] {
                return mi_estimates(masked, H, config.methods.mi_m, derive_seed(config.seed, Stream::posterior, r));
            }));
        }
        if (config.methods.pfi) {
            out.methods.push_back(
                guarded([&] { return pfi_estimates(masked, H, config, derive_seed(config.seed, Stream::imputation, r)); }));
        }
        const auto n = ++done;
        if (progress) {
            std::lock_guard lock(progress_mutex);
            progress(n, config.replicates);
        }
    });
    return rec;
}

SimulationReport summarize(const StudyRecords& records, double width_scale)
{
    SimulationReport rep;
    rep.parameters = records.parameters;
    rep.truth = records.truth;
    rep.replicates = records.replicates.size();
    const auto truth = records.truth.all();
    const auto P = records.parameters.size();
    Sum rate;
    for (const auto& r : records.replicates) {
        rate.add(r.response_rate);
    }
    rep.response_rate = rate.value() / static_cast<double>(std::max<std::size_t>(rep.replicates, 1));

    for (std::size_t m = 0; m < records.methods.size(); ++m) {
        MethodSummary s;
        s.method = records.methods[m];
        std::vector<Sum> est(P), ve(P), width(P), hits(P);
        std::vector<std::vector<double>> values(P);
        for (std::size_t r = 0; r < records.replicates.size(); ++r) {
            const auto& mr = records.replicates[r].methods.at(m);
            if (!mr.ok) {
                ++s.failed;
                rep.failures.push_back(s.method + " replicate " + std::to_string(r + 1) + ": " + mr.error);
                continue;
            }
            ++s.used;
            for (std::size_t q = 0; q < P; ++q) {
                const double half = width_scale * kZ975 * std::sqrt(std::max(mr.variance[q], 0.0));
                est[q].add(mr.estimate[q]);
                ve[q].add(mr.variance[q]);
                width[q].add(2.0 * half);
                hits[q].add(std::abs(mr.estimate[q] - truth[q]) <= half ? 1.0 : 0.0);
                values[q].push_back(mr.estimate[q]);
            }
        }
        const double used = static_cast<double>(s.used);
        for (std::size_t q = 0; q < P; ++q) {
            const double mean = s.used > 0 ? est[q].value() / used : std::nan("");
            Sum ss;
            for (double v : values[q]) {
                ss.add((v - mean) * (v - mean));
            }
            const double var = s.used > 1 ? ss.value() / (used - 1.0) : std::nan("");
            const double mve = s.used > 0 ? ve[q].value() / used : std::nan("");
            s.mean.push_back(mean);
            s.var.push_back(var);
            s.ve.push_back(mve);
            s.rb_pct.push_back((mve - var) / var * 100.0);
            s.ci_width.push_back(s.used > 0 ? width[q].value() / used : std::nan(""));
            s.coverage.push_back(s.used > 0 ? hits[q].value() / used : std::nan(""));
        }
        rep.methods.push_back(std::move(s));
    }
    return rep;
}

SimulationReport run_study(const StudyConfig& config, const ProgressCallback& progress)
{
    return summarize(run_replicates(config, progress));
}

const MethodSummary& SimulationReport::method(const std::string& name) const
{
    for (const auto& m : methods) {
        if (m.method == name) {
            return m;
        }
    }
    fail(ErrorCode::contract, "report has no method '" + name + "'");
}

std::string SimulationReport::csv() const
{
    static const char* metrics[] = { "Mean", "Var", "RB_pct", "CI_width", "Coverage" };
    std::ostringstream out;
    out << "parameter";
    for (const char* metric : metrics) {
        for (const auto& m : methods) {
            out << ',' << metric << '_' << m.method;
        }
    }
    out << '\n';
    for (std::size_t q = 0; q < parameters.size(); ++q) {
        out << parameters[q];
        const std::vector<double> MethodSummary::* fields[]
            = { &MethodSummary::mean, &MethodSummary::var, &MethodSummary::rb_pct, &MethodSummary::ci_width,
                  &MethodSummary::coverage };
        for (auto field : fields) {
            for (const auto& m : methods) {
                out << ',' << format_double((m.*field)[q]);
            }
        }
        out << '\n';
    }
    return out.str();
}

std::string SimulationReport::table() const
{
    std::ostringstream out;
    out << std::fixed;
    out << "Replicates: " << replicates << "   mean response rate: " << std::setprecision(3) << response_rate << '\n';
    const auto truth_all = truth.all();
    out << "Truth:";
    for (std::size_t q = 0; q < parameters.size(); ++q) {
        out << ' ' << parameters[q] << '=' << std::setprecision(2) << truth_all[q];
    }
    out << "\n\n";
    const int w = 9;
    const auto M = methods.size();
    const auto group = static_cast<int>(M) * w;
    out << std::setw(6) << "";
    for (const char* title : { "Mean", "Var", "R.B. (%)", "CI width", "Coverage" }) {
        out << " | " << std::setw(group) << std::left << title << std::right;
    }
    out << '\n' << std::setw(6) << "";
    for (int g = 0; g < 5; ++g) {
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << m.method;
        }
    }
    out << '\n';
    for (std::size_t q = 0; q < parameters.size(); ++q) {
        out << std::setw(6) << std::left << parameters[q] << std::right;
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << std::setprecision(2) << m.mean[q];
        }
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << std::setprecision(2) << m.var[q];
        }
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << std::setprecision(2) << m.rb_pct[q];
        }
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << std::setprecision(2) << m.ci_width[q];
        }
        out << " | ";
        for (const auto& m : methods) {
            out << std::setw(w) << std::setprecision(3) << m.coverage[q];
        }
        out << '\n';
    }
    for (const auto& m : methods) {
        if (m.failed > 0) {
            out << m.method << ": " << m.failed << " failed replicates excluded\n";
        }
    }
    return out.str();
}

std::string records_csv(const StudyRecords& records)
{
    std::ostringstream out;
    out << "replicate,method,parameter,estimate,variance\n";
    for (std::size_t r = 0; r < records.replicates.size(); ++r) {
        const auto& rep = records.replicates[r];
        for (std::size_t m = 0; m < records.methods.size(); ++m) {
            const auto& mr = rep.methods[m];
            if (!mr.ok) {
                continue;
            }
            for (std::size_t q = 0; q < records.parameters.size(); ++q) {
                out << r + 1 << ',' << records.methods[m] << ',' << records.parameters[q] << ','
                    << format_double(mr.estimate[q]) << ',' << format_double(mr.variance[q]) << '\n';
            }
        }
    }
    return out.str();
}

} // namespace fracimp
