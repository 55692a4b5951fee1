#include "fracimp/pfi.hpp"

#include "fracimp/error.hpp"
#include "fracimp/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

namespace fracimp {

void PFIConfig::validate() const
{
    if (M < 1) {
        fail(ErrorCode::config, "PFI: M must be at least 1");
    }
    if (sir_pool < 1) {
        fail(ErrorCode::config, "PFI: the SIR pool B must be at least 1");
    }
    if (sir_pool < M) {
        fail(ErrorCode::config, "PFI: the SIR pool B must be at least M");
    }
    if (!(ess_warn > 0.0 && ess_warn <= 1.0)) {
        fail(ErrorCode::config, "PFI: ess_warn must lie in (0, 1]");
    }
    if (!(em_tol > 0.0)) {
        fail(ErrorCode::config, "PFI: em_tol must be positive");
    }
    if (max_em_iter < 1) {
        fail(ErrorCode::config, "PFI: max_em_iter must be at least 1");
    }
}

// ---------------------------------------------------------------------------
// ImputationSet

ImputationSet::ImputationSet(std::shared_ptr<const SurveyDataset> base, std::vector<std::size_t> offsets,
    std::vector<int> donors, std::vector<double> values, std::vector<double> log_h, std::vector<bool> imputed)
    : base_(std::move(base))
    , offsets_(std::move(offsets))
    , donors_(std::move(donors))
    , values_(std::move(values))
    , log_h_(std::move(log_h))
    , imputed_(std::move(imputed))
{
    require(base_ != nullptr, "ImputationSet needs a base data set");
    stride_ = base_->item_count();
    require(offsets_.size() == base_->size() + 1 && offsets_.back() == donors_.size()
            && values_.size() == donors_.size() * stride_ && log_h_.size() == donors_.size()
            && imputed_.size() == base_->size(),
        "ImputationSet: inconsistent arrays");
    row_unit_.resize(donors_.size());
    for (std::size_t i = 0; i + 1 < offsets_.size(); ++i) {
        std::fill(row_unit_.begin() + static_cast<std::ptrdiff_t>(offsets_[i]),
            row_unit_.begin() + static_cast<std::ptrdiff_t>(offsets_[i + 1]), i);
    }
}

std::size_t ImputationSet::imputed_count() const
{
    return static_cast<std::size_t>(std::count(imputed_.begin(), imputed_.end(), true));
}

FractionalDataset ImputationSet::to_fractional(std::vector<double> weights) const
{
    require(weights.size() == size(), "to_fractional: one weight per row required");
    return FractionalDataset(base_, row_unit_, donors_, values_, std::move(weights));
}

// ---------------------------------------------------------------------------
// I-step

ImputationSet i_step(std::shared_ptr<const SurveyDataset> data, const ProposalDistribution& h, std::size_t M,
    std::uint64_t seed, unsigned threads)
{
    require(data != nullptr, "i_step: null data set");
    require(M >= 1, "i_step: M must be at least 1");
    require(static_cast<bool>(h.sample) && static_cast<bool>(h.log_density), "i_step: proposal is incomplete");
    const auto n = data->size();
    const auto stride = data->item_count();

    std::vector<std::vector<double>> draws(n);
    std::vector<std::vector<double>> logh(n);
    std::vector<bool> imputed(n);
    for (std::size_t i = 0; i < n; ++i) {
        imputed[i] = !MissingPattern::of(data->unit(i)).complete();
    }

    parallel_for(n, threads, [&](std::size_t i) {
        const auto& unit = data->unit(i);
        auto y = data->filled_values(i);
        if (!imputed[i]) {
            draws[i] = std::move(y);
            logh[i] = { 0.0 };
            return;
        }
        const auto pattern = MissingPattern::of(unit);
        auto rng = substream(seed, Stream::imputation, i);
        std::vector<double> out;
        out.reserve(M * stride);
        try {
            h.sample(i, pattern, y, M, rng, out);
        } catch (const Error& e) {
            fail(e.code(), "imputation failed for unit '" + unit.id + "': " + e.what());
        }
        if (out.size() != M * stride) {
            fail(ErrorCode::contract, "proposal returned the wrong number of draws for unit '" + unit.id + "'");
        }
        std::vector<double> lh(M);
        for (std::size_t m = 0; m < M; ++m) {
            const std::span<const double> row(out.data() + m * stride, stride);
            for (std::size_t k = 0; k < stride; ++k) {
                if (unit.values[k] && row[k] != *unit.values[k]) {
                    fail(ErrorCode::contract, "proposal changed an observed value of unit '" + unit.id + "'");
                }
            }
            lh[m] = h.log_density(i, pattern, row);
            if (!std::isfinite(lh[m])) {
                fail(ErrorCode::underflow, "proposal log-density is not finite on its own draw for unit '" + unit.id + "'");
            }
        }
        draws[i] = std::move(out);
        logh[i] = std::move(lh);
    });

    std::vector<std::size_t> offsets(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        offsets[i + 1] = offsets[i] + logh[i].size();
    }
    std::vector<int> donors;
    std::vector<double> values;
    std::vector<double> log_h;
    donors.reserve(offsets.back());
    values.reserve(offsets.back() * stride);
    log_h.reserve(offsets.back());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < logh[i].size(); ++m) {
            donors.push_back(static_cast<int>(m));
        }
        values.insert(values.end(), draws[i].begin(), draws[i].end());
        log_h.insert(log_h.end(), logh[i].begin(), logh[i].end());
    }
    return ImputationSet(std::move(data), std::move(offsets), std::move(donors), std::move(values), std::move(log_h),
        std::move(imputed));
}

// ---------------------------------------------------------------------------
// W-step

std::vector<double> log_importance_ratios(const ImputationSet& imps, const ParametricModel& model, const Vector& theta,
    unsigned threads)
{
    std::vector<double> out(imps.size(), 0.0);
    const auto n = imps.base().size();
    parallel_for(n, threads, [&](std::size_t i) {
        if (!imps.imputed(i)) {
            return;
        }
        const auto [b, e] = imps.unit_rows(i);
        for (std::size_t r = b; r < e; ++r) {
            out[r] = model.log_density(imps.row_values(r), theta) - imps.log_h(r);
        }
    });
    return out;
}

std::vector<double> normalize_log_weights(const ImputationSet& imps, std::span<const double> log_ratio)
{
    require(log_ratio.size() == imps.size(), "normalize_log_weights: one value per row required");
    std::vector<double> w(imps.size());
    const auto n = imps.base().size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto [b, e] = imps.unit_rows(i);
        if (!imps.imputed(i)) {
            for (std::size_t r = b; r < e; ++r) {
                w[r] = 1.0;
            }
            continue;
        }
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t r = b; r < e; ++r) {
            if (std::isnan(log_ratio[r])) {
                fail(ErrorCode::underflow, "fractional weight is NaN for unit '" + imps.base().unit(i).id + "'");
            }
            top = std::max(top, log_ratio[r]);
        }
        if (!std::isfinite(top)) {
            fail(ErrorCode::underflow, "all fractional weights underflow for unit '" + imps.base().unit(i).id
                    + "'; choose a proposal closer to the model conditional");
        }
        double total = 0.0;
        for (std::size_t r = b; r < e; ++r) {
            w[r] = std::exp(log_ratio[r] - top);
            total += w[r];
        }
        for (std::size_t r = b; r < e; ++r) {
            w[r] /= total;
        }
    }
    return w;
}

std::vector<double> w_step(const ImputationSet& imps, const ParametricModel& model, const Vector& theta,
    unsigned threads)
{
    const auto lr = log_importance_ratios(imps, model, theta, threads);
    return normalize_log_weights(imps, lr);
}

// ---------------------------------------------------------------------------
// M-step

Vector m_step(const ImputationSet& imps, std::span<const double> weights, const ParametricModel& model,
    const Vector& theta_t, bool closed_form)
{
    require(weights.size() == imps.size(), "m_step: one weight per row required");
    std::vector<double> W(imps.size());
    for (std::size_t r = 0; r < W.size(); ++r) {
        W[r] = imps.base().unit(imps.row_unit(r)).weight * weights[r];
    }
    FitOptions opt;
    opt.closed_form = closed_form;
    opt.start = theta_t;
    return fit_weighted(model, imps.values(), imps.stride(), W, opt).theta;
}

Vector m_step(const FractionalDataset& fdata, const ParametricModel& model, const Vector& theta_t, bool closed_form)
{
    std::vector<double> W(fdata.size());
    for (std::size_t r = 0; r < W.size(); ++r) {
        W[r] = fdata.base().unit(fdata.row_unit(r)).weight * fdata.row_weight(r);
    }
    FitOptions opt;
    opt.closed_form = closed_form;
    opt.start = theta_t;
    return fit_weighted(model, fdata.values(), fdata.stride(), W, opt).theta;
}

// ---------------------------------------------------------------------------
// Diagnostics

WeightDiagnostics weight_diagnostics(const FractionalDataset& fdata, double ess_warn)
{
    const auto n = fdata.base().size();
    WeightDiagnostics d;
    d.ess.assign(n, 1.0);
    d.max_weight.assign(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto [b, e] = fdata.unit_rows(i);
        if (b == e) {
            d.ess[i] = 0.0;
            d.max_weight[i] = 0.0;
            continue;
        }
        double sq = 0.0;
        double top = 0.0;
        for (std::size_t r = b; r < e; ++r) {
            const double w = fdata.row_weight(r);
            sq += w * w;
            top = std::max(top, w);
        }
        d.ess[i] = 1.0 / sq;
        d.max_weight[i] = top;
        const bool imputed = !MissingPattern::of(fdata.base().unit(i)).complete();
        if (imputed && d.ess[i] < ess_warn * static_cast<double>(e - b)) {
            d.low_ess_units.push_back(i);
        }
    }
    return d;
}

namespace {

std::pair<double, double> ess_summary(const ImputationSet& imps, std::span<const double> w)
{
    std::vector<double> ess;
    for (std::size_t i = 0; i < imps.base().size(); ++i) {
        if (!imps.imputed(i)) {
            continue;
        }
        const auto [b, e] = imps.unit_rows(i);
        double sq = 0.0;
        for (std::size_t r = b; r < e; ++r) {
            sq += w[r] * w[r];
        }
        ess.push_back(1.0 / sq);
    }
    if (ess.empty()) {
        return { 1.0, 1.0 };
    }
    std::sort(ess.begin(), ess.end());
    const auto mid = ess.size() / 2;
    const double median = ess.size() % 2 == 1 ? ess[mid] : 0.5 * (ess[mid - 1] + ess[mid]);
    return { ess.front(), median };
}

} // namespace

// ---------------------------------------------------------------------------
// EM

PFIResult run_em(std::shared_ptr<const SurveyDataset> data, const ParametricModel& model, const ProposalDistribution& h,
    const Vector& theta0, const PFIConfig& config, std::uint64_t seed)
{
    config.validate();
    require(data != nullptr, "run_em: null data set");
    require(static_cast<std::size_t>(theta0.size()) == model.parameter_count(), "run_em: theta0 has wrong dimension");

    const auto modeled = model.modeled_items();
    const auto covariates = model.covariate_items();
    PFIResult result;
    for (std::size_t i = 0; i < data->size(); ++i) {
        const auto& u = data->unit(i);
        bool all_missing = true;
        for (std::size_t k = 0; k < u.values.size(); ++k) {
            if (u.values[k]) {
                continue;
            }
            if (std::find(modeled.begin(), modeled.end(), k) == modeled.end()) {
                fail(ErrorCode::contract, "unit '" + u.id + "' is missing item '" + data->items()[k].name
                        + "', which the model does not describe");
            }
        }
        for (auto k : modeled) {
            all_missing = all_missing && !u.values[k];
        }
        if (all_missing && covariates.empty()) {
            result.marginal_units.push_back(i);
        }
    }

    result.imputations = i_step(data, h, config.M, seed, config.threads);
    const auto& imps = result.imputations;
    const bool nothing_imputed = imps.imputed_count() == 0;

    Vector theta = theta0;
    std::vector<double> w;
    for (std::size_t t = 1; t <= config.max_em_iter; ++t) {
        w = w_step(imps, model, theta, config.threads);
        const Vector next = m_step(imps, w, model, theta, config.closed_form_mstep);
        const double change = (next - theta).lpNorm<Eigen::Infinity>();
        const auto [ess_min, ess_median] = ess_summary(imps, w);
        result.em_trace.push_back(EmTraceEntry { t, next, change, *std::max_element(w.begin(), w.end()), ess_min, ess_median });
        theta = next;
        if (nothing_imputed || change < config.em_tol) {
            result.converged = true;
            break;
        }
    }
    w = w_step(imps, model, theta, config.threads);
    result.theta = theta;
    result.fdata = imps.to_fractional(std::move(w));
    return result;
}

std::string em_trace_csv(const PFIResult& result, const std::vector<std::string>& parameter_names)
{
    std::ostringstream out;
    out << "iteration";
    for (const auto& n : parameter_names) {
        out << ',' << quote_csv_field(n);
    }
    out << ",change,max_weight,ess_min,ess_median\n";
    for (const auto& e : result.em_trace) {
        out << e.iteration;
        for (Eigen::Index k = 0; k < e.theta.size(); ++k) {
            out << ',' << format_double(e.theta[k]);
        }
        out << ',' << format_double(e.change) << ',' << format_double(e.max_weight) << ','
            << format_double(e.ess_min) << ',' << format_double(e.ess_median) << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Proposals

ProposalDistribution plugin_proposal(std::shared_ptr<const ParametricModel> model, Vector theta0, std::size_t B)
{
    require(model != nullptr, "plugin_proposal: null model");
    require(static_cast<std::size_t>(theta0.size()) == model->parameter_count(), "plugin_proposal: theta0 has wrong dimension");
    ProposalDistribution h;
    h.kind = ProposalDistribution::Kind::plugin_initial;
    h.sample = [model, theta0, B](std::size_t, const MissingPattern& pattern, std::span<const double> y, std::size_t M,
                   Rng& rng, std::vector<double>& out) { model->sample_conditional(pattern, y, theta0, M, B, rng, out); };
    h.log_density = [model, theta0](std::size_t, const MissingPattern& pattern, std::span<const double> y) {
        return model->log_conditional(pattern, y, theta0);
    };
    return h;
}

ProposalDistribution build_proposal_example1(const SurveyDataset& data,
    std::shared_ptr<const BivariateSequentialModel> model, Vector theta0, std::size_t B)
{
    require(model != nullptr, "build_proposal_example1: null model");
    const auto y1 = model->y1();
    const auto y2 = model->y2();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        for (std::size_t k = 0; k < u.values.size(); ++k) {
            if (!u.values[k] && k != y1 && k != y2) {
                fail(ErrorCode::contract, "unit '" + u.id + "' has a missing pattern outside the (y1, y2) cases");
            }
        }
    }
    auto h = plugin_proposal(model, std::move(theta0), B);
    h.kind = ProposalDistribution::Kind::unnormalized_product;
    return h;
}

std::vector<double> sir_sample(const BivariateSequentialModel& model, std::span<const double> y, const Vector& theta,
    std::size_t B, std::size_t M, std::uint64_t seed)
{
    require(B >= 1, "sir_sample: B must be at least 1");
    std::vector<bool> mask(model.item_count(), true);
    mask[model.y1()] = false;
    const MissingPattern pattern(mask);
    auto rng = substream(seed, Stream::sir, 0);
    std::vector<double> out;
    out.reserve(M * model.item_count());
    model.sample_conditional(pattern, y, theta, M, B, rng, out);
    std::vector<double> draws(M);
    for (std::size_t m = 0; m < M; ++m) {
        draws[m] = out[m * model.item_count() + model.y1()];
    }
    return draws;
}

ProposalDistribution prior_mixture_proposal(std::shared_ptr<const ParametricModel> model, std::vector<Vector> prior_draws)
{
    require(model != nullptr, "prior_mixture_proposal: null model");
    require(!prior_draws.empty(), "prior_mixture_proposal: at least one prior draw is needed");
    for (const auto& t : prior_draws) {
        require(static_cast<std::size_t>(t.size()) == model->parameter_count(),
            "prior_mixture_proposal: prior draw has wrong dimension");
    }
    auto draws = std::make_shared<const std::vector<Vector>>(std::move(prior_draws));
    ProposalDistribution h;
    h.kind = ProposalDistribution::Kind::prior_mixture;
    h.sample = [model, draws](std::size_t, const MissingPattern& pattern, std::span<const double> y, std::size_t M,
                   Rng& rng, std::vector<double>& out) {
        if (!model->conditional_is_exact(pattern)) {
            fail(ErrorCode::contract, "prior-mixture proposal needs an exact conditional for every pattern");
        }
        std::uniform_int_distribution<std::size_t> pick(0, draws->size() - 1);
        for (std::size_t m = 0; m < M; ++m) {
            model->sample_conditional(pattern, y, (*draws)[pick(rng)], 1, 1, rng, out);
        }
    };
    h.log_density = [model, draws](std::size_t, const MissingPattern& pattern, std::span<const double> y) {
        double top = -std::numeric_limits<double>::infinity();
        std::vector<double> l(draws->size());
        for (std::size_t k = 0; k < draws->size(); ++k) {
            l[k] = model->log_conditional(pattern, y, (*draws)[k]);
            top = std::max(top, l[k]);
        }
        if (!std::isfinite(top)) {
            return top;
        }
        double s = 0.0;
        for (double v : l) {
            s += std::exp(v - top);
        }
        return top + std::log(s / static_cast<double>(draws->size()));
    };
    return h;
}

namespace {

struct ScalarTarget {
    std::size_t item;
    double mu;
    double sigma;
};

ScalarTarget scalar_target(const SequentialModel& model, const MissingPattern& pattern, std::span<const double> y,
    const Vector& theta)
{
    const auto plan = model.plan(pattern);
    if (plan.draw.size() != 1 || !plan.tilt.empty()) {
        fail(ErrorCode::contract, "optimal proposal supports exactly one missing item with a sequential conditional");
    }
    const auto c = plan.draw.front();
    const auto& comp = model.component(c);
    const auto moments = comp.normal_moments(y, theta.data() + model.offset(c));
    if (!moments) {
        fail(ErrorCode::contract, "optimal proposal needs a conditionally normal missing item");
    }
    return ScalarTarget { comp.response(), moments->first, moments->second };
}

} // namespace

ProposalDistribution optimal_proposal_scalar_mean(std::shared_ptr<const SequentialModel> model, Vector theta)
{
    require(model != nullptr, "optimal_proposal_scalar_mean: null model");
    ProposalDistribution h;
    h.kind = ProposalDistribution::Kind::optimal_scalar_mean;
    // h*/g <= sqrt(2 pi) exp(-1/2) for g = N(mu, 2 sigma^2); accept with
    // probability |z| exp(-z^2 / 4) / (sqrt(2) exp(-1/2)).
    h.sample = [model, theta](std::size_t, const MissingPattern& pattern, std::span<const double> y, std::size_t M,
                   Rng& rng, std::vector<double>& out) {
        const auto t = scalar_target(*model, pattern, y, theta);
        if (!(t.sigma > 0.0) || !std::isfinite(t.sigma)) {
            fail(ErrorCode::contract, "optimal proposal: conditional standard deviation must be positive");
        }
        const double bound = std::numbers::sqrt2 * std::exp(-0.5);
        std::vector<double> row(y.begin(), y.end());
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t attempt = 0;; ++attempt) {
                if (attempt > 100000) {
                    fail(ErrorCode::non_convergence, "optimal proposal: rejection sampler did not accept");
                }
                const double z = std::numbers::sqrt2 * standard_normal(rng);
                if (uniform01(rng) * bound < std::abs(z) * std::exp(-0.25 * z * z)) {
                    row[t.item] = t.mu + t.sigma * z;
                    break;
                }
            }
            out.insert(out.end(), row.begin(), row.end());
        }
    };
    h.log_density = [model, theta](std::size_t, const MissingPattern& pattern, std::span<const double> y) {
        const auto t = scalar_target(*model, pattern, y, theta);
        const double z = (y[t.item] - t.mu) / t.sigma;
        // Normalizer E|Z| = sqrt(2 / pi).
        return -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * z * z + std::log(std::abs(z)) - std::log(t.sigma)
            - 0.5 * std::log(2.0 / std::numbers::pi);
    };
    return h;
}

} // namespace fracimp
