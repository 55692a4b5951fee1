#include "fracimp/calib.hpp"

#include "fracimp/error.hpp"
#include "fracimp/rng.hpp"
#include "fracimp/sampling.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace fracimp {

SubsampleResult pps_subsample(const FractionalDataset& fdata, std::size_t m, std::uint64_t seed)
{
    require(m >= 1, "pps_subsample: m must be at least 1");
    const auto& base = fdata.base();
    FractionalBuilder builder(fdata.base_ptr());
    SubsampleResult res;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const auto [b, e] = fdata.unit_rows(i);
        if (b == e) {
            builder.mark_unimputed(i);
            continue;
        }
        if (e - b == 1) {
            builder.add(i, fdata.donors()[b], fdata.row_values(b), 1.0);
            continue;
        }
        std::vector<double> sizes(fdata.weights().begin() + static_cast<std::ptrdiff_t>(b),
            fdata.weights().begin() + static_cast<std::ptrdiff_t>(e));
        std::size_t positive = 0;
        for (double s : sizes) {
            require(s >= 0.0, "pps_subsample: fractional weights must be nonnegative");
            positive += s > 0.0 ? 1 : 0;
        }
        if (positive <= m) {
            if (positive < m) {
                std::ostringstream msg;
                msg << "unit '" << base.unit(i).id << "' has " << positive << " donors with positive weight, fewer than m = "
                    << m << "; all are kept";
                res.warnings.push_back(msg.str());
            }
            for (std::size_t r = b; r < e; ++r) {
                if (sizes[r - b] > 0.0) {
                    builder.add(i, fdata.donors()[r], fdata.row_values(r), 1.0 / static_cast<double>(positive));
                }
            }
            continue;
        }
        auto rng = substream(seed, Stream::pps, i);
        const auto counts = systematic_counts(sizes, m, rng);
        for (std::size_t r = b; r < e; ++r) {
            if (counts[r - b] > 0) {
                builder.add(i, fdata.donors()[r], fdata.row_values(r),
                    static_cast<double>(counts[r - b]) / static_cast<double>(m));
            }
        }
    }
    res.fdata = std::move(builder).build();
    return res;
}

Controls score_controls(std::shared_ptr<const ParametricModel> model, Vector theta)
{
    require(model != nullptr, "score_controls: null model");
    Controls c;
    c.dimension = model->parameter_count();
    c.evaluate = [model, theta = std::move(theta)](std::span<const double> row, Eigen::Ref<Vector> out) {
        model->score(row, theta, out);
    };
    return c;
}

namespace {

Matrix control_matrix(const FractionalDataset& fdata, const Controls& controls)
{
    require(controls.dimension > 0 && controls.evaluate, "calibration: empty controls");
    Matrix S(static_cast<Eigen::Index>(controls.dimension), static_cast<Eigen::Index>(fdata.size()));
    for (std::size_t r = 0; r < fdata.size(); ++r) {
        Vector col(static_cast<Eigen::Index>(controls.dimension));
        controls.evaluate(fdata.row_values(r), col);
        if (!col.allFinite()) {
            fail(ErrorCode::validation, "calibration: control value is not finite");
        }
        S.col(static_cast<Eigen::Index>(r)) = col;
    }
    return S;
}

Vector weighted_total(const FractionalDataset& fdata, const Matrix& S, const std::vector<double>& w)
{
    Vector t = Vector::Zero(S.rows());
    for (std::size_t r = 0; r < fdata.size(); ++r) {
        t += fdata.base().unit(fdata.row_unit(r)).weight * w[r] * S.col(static_cast<Eigen::Index>(r));
    }
    return t;
}

// sum_i w_i sum_j p_ij (S_ij - S_bar_i)(S_ij - S_bar_i)'
Matrix centered_moment(const FractionalDataset& fdata, const Matrix& S, const std::vector<double>& p)
{
    const auto d = S.rows();
    Matrix Q = Matrix::Zero(d, d);
    for (std::size_t i = 0; i < fdata.base().size(); ++i) {
        const auto [b, e] = fdata.unit_rows(i);
        if (e - b < 2) {
            continue;
        }
        Vector mean = Vector::Zero(d);
        for (std::size_t r = b; r < e; ++r) {
            mean += p[r] * S.col(static_cast<Eigen::Index>(r));
        }
        const double wi = fdata.base().unit(i).weight;
        for (std::size_t r = b; r < e; ++r) {
            const Vector c = S.col(static_cast<Eigen::Index>(r)) - mean;
            Q.noalias() += wi * p[r] * c * c.transpose();
        }
    }
    return Q;
}

void require_invertible(const Matrix& Q)
{
    Eigen::SelfAdjointEigenSolver<Matrix> es(Q);
    const double top = es.eigenvalues().cwiseAbs().maxCoeff();
    if (!(es.eigenvalues().minCoeff() > 1e-12 * std::max(top, 1e-300))) {
        fail(ErrorCode::singular, "calibration: the control moment matrix is singular; drop redundant constraints");
    }
}

} // namespace

Vector calibration_total(const FractionalDataset& fdata, const Controls& controls)
{
    return weighted_total(fdata, control_matrix(fdata, controls), fdata.weights());
}

CalibrationResult regression_reweight(const FractionalDataset& reduced, const Controls& controls)
{
    const Matrix S = control_matrix(reduced, controls);
    const auto& w0 = reduced.weights();
    const Vector T = weighted_total(reduced, S, w0);
    const Matrix Q = centered_moment(reduced, S, w0);
    CalibrationResult res;
    if (T.lpNorm<Eigen::Infinity>() == 0.0) {
        res.delta = Vector::Zero(S.rows());
        res.fdata = reduced;
        return res;
    }
    require_invertible(Q);
    // Delta as a row vector: -T' Q^{-1}.
    res.delta = -Q.ldlt().solve(T);
    std::vector<double> w(reduced.size());
    for (std::size_t i = 0; i < reduced.base().size(); ++i) {
        const auto [b, e] = reduced.unit_rows(i);
        Vector mean = Vector::Zero(S.rows());
        for (std::size_t r = b; r < e; ++r) {
            mean += w0[r] * S.col(static_cast<Eigen::Index>(r));
        }
        for (std::size_t r = b; r < e; ++r) {
            w[r] = w0[r] + w0[r] * res.delta.dot(S.col(static_cast<Eigen::Index>(r)) - mean);
        }
    }
    res.fdata = reduced.with_weights(w, WeightSign::any);
    res.has_negative = res.fdata.has_negative_weights();
    res.residual = weighted_total(res.fdata, S, w).lpNorm<Eigen::Infinity>();
    return res;
}

CalibrationResult exponential_reweight(const FractionalDataset& reduced, const Controls& controls,
    const ExponentialOptions& options)
{
    const Matrix S = control_matrix(reduced, controls);
    const auto& w0 = reduced.weights();
    const auto n = reduced.base().size();
    double total_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total_w += reduced.base().unit(i).weight;
    }

    // Dual objective sum_i w_i log sum_j w0_ij exp(Delta S_ij) and the
    // implied weights.
    const auto evaluate = [&](const Vector& delta, std::vector<double>& p) {
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto [b, e] = reduced.unit_rows(i);
            if (b == e) {
                continue;
            }
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t r = b; r < e; ++r) {
                p[r] = w0[r] > 0.0 ? std::log(w0[r]) + delta.dot(S.col(static_cast<Eigen::Index>(r)))
                                   : -std::numeric_limits<double>::infinity();
                top = std::max(top, p[r]);
            }
            double s = 0.0;
            for (std::size_t r = b; r < e; ++r) {
                p[r] = std::exp(p[r] - top);
                s += p[r];
            }
            for (std::size_t r = b; r < e; ++r) {
                p[r] /= s;
            }
            obj += reduced.base().unit(i).weight * (top + std::log(s));
        }
        return obj;
    };

    CalibrationResult res;
    Vector delta = Vector::Zero(S.rows());
    std::vector<double> p(reduced.size());
    double obj = evaluate(delta, p);
    Vector g = weighted_total(reduced, S, p);
    for (std::size_t it = 0;; ++it) {
        res.iterations = it;
        if (g.lpNorm<Eigen::Infinity>() <= options.tol * total_w) {
            break;
        }
        if (it == options.max_iter) {
            std::ostringstream msg;
            msg << "exponential_reweight: no convergence in " << options.max_iter
                << " iterations; control residual " << g.lpNorm<Eigen::Infinity>();
            fail(ErrorCode::non_convergence, msg.str());
        }
        const Matrix H = centered_moment(reduced, S, p);
        if (it > 0) {
            try {
                require_invertible(H);
            } catch (const Error&) {
                std::ostringstream msg;
                msg << "exponential_reweight: weights degenerated after " << it
                    << " iterations (target outside the attainable range?); control residual " << g.lpNorm<Eigen::Infinity>();
                fail(ErrorCode::non_convergence, msg.str());
            }
        }
        require_invertible(H);
        const Vector step = H.ldlt().solve(g);
        double t = 1.0;
        std::vector<double> trial(p.size());
        for (int halving = 0;; ++halving) {
            const Vector next = delta - t * step;
            const double next_obj = evaluate(next, trial);
            Vector next_g = weighted_total(reduced, S, trial);
            // Near the optimum the objective change drops below round-off, so
            // a smaller gradient also accepts the step.
            const bool armijo = next_obj <= obj + 1e-4 * t * g.dot(-step);
            const bool smaller = std::isfinite(next_obj) && next_g.lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>();
            if (armijo || smaller || halving == 50) {
                delta = next;
                obj = next_obj;
                p.swap(trial);
                g = std::move(next_g);
                break;
            }
            t *= 0.5;
        }
    }
    res.delta = delta;
    res.fdata = reduced.with_weights(p);
    res.residual = g.lpNorm<Eigen::Infinity>();
    return res;
}

// ---------------------------------------------------------------------------
// Two-phase sampling

TwoPhaseSample make_two_phase(const SurveyDataset& phase1, const SurveyDataset& phase2,
    const std::vector<std::string>& x_names, const std::string& y_name, bool nested)
{
    require(!x_names.empty(), "make_two_phase: no covariates");
    std::vector<Item> items;
    std::vector<std::size_t> idx1;
    std::vector<std::size_t> idx2;
    for (const auto& name : x_names) {
        idx1.push_back(phase1.item_index(name));
        idx2.push_back(phase2.item_index(name));
        items.push_back(phase2.items()[idx2.back()]);
    }
    const auto y2 = phase2.item_index(y_name);
    items.push_back(phase2.items()[y2]);

    std::vector<UnitRecord> u1;
    for (const auto& u : phase1.units()) {
        UnitRecord r { u.id, u.weight, {} };
        for (auto k : idx1) {
            if (!u.values[k]) {
                fail(ErrorCode::validation, "two-phase: phase-1 unit '" + u.id + "' is missing a covariate");
            }
            r.values.push_back(u.values[k]);
        }
        r.values.emplace_back();
        u1.push_back(std::move(r));
    }
    std::vector<UnitRecord> u2;
    for (const auto& u : phase2.units()) {
        UnitRecord r { u.id, u.weight, {} };
        for (auto k : idx2) {
            r.values.push_back(u.values[k]);
        }
        r.values.push_back(u.values[y2]);
        for (const auto& v : r.values) {
            if (!v) {
                fail(ErrorCode::validation, "two-phase: phase-2 unit '" + u.id + "' has a missing value");
            }
        }
        u2.push_back(std::move(r));
    }
    if (u2.empty()) {
        fail(ErrorCode::validation, "two-phase: the phase-2 sample is empty");
    }

    TwoPhaseSample tp;
    tp.phase1 = std::make_shared<const SurveyDataset>(items, std::move(u1));
    tp.phase2 = std::make_shared<const SurveyDataset>(items, std::move(u2));
    for (std::size_t k = 0; k < x_names.size(); ++k) {
        tp.x_items.push_back(k);
    }
    tp.y_item = x_names.size();
    tp.nested = nested;
    const double t1 = tp.phase1->total_weight();
    const double t2 = tp.phase2->total_weight();
    if (std::abs(t1 - t2) > 1e-8 * std::max(t1, t2)) {
        std::ostringstream msg;
        msg << "phase weight totals differ (" << format_double(t1) << " vs " << format_double(t2) << ")";
        tp.warnings.push_back(msg.str());
    }
    return tp;
}

namespace {

struct TwoPhaseParts {
    OutcomeFit model;
    std::vector<double> fitted1;
    std::vector<double> resid2;
    std::vector<double> share2;
    double regression_total = 0.0;
};

TwoPhaseParts two_phase_parts(const TwoPhaseSample& tp)
{
    require(tp.phase1 != nullptr && tp.phase2 != nullptr, "two-phase: incomplete sample");
    TwoPhaseParts parts;
    parts.model = fit_outcome_regression(*tp.phase2, tp.y_item, tp.x_items);
    for (std::size_t i = 0; i < tp.phase1->size(); ++i) {
        parts.fitted1.push_back(parts.model.predict(tp.phase1->filled_values(i)));
        parts.regression_total += tp.phase1->unit(i).weight * parts.fitted1.back();
    }
    const double t2 = tp.phase2->total_weight();
    for (std::size_t j = 0; j < tp.phase2->size(); ++j) {
        const auto y = tp.phase2->filled_values(j);
        parts.resid2.push_back(y[tp.y_item] - parts.model.predict(y));
        parts.share2.push_back(tp.phase2->unit(j).weight / t2);
        parts.regression_total += tp.phase2->unit(j).weight * parts.resid2.back();
    }
    return parts;
}

} // namespace

TwoPhaseResult two_phase_fefi(const TwoPhaseSample& tp)
{
    auto parts = two_phase_parts(tp);
    TwoPhaseResult res;
    res.warnings = tp.warnings;
    FractionalBuilder builder(tp.phase1);
    builder.reserve(tp.phase1->size() * tp.phase2->size());
    for (std::size_t i = 0; i < tp.phase1->size(); ++i) {
        auto row = tp.phase1->filled_values(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < parts.resid2.size(); ++j) {
            row[tp.y_item] = parts.fitted1[i] + parts.resid2[j];
            builder.add(i, static_cast<int>(j), row, parts.share2[j]);
            mean += parts.share2[j] * row[tp.y_item];
        }
        res.total += tp.phase1->unit(i).weight * mean;
    }
    res.fdata = std::move(builder).build();
    res.model = std::move(parts.model);
    res.regression_total = parts.regression_total;
    return res;
}

TwoPhaseResult two_phase_reduced(const TwoPhaseSample& tp, std::size_t m, std::uint64_t seed)
{
    require(m >= 1, "two_phase_reduced: m must be at least 1");
    require(tp.phase2 != nullptr, "two_phase_reduced: incomplete sample");
    const auto n2 = tp.phase2->size();
    if (m >= n2) {
        return two_phase_fefi(tp);
    }
    constexpr std::size_t kAttempts = 10;
    auto parts = two_phase_parts(tp);
    double mean_resid = 0.0;
    for (std::size_t j = 0; j < n2; ++j) {
        mean_resid += parts.share2[j] * parts.resid2[j];
    }

    TwoPhaseResult res;
    res.warnings = tp.warnings;
    FractionalBuilder builder(tp.phase1);
    builder.reserve(tp.phase1->size() * m);
    for (std::size_t i = 0; i < tp.phase1->size(); ++i) {
        const double target = parts.fitted1[i] + mean_resid;
        std::vector<std::size_t> chosen;
        std::vector<double> weight;
        bool done = false;
        for (std::size_t a = 0; a < kAttempts && !done; ++a) {
            auto rng = substream(derive_seed(seed, Stream::reselect, a), Stream::pps, i);
            const auto counts = systematic_counts(parts.share2, m, rng);
            chosen.clear();
            weight.clear();
            double mean0 = 0.0;
            for (std::size_t j = 0; j < n2; ++j) {
                if (counts[j] > 0) {
                    chosen.push_back(j);
                    weight.push_back(static_cast<double>(counts[j]) / static_cast<double>(m));
                    mean0 += weight.back() * (parts.fitted1[i] + parts.resid2[j]);
                }
            }
            double var0 = 0.0;
            for (std::size_t c = 0; c < chosen.size(); ++c) {
                const double d = parts.fitted1[i] + parts.resid2[chosen[c]] - mean0;
                var0 += weight[c] * d * d;
            }
            const double gap = target - mean0;
            double spread = 0.0;
            for (auto j : chosen) {
                spread = std::max(spread, std::abs(parts.fitted1[i] + parts.resid2[j] - mean0));
            }
            // Near-identical donors would need unbounded weights; reselect.
            if (var0 > 1e-14 * (1.0 + target * target) && std::abs(gap) * spread <= 1e6 * var0) {
                const std::vector<double> base = weight;
                // The second pass removes round-off left by the first.
                for (int pass = 0; pass < 2; ++pass) {
                    double sum = 0.0;
                    double mu = 0.0;
                    for (std::size_t c = 0; c < chosen.size(); ++c) {
                        sum += weight[c];
                        mu += weight[c] * (parts.fitted1[i] + parts.resid2[chosen[c]]);
                    }
                    const double a = 1.0 - sum;
                    const double b = (target - mu - a * mean0) / var0;
                    for (std::size_t c = 0; c < chosen.size(); ++c) {
                        weight[c] += base[c] * (a + b * (parts.fitted1[i] + parts.resid2[chosen[c]] - mean0));
                    }
                }
                done = true;
            } else if (std::abs(gap) <= 1e-12 * (1.0 + std::abs(target))) {
                done = true;
            }
        }
        if (!done) {
            fail(ErrorCode::infeasible, "two_phase_reduced: calibration infeasible for unit '" + tp.phase1->unit(i).id
                    + "' after " + std::to_string(kAttempts) + " donor selections");
        }
        auto row = tp.phase1->filled_values(i);
        double mean = 0.0;
        for (std::size_t c = 0; c < chosen.size(); ++c) {
            row[tp.y_item] = parts.fitted1[i] + parts.resid2[chosen[c]];
            builder.add(i, static_cast<int>(chosen[c]), row, weight[c]);
            mean += weight[c] * row[tp.y_item];
        }
        res.total += tp.phase1->unit(i).weight * mean;
    }
    res.fdata = std::move(builder).build(WeightSign::any);
    res.model = std::move(parts.model);
    res.regression_total = parts.regression_total;
    return res;
}

} // namespace fracimp
