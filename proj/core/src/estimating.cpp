#include "fracimp/estimating.hpp"

#include "fracimp/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fracimp {

EstimatingFunction EstimatingFunction::mean(std::size_t item)
{
    EstimatingFunction U;
    U.kind_ = Kind::mean;
    U.items_ = { item };
    return U;
}

EstimatingFunction EstimatingFunction::proportion_below(std::size_t item, double c)
{
    require(std::isfinite(c), "proportion_below: threshold must be finite");
    EstimatingFunction U;
    U.kind_ = Kind::proportion_below;
    U.items_ = { item };
    U.parameter_ = c;
    return U;
}

EstimatingFunction EstimatingFunction::median(std::size_t item)
{
    return quantile(item, 0.5);
}

EstimatingFunction EstimatingFunction::quantile(std::size_t item, double p)
{
    require(p > 0.0 && p < 1.0, "quantile: p must lie in (0, 1)");
    EstimatingFunction U;
    U.kind_ = Kind::quantile;
    U.smoothness_ = Smoothness::step;
    U.items_ = { item };
    U.parameter_ = p;
    return U;
}

EstimatingFunction EstimatingFunction::custom(std::size_t arity, Smoothness smoothness, std::vector<std::size_t> items,
    Evaluator evaluator)
{
    require(arity >= 1, "custom estimating function needs arity >= 1");
    require(static_cast<bool>(evaluator), "custom estimating function needs an evaluator");
    require(smoothness == Smoothness::smooth || (arity == 1 && !items.empty()),
        "step estimating functions must be scalar and name the item they threshold");
    EstimatingFunction U;
    U.kind_ = Kind::custom;
    U.arity_ = arity;
    U.smoothness_ = smoothness;
    U.items_ = std::move(items);
    U.evaluator_ = std::move(evaluator);
    return U;
}

void EstimatingFunction::evaluate(std::span<const double> eta, std::span<const double> y, std::span<double> out) const
{
    switch (kind_) {
    case Kind::mean:
        out[0] = eta[0] - y[items_[0]];
        return;
    case Kind::proportion_below:
        out[0] = eta[0] - (y[items_[0]] < parameter_ ? 1.0 : 0.0);
        return;
    case Kind::quantile:
        out[0] = parameter_ - (y[items_[0]] < eta[0] ? 1.0 : 0.0);
        return;
    case Kind::custom:
        evaluator_(eta, y, out);
        return;
    }
}

double EstimatingFunction::evaluate(double eta, std::span<const double> y) const
{
    double out = 0.0;
    evaluate(std::span<const double>(&eta, 1), y, std::span<double>(&out, 1));
    return out;
}

double weighted_quantile(std::span<const double> y, std::span<const double> w, double p)
{
    require(y.size() == w.size(), "weighted_quantile: size mismatch");
    std::vector<std::size_t> order;
    order.reserve(y.size());
    double total = 0.0;
    for (std::size_t r = 0; r < y.size(); ++r) {
        if (w[r] != 0.0) {
            order.push_back(r);
            total += w[r];
        }
    }
    if (order.empty() || !(total > 0.0)) {
        fail(ErrorCode::no_solution, "weighted_quantile: no positive weight");
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
    const double target = p * total;
    double cumulative = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        cumulative += w[order[k]];
        // Ties share one jump of the step function.
        if (k + 1 < order.size() && y[order[k + 1]] == y[order[k]]) {
            continue;
        }
        if (cumulative >= target - 1e-12 * total) {
            return y[order[k]];
        }
    }
    return y[order.back()];
}

namespace {

struct RowView {
    std::span<const double> values;
    std::size_t stride;
    std::span<const double> weights;

    [[nodiscard]] std::span<const double> row(std::size_t r) const { return values.subspan(r * stride, stride); }
};

double total_of(std::span<const double> w)
{
    double s = 0.0;
    for (double x : w) {
        s += x;
    }
    return s;
}

double scalar_sum(const RowView& v, const EstimatingFunction& U, double eta)
{
    double s = 0.0;
    for (std::size_t r = 0; r < v.weights.size(); ++r) {
        if (v.weights[r] != 0.0) {
            s += v.weights[r] * U.evaluate(eta, v.row(r));
        }
    }
    return s;
}

EEEstimate solve_linear_builtin(const RowView& v, const EstimatingFunction& U, double total)
{
    const auto item = U.item();
    double s = 0.0;
    for (std::size_t r = 0; r < v.weights.size(); ++r) {
        const double w = v.weights[r];
        if (w == 0.0) {
            continue;
        }
        const double y = v.values[r * v.stride + item];
        s += w * (U.kind() == EstimatingFunction::Kind::mean ? y : (y < U.parameter() ? 1.0 : 0.0));
    }
    EEEstimate est;
    est.eta_hat = { s / total };
    est.residual_norm = std::abs(scalar_sum(v, U, est.eta_hat[0]));
    est.iterations = 1;
    return est;
}

EEEstimate solve_step_scalar(const RowView& v, const EstimatingFunction& U)
{
    const auto item = U.item();
    std::vector<double> cand;
    for (std::size_t r = 0; r < v.weights.size(); ++r) {
        if (v.weights[r] != 0.0) {
            cand.push_back(v.values[r * v.stride + item]);
        }
    }
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    if (cand.empty()) {
        fail(ErrorCode::no_solution, "step estimating equation: no rows with positive weight");
    }

    const auto above = [](double x) { return std::nextafter(x, std::numeric_limits<double>::infinity()); };
    const double g_low = scalar_sum(v, U, cand.front());
    const auto sign_of = [](double g) { return (g > 0.0) - (g < 0.0); };
    const int s0 = sign_of(g_low);
    if (s0 == 0) {
        return EEEstimate { { cand.front() }, 0.0, 1 };
    }
    const auto crossed = [&](std::size_t k) { return sign_of(scalar_sum(v, U, above(cand[k]))) != s0; };
    if (!crossed(cand.size() - 1)) {
        fail(ErrorCode::no_solution, "step estimating equation does not change sign over the data range");
    }
    std::size_t lo = 0;
    std::size_t hi = cand.size() - 1;
    std::size_t evaluations = 2;
    while (lo < hi) {
        const auto mid = lo + (hi - lo) / 2;
        ++evaluations;
        if (crossed(mid)) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    const double at = std::abs(scalar_sum(v, U, cand[lo]));
    const double after = std::abs(scalar_sum(v, U, above(cand[lo])));
    return EEEstimate { { cand[lo] }, std::min(at, after), evaluations };
}

EEEstimate solve_smooth_scalar(const RowView& v, const EstimatingFunction& U, double total, const SolverOptions& opt)
{
    const double tol = opt.tolerance * total;
    const auto G = [&](double eta) { return scalar_sum(v, U, eta); };

    double x0 = opt.start ? opt.start->at(0) : 0.0;
    double g0 = G(x0);
    std::size_t evaluations = 1;
    if (std::abs(g0) <= tol) {
        return EEEstimate { { x0 }, std::abs(g0), evaluations };
    }

    // Newton from the start value; most smooth U are near-linear.
    double x = x0;
    double g = g0;
    for (int it = 0; it < 8; ++it) {
        const double h = 1e-6 * std::max(1.0, std::abs(x));
        const double slope = (G(x + h) - g) / h;
        evaluations += 2;
        if (!(std::abs(slope) > 0.0) || !std::isfinite(slope)) {
            break;
        }
        const double xn = x - g / slope;
        const double gn = G(xn);
        if (!std::isfinite(gn) || std::abs(gn) >= std::abs(g)) {
            break;
        }
        x = xn;
        g = gn;
        if (std::abs(g) <= tol) {
            return EEEstimate { { x }, std::abs(g), evaluations };
        }
    }

    // Bracket by doubling around the best point so far.
    double a = x;
    double ga = g;
    double step = std::max(1.0, std::abs(x));
    double b = a;
    double gb = ga;
    bool bracketed = false;
    for (std::size_t d = 0; d < opt.max_doublings && !bracketed; ++d) {
        for (double dir : { 1.0, -1.0 }) {
            const double c = a + dir * step;
            const double gc = G(c);
            ++evaluations;
            if (std::isfinite(gc) && (gc == 0.0 || (gc > 0.0) != (ga > 0.0))) {
                b = c;
                gb = gc;
                bracketed = true;
                break;
            }
        }
        step *= 2.0;
    }
    if (!bracketed) {
        fail(ErrorCode::no_solution, "estimating equation: no sign change found in the search bracket");
    }
    if (gb == 0.0) {
        return EEEstimate { { b }, 0.0, evaluations };
    }

    // Safeguarded Newton (secant slope) with bisection fallback.
    double xm = b;
    double gm = gb;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        double next = (ga * b - gb * a) / (ga - gb);
        if (!(next > std::min(a, b) && next < std::max(a, b))) {
            next = 0.5 * (a + b);
        }
        const double gn = G(next);
        ++evaluations;
        xm = next;
        gm = gn;
        if (std::abs(gn) <= tol || std::abs(b - a) <= 1e-15 * std::max(1.0, std::abs(next))) {
            break;
        }
        if ((gn > 0.0) == (ga > 0.0)) {
            // Illinois modification keeps the retained end from stalling.
            gb *= 0.5;
            a = next;
            ga = gn;
        } else {
            b = a;
            gb = ga;
            a = next;
            ga = gn;
        }
    }
    return EEEstimate { { xm }, std::abs(gm), evaluations };
}

EEEstimate solve_smooth_vector(const RowView& v, const EstimatingFunction& U, double total, const SolverOptions& opt)
{
    const auto p = U.arity();
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (opt.start) {
        require(opt.start->size() == p, "solver start has wrong dimension");
        eta = Eigen::Map<const Eigen::VectorXd>(opt.start->data(), static_cast<Eigen::Index>(p));
    }
    std::vector<double> buf(p);
    const auto G = [&](const Eigen::VectorXd& e) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
        for (std::size_t r = 0; r < v.weights.size(); ++r) {
            if (v.weights[r] == 0.0) {
                continue;
            }
            U.evaluate(std::span<const double>(e.data(), p), v.row(r), buf);
            for (std::size_t c = 0; c < p; ++c) {
                s[static_cast<Eigen::Index>(c)] += v.weights[r] * buf[c];
            }
        }
        return s;
    };
    const double tol = opt.tolerance * total;
    Eigen::VectorXd g = G(eta);
    std::size_t it = 0;
    for (; it < opt.max_iterations && g.lpNorm<Eigen::Infinity>() > tol; ++it) {
        Eigen::MatrixXd J(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
        for (Eigen::Index c = 0; c < J.cols(); ++c) {
            Eigen::VectorXd e = eta;
            const double h = 1e-6 * std::max(1.0, std::abs(eta[c]));
            e[c] += h;
            J.col(c) = (G(e) - g) / h;
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
        if (!lu.isInvertible()) {
            fail(ErrorCode::singular, "estimating equation Jacobian is singular");
        }
        const Eigen::VectorXd step = lu.solve(g);
        double lambda = 1.0;
        bool improved = false;
        for (int halving = 0; halving < 40; ++halving) {
            const Eigen::VectorXd trial = eta - lambda * step;
            const Eigen::VectorXd gt = G(trial);
            if (gt.allFinite() && gt.lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>()) {
                eta = trial;
                g = gt;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!improved) {
            break;
        }
    }
    if (g.lpNorm<Eigen::Infinity>() > tol) {
        fail(ErrorCode::non_convergence, "estimating equation: damped Newton did not converge");
    }
    return EEEstimate { std::vector<double>(eta.data(), eta.data() + p), g.lpNorm<Eigen::Infinity>(), it };
}

} // namespace

EEEstimate solve_weighted(std::span<const double> values, std::size_t stride, std::span<const double> weights,
    const EstimatingFunction& U, const SolverOptions& options)
{
    require(stride > 0 && values.size() == weights.size() * stride, "solve_weighted: values/weights shape mismatch");
    for (auto item : U.items()) {
        require(item < stride, "estimating function refers to an item outside the row");
    }
    const RowView v { values, stride, weights };
    const double total = total_of(weights);
    if (!(total > 0.0)) {
        fail(ErrorCode::no_solution, "estimating equation: total weight is not positive");
    }
    switch (U.kind()) {
    case EstimatingFunction::Kind::mean:
    case EstimatingFunction::Kind::proportion_below:
        return solve_linear_builtin(v, U, total);
    case EstimatingFunction::Kind::quantile: {
        std::vector<double> y(weights.size());
        for (std::size_t r = 0; r < y.size(); ++r) {
            y[r] = values[r * stride + U.item()];
        }
        const double eta = weighted_quantile(y, weights, U.parameter());
        const double at = std::abs(scalar_sum(v, U, eta));
        const double after = std::abs(scalar_sum(v, U, std::nextafter(eta, std::numeric_limits<double>::infinity())));
        return EEEstimate { { eta }, std::min(at, after), 1 };
    }
    case EstimatingFunction::Kind::custom:
        break;
    }
    if (U.smoothness() == Smoothness::step) {
        return solve_step_scalar(v, U);
    }
    if (U.arity() == 1) {
        return solve_smooth_scalar(v, U, total, options);
    }
    return solve_smooth_vector(v, U, total, options);
}

EEEstimate solve_complete(const SurveyDataset& data, const EstimatingFunction& U,
    std::optional<std::span<const double>> unit_weights, const SolverOptions& options)
{
    const auto stride = data.item_count();
    std::vector<double> values;
    values.reserve(data.size() * stride);
    std::vector<double> weights(data.size());
    if (unit_weights) {
        require(unit_weights->size() == data.size(), "solve_complete: one weight per unit required");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& u = data.unit(i);
        weights[i] = unit_weights ? (*unit_weights)[i] : u.weight;
        for (auto item : U.items()) {
            if (weights[i] != 0.0 && !u.values.at(item)) {
                fail(ErrorCode::contract, "solve_complete: unit '" + u.id + "' is missing item '"
                        + data.items()[item].name + "'");
            }
        }
        const auto y = data.filled_values(i);
        values.insert(values.end(), y.begin(), y.end());
    }
    return solve_weighted(values, stride, weights, U, options);
}

std::vector<double> row_weights(const FractionalDataset& fdata, std::optional<std::span<const double>> unit_weights,
    std::optional<std::span<const double>> fractional_weights)
{
    const auto& base = fdata.base();
    if (unit_weights) {
        require(unit_weights->size() == base.size(), "row_weights: one unit weight per unit required");
    }
    if (fractional_weights) {
        require(fractional_weights->size() == fdata.size(), "row_weights: one fractional weight per row required");
    }
    std::vector<double> w(fdata.size());
    for (std::size_t r = 0; r < w.size(); ++r) {
        const auto i = fdata.row_unit(r);
        const double wi = unit_weights ? (*unit_weights)[i] : base.unit(i).weight;
        w[r] = wi * (fractional_weights ? (*fractional_weights)[r] : fdata.row_weight(r));
    }
    return w;
}

EEEstimate solve_fractional(const FractionalDataset& fdata, const EstimatingFunction& U,
    std::optional<std::span<const double>> unit_weights, std::optional<std::span<const double>> fractional_weights,
    const SolverOptions& options)
{
    const auto w = row_weights(fdata, unit_weights, fractional_weights);
    return solve_weighted(fdata.values(), std::max<std::size_t>(fdata.stride(), 1), w, U, options);
}

} // namespace fracimp
