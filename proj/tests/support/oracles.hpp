#pragma once

#include "fracimp/dataset.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Gauss-Hermite nodes and weights for the weight exp(-x^2), by Golub-Welsch.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int n)
{
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    Eigen::VectorXd w(n);
    for (int k = 0; k < n; ++k) {
        const double v = es.eigenvectors()(0, k);
        w(k) = std::sqrt(std::numbers::pi) * v * v;
    }
    return { es.eigenvalues(), w };
}

// E g(Z), Z ~ N(mu, sd^2).
inline double normal_expectation(const std::function<double(double)>& g, double mu, double sd, int n = 64)
{
    const auto [x, w] = gauss_hermite(n);
    double s = 0.0;
    for (int k = 0; k < n; ++k) {
        s += w(k) * g(mu + std::sqrt(2.0) * sd * x(k));
    }
    return s / std::sqrt(std::numbers::pi);
}

// Data set on continuous items from rows; NaN marks a missing value.
inline fracimp::SurveyDataset make_data(const std::vector<std::string>& names, const std::vector<std::vector<double>>& rows,
    const std::vector<double>& weights = {}, const std::vector<std::string>& strata = {})
{
    std::vector<fracimp::Item> items;
    for (const auto& n : names) {
        items.push_back({ n, fracimp::ItemKind::continuous, {} });
    }
    std::vector<fracimp::UnitRecord> units;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        fracimp::UnitRecord u;
        u.id = "u" + std::to_string(i + 1);
        u.weight = weights.empty() ? 1.0 : weights[i];
        for (double v : rows[i]) {
            u.values.push_back(std::isnan(v) ? std::nullopt : std::optional<double>(v));
        }
        units.push_back(std::move(u));
    }
    return fracimp::SurveyDataset(std::move(items), std::move(units), strata);
}

inline constexpr double NA = std::numeric_limits<double>::quiet_NaN();

} // namespace oracle
