#pragma once

// Post-hoc calibrators mapping a classifier's probability-scale score s in
// [0, 1] to a calibrated probability.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "bnncal/error.hpp"
#include "bnncal/network.hpp"

namespace bnncal {

inline constexpr double default_probability_floor = 1e-6;

struct ScoreSet {
    Eigen::VectorXd scores;
    Eigen::VectorXd labels;

    ScoreSet(Eigen::VectorXd s, Eigen::VectorXd y) : scores(std::move(s)), labels(std::move(y))
    {
        require(scores.size() == labels.size(), "ScoreSet: scores and labels differ in length");
        for (double v : scores) require(v >= 0.0 && v <= 1.0, "ScoreSet: scores must lie in [0, 1]");
        for (double v : labels) require(v == 0.0 || v == 1.0, "ScoreSet: labels must be 0 or 1");
    }

    [[nodiscard]] Eigen::Index size() const noexcept { return scores.size(); }
    [[nodiscard]] bool both_classes() const
    {
        const double pos = labels.sum();
        return pos > 0.0 && pos < static_cast<double>(labels.size());
    }
};

struct LogisticCalibrator {
    double gamma = 0.0;
    double delta = 0.0;

    /// 1 / (1 + 1 / exp(gamma * s + delta)).
    [[nodiscard]] double map(double s) const noexcept { return logistic(gamma * s + delta); }
};

/// Right-continuous step function over ascending breakpoints.
struct IsotonicCalibrator {
    std::vector<double> breakpoints;
    std::vector<double> values;

    [[nodiscard]] double map(double s) const
    {
        require(!breakpoints.empty(), "IsotonicCalibrator: empty map");
        const auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), s);
        if (it == breakpoints.begin()) return values.front();
        return values[static_cast<std::size_t>(it - breakpoints.begin()) - 1];
    }
};

/// mu(s) = 1 / (1 + 1 / (e^c * s^a / (1 - s)^b)), a, b >= 0.
struct BetaCalibrator {
    double a = 1.0;
    double b = 1.0;
    double c = 0.0;

    [[nodiscard]] double map(double s) const noexcept
    {
        // a * ln(s) with 0 * ln(0) taken as 0, likewise for b.
        const double ls = a == 0.0 ? 0.0 : a * std::log(s);
        const double l1s = b == 0.0 ? 0.0 : b * std::log1p(-s);
        return logistic(c + ls - l1s);
    }
};

using Calibrator = std::variant<LogisticCalibrator, IsotonicCalibrator, BetaCalibrator>;

/// Calibrated probability, clipped to [floor, 1 - floor].
inline double apply(const Calibrator& calibrator, double score, double floor = default_probability_floor)
{
    require(score >= 0.0 && score <= 1.0, "apply: score must lie in [0, 1]");
    const double p = std::visit([score](const auto& c) { return c.map(score); }, calibrator);
    return std::clamp(p, floor, 1.0 - floor);
}

inline Eigen::VectorXd apply(const Calibrator& calibrator, const Eigen::VectorXd& scores,
                             double floor = default_probability_floor)
{
    Eigen::VectorXd out(scores.size());
    for (Eigen::Index i = 0; i < scores.size(); ++i) out[i] = apply(calibrator, scores[i], floor);
    return out;
}

/// Maximum-likelihood logistic regression with an intercept appended as the
/// last coefficient. Damped Newton: full step halved until the
/// log-likelihood does not decrease. Stops at gradient norm < tol.
inline Eigen::VectorXd fit_logistic_regression(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels,
                                               int max_iter = 100, double tol = 1e-8)
{
    const Eigen::Index n = features.rows();
    const Eigen::Index p = features.cols() + 1;
    Eigen::MatrixXd X(n, p);
    X.leftCols(p - 1) = features;
    X.col(p - 1).setOnes();

    auto loglik = [&](const Eigen::VectorXd& w) {
        const Eigen::VectorXd eta = X * w;
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) total -= labels[i] == 1.0 ? softplus(-eta[i]) : softplus(eta[i]);
        return total;
    };

    Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
    double current = loglik(w);
    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::VectorXd eta = X * w;
        Eigen::VectorXd resid(n), weight(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double mu = logistic(eta[i]);
            resid[i] = labels[i] - mu;
            weight[i] = mu * (1.0 - mu);
        }
        const Eigen::VectorXd grad = X.transpose() * resid;
        if (grad.norm() < tol) break;
        Eigen::MatrixXd info = X.transpose() * weight.asDiagonal() * X;
        info.diagonal().array() += 1e-12 * std::max(1.0, info.diagonal().maxCoeff());
        const Eigen::VectorXd step = info.ldlt().solve(grad);
        double scale = 1.0;
        Eigen::VectorXd candidate = w + step;
        double next = loglik(candidate);
        while (!(next >= current) && scale > 1e-10) {
            scale *= 0.5;
            candidate = w + scale * step;
            next = loglik(candidate);
        }
        if (!(next >= current)) break;
        w = std::move(candidate);
        current = next;
    }
    return w;
}

/// Platt scaling on probability-scale scores.
inline LogisticCalibrator fit_logistic(const ScoreSet& cal)
{
    if (!cal.both_classes()) throw DegenerateFitError("fit_logistic: calibration labels contain a single class");
    const Eigen::VectorXd w = fit_logistic_regression(cal.scores, cal.labels);
    return {w[0], w[1]};
}

/// Weighted L2 projection of `values` (already in score order) onto
/// non-decreasing sequences by pool-adjacent-violators.
inline std::vector<double> pool_adjacent_violators(const std::vector<double>& values, const std::vector<double>& weights)
{
    require(values.size() == weights.size(), "pool_adjacent_violators: length mismatch");
    struct Block {
        double mean;
        double weight;
        std::size_t count;
    };
    std::vector<Block> blocks;
    blocks.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        blocks.push_back({values[i], weights[i], 1});
        while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
            const Block top = blocks.back();
            blocks.pop_back();
            Block& prev = blocks.back();
            const double w = prev.weight + top.weight;
            prev.mean = (prev.mean * prev.weight + top.mean * top.weight) / w;
            prev.weight = w;
            prev.count += top.count;
        }
    }
    std::vector<double> out;
    out.reserve(values.size());
    for (const Block& b : blocks) out.insert(out.end(), b.count, b.mean);
    return out;
}

/// Isotonic regression of real targets on scores: identical scores are pooled
/// first (mean target, weight = multiplicity), then PAV.
inline IsotonicCalibrator isotonic_regression(const Eigen::VectorXd& scores, const Eigen::VectorXd& targets)
{
    require(scores.size() == targets.size(), "isotonic_regression: length mismatch");
    require(scores.size() > 0, "isotonic_regression: empty input");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] < scores[b]; });

    IsotonicCalibrator out;
    std::vector<double> sums, weights;
    for (Eigen::Index idx : order) {
        if (out.breakpoints.empty() || scores[idx] != out.breakpoints.back()) {
            out.breakpoints.push_back(scores[idx]);
            sums.push_back(0.0);
            weights.push_back(0.0);
        }
        sums.back() += targets[idx];
        weights.back() += 1.0;
    }
    std::vector<double> means(sums.size());
    for (std::size_t i = 0; i < sums.size(); ++i) means[i] = sums[i] / weights[i];
    out.values = pool_adjacent_violators(means, weights);
    return out;
}

inline IsotonicCalibrator fit_isotonic(const ScoreSet& cal)
{
    require(cal.size() > 0, "fit_isotonic: empty calibration set");
    return isotonic_regression(cal.scores, cal.labels);
}

inline constexpr double beta_score_clip = 1e-12;

/// (ln s, -ln(1 - s)) with s clipped into [1e-12, 1 - 1e-12].
inline Eigen::MatrixXd beta_features(const Eigen::VectorXd& scores)
{
    Eigen::MatrixXd X(scores.size(), 2);
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        const double s = std::clamp(scores[i], beta_score_clip, 1.0 - beta_score_clip);
        X(i, 0) = std::log(s);
        X(i, 1) = -std::log1p(-s);
    }
    return X;
}

/// Logistic regression on (ln s, -ln(1 - s)). A negative a or b is pinned to
/// zero and the model refitted without that feature, keeping the map monotone.
inline BetaCalibrator fit_beta(const ScoreSet& cal)
{
    if (!cal.both_classes()) throw DegenerateFitError("fit_beta: calibration labels contain a single class");
    const Eigen::MatrixXd X = beta_features(cal.scores);
    Eigen::VectorXd w = fit_logistic_regression(X, cal.labels);
    BetaCalibrator out{w[0], w[1], w[2]};
    if (out.a >= 0.0 && out.b >= 0.0) return out;

    // Drop the more negative coefficient first.
    const Eigen::Index keep = out.a < out.b ? 1 : 0;
    w = fit_logistic_regression(X.col(keep), cal.labels);
    if (w[0] < 0.0) {
        const double base = cal.labels.mean();
        return {0.0, 0.0, std::log(base / (1.0 - base))};
    }
    return keep == 1 ? BetaCalibrator{0.0, w[0], w[1]} : BetaCalibrator{w[0], 0.0, w[1]};
}

enum class CalibrationMethod { logistic, isotonic, beta };

inline Calibrator fit_calibrator(CalibrationMethod method, const ScoreSet& cal)
{
    switch (method) {
    case CalibrationMethod::logistic: return fit_logistic(cal);
    case CalibrationMethod::isotonic: return fit_isotonic(cal);
    case CalibrationMethod::beta: return fit_beta(cal);
    }
    throw ContractViolation("fit_calibrator: unknown method");
}

inline std::string calibrator_type(const Calibrator& c)
{
    return std::visit(
        []<typename T>(const T&) -> std::string {
            if constexpr (std::is_same_v<T, LogisticCalibrator>) return "logistic";
            else if constexpr (std::is_same_v<T, IsotonicCalibrator>) return "isotonic";
            else return "beta";
        },
        c);
}

inline nlohmann::json to_json(const Calibrator& c)
{
    nlohmann::json params;
    std::visit(
        [&]<typename T>(const T& cal) {
            if constexpr (std::is_same_v<T, LogisticCalibrator>) {
                params = {{"gamma", cal.gamma}, {"delta", cal.delta}};
            } else if constexpr (std::is_same_v<T, IsotonicCalibrator>) {
                params = {{"breakpoints", cal.breakpoints}, {"values", cal.values}};
            } else {
                params = {{"a", cal.a}, {"b", cal.b}, {"c", cal.c}};
            }
        },
        c);
    return {{"type", calibrator_type(c)}, {"parameters", params}};
}

inline Calibrator calibrator_from_json(const nlohmann::json& j)
{
    try {
        const auto type = j.at("type").get<std::string>();
        const auto& p = j.at("parameters");
        if (type == "logistic") return LogisticCalibrator{p.at("gamma").get<double>(), p.at("delta").get<double>()};
        if (type == "beta") return BetaCalibrator{p.at("a").get<double>(), p.at("b").get<double>(), p.at("c").get<double>()};
        if (type == "isotonic") {
            IsotonicCalibrator iso{p.at("breakpoints").get<std::vector<double>>(), p.at("values").get<std::vector<double>>()};
            if (iso.breakpoints.size() != iso.values.size() || iso.breakpoints.empty())
                throw ConfigError("isotonic calibrator: breakpoints and values must be non-empty and equal in length");
            return iso;
        }
        throw ConfigError("unknown calibrator type '" + type + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid calibrator document: ") + e.what());
    }
}

}  // namespace bnncal
