#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <vector>

#include <Eigen/Core>

#include "bnncal/error.hpp"

namespace bnncal {

struct PredictionSet {
    Eigen::VectorXd probs;
    Eigen::VectorXd labels;

    PredictionSet(Eigen::VectorXd p, Eigen::VectorXd y) : probs(std::move(p)), labels(std::move(y))
    {
        require(probs.size() == labels.size(), "PredictionSet: probabilities and labels differ in length");
        require(probs.size() > 0, "PredictionSet: empty");
        for (double v : probs) require(v >= 0.0 && v <= 1.0, "PredictionSet: probabilities must lie in [0, 1]");
        for (double v : labels) require(v == 0.0 || v == 1.0, "PredictionSet: labels must be 0 or 1");
    }

    [[nodiscard]] Eigen::Index size() const noexcept { return probs.size(); }
};

/// Mean negative Bernoulli log-likelihood. Probabilities of exactly 0 or 1
/// are rejected; clip before calling.
inline double log_loss(const PredictionSet& p)
{
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double q = p.probs[i];
        if (q <= 0.0 || q >= 1.0) throw NumericalError("log_loss: probability 0 or 1 gives infinite loss; clip first");
        total += p.labels[i] == 1.0 ? std::log(q) : std::log1p(-q);
    }
    return -total / static_cast<double>(p.size());
}

/// Mean squared difference between probability and outcome.
inline double brier_score(const PredictionSet& p)
{
    return (p.probs - p.labels).squaredNorm() / static_cast<double>(p.size());
}

/// Equal-width bins [k/n, (k+1)/n); the top bin also holds 1.0.
inline std::size_t bin_index(double prob, std::size_t n_bins)
{
    const auto k = static_cast<std::size_t>(prob * static_cast<double>(n_bins));
    return std::min(k, n_bins - 1);
}

struct ReliabilityBin {
    double low;
    double high;
    double mean_pred;  // 0 when empty
    double frac_pos;   // 0 when empty
    std::size_t count;
};

struct ReliabilityCurve {
    std::vector<ReliabilityBin> bins;
    std::size_t n_bins = 0;

    /// CSV columns bin_low, bin_high, mean_pred, frac_pos, count; one row per bin.
    void write_csv(std::ostream& out) const
    {
        out << "bin_low,bin_high,mean_pred,frac_pos,count\n";
        out.precision(17);
        for (const auto& b : bins) out << b.low << ',' << b.high << ',' << b.mean_pred << ',' << b.frac_pos << ',' << b.count << '\n';
    }
};

inline ReliabilityCurve reliability_curve(const PredictionSet& p, std::size_t n_bins)
{
    require(n_bins >= 1, "reliability_curve: n_bins must be at least 1");
    std::vector<double> sum_pred(n_bins, 0.0), sum_pos(n_bins, 0.0);
    std::vector<std::size_t> count(n_bins, 0);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const std::size_t k = bin_index(p.probs[i], n_bins);
        sum_pred[k] += p.probs[i];
        sum_pos[k] += p.labels[i];
        ++count[k];
    }
    ReliabilityCurve curve;
    curve.n_bins = n_bins;
    const double width = 1.0 / static_cast<double>(n_bins);
    for (std::size_t k = 0; k < n_bins; ++k) {
        const double c = static_cast<double>(count[k]);
        curve.bins.push_back({static_cast<double>(k) * width, k + 1 == n_bins ? 1.0 : static_cast<double>(k + 1) * width,
                              count[k] ? sum_pred[k] / c : 0.0, count[k] ? sum_pos[k] / c : 0.0, count[k]});
    }
    return curve;
}

/// Sum over bins of (n_b / N) |acc_b - conf_b|; empty bins contribute nothing.
inline double ece(const PredictionSet& p, std::size_t n_bins)
{
    const ReliabilityCurve curve = reliability_curve(p, n_bins);
    const auto n = static_cast<double>(p.size());
    double total = 0.0;
    for (const auto& b : curve.bins)
        if (b.count > 0) total += (static_cast<double>(b.count) / n) * std::abs(b.frac_pos - b.mean_pred);
    return total;
}

}  // namespace bnncal
