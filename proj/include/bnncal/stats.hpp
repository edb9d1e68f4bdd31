#pragma once

// Rank-based comparison of k methods over N datasets: average ranks, the
// Friedman test, pairwise Wilcoxon signed-rank tests with Holm step-down
// adjustment, and the grouping data behind a critical-difference diagram.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "bnncal/error.hpp"

namespace bnncal {

/// N datasets x k methods, lower is better.
struct LossMatrix {
    Eigen::MatrixXd values;
    std::vector<std::string> datasets;
    std::vector<std::string> methods;

    LossMatrix(Eigen::MatrixXd v, std::vector<std::string> d, std::vector<std::string> m)
        : values(std::move(v)), datasets(std::move(d)), methods(std::move(m))
    {
        require(values.rows() >= 2 && values.cols() >= 2, "LossMatrix: need at least 2 datasets and 2 methods");
        require(static_cast<Eigen::Index>(datasets.size()) == values.rows(), "LossMatrix: dataset names do not match rows");
        require(static_cast<Eigen::Index>(methods.size()) == values.cols(), "LossMatrix: method names do not match columns");
    }

    [[nodiscard]] Eigen::Index num_datasets() const noexcept { return values.rows(); }
    [[nodiscard]] Eigen::Index num_methods() const noexcept { return values.cols(); }
};

/// Ascending ranks starting at 1; tied values share the mean of their ranks.
inline Eigen::VectorXd average_rank_row(const Eigen::Ref<const Eigen::VectorXd>& row)
{
    const Eigen::Index k = row.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return row[a] < row[b]; });
    Eigen::VectorXd ranks(k);
    for (Eigen::Index i = 0; i < k;) {
        Eigen::Index j = i;
        while (j + 1 < k && row[order[static_cast<std::size_t>(j + 1)]] == row[order[static_cast<std::size_t>(i)]]) ++j;
        const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
        for (Eigen::Index t = i; t <= j; ++t) ranks[order[static_cast<std::size_t>(t)]] = shared;
        i = j + 1;
    }
    return ranks;
}

/// Sum of (t^3 - t) over groups of exactly tied values.
inline double tie_sum(const Eigen::Ref<const Eigen::VectorXd>& values)
{
    std::vector<double> sorted(values.data(), values.data() + values.size());
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        total += t * t * t - t;
        i = j + 1;
    }
    return total;
}

struct RankResult {
    std::vector<std::string> methods;
    Eigen::MatrixXd rows;     // N x k
    Eigen::VectorXd average;  // k
};

inline RankResult average_ranks(const LossMatrix& L)
{
    require(!L.values.hasNaN(), "average_ranks: loss matrix contains NaN");
    RankResult out;
    out.methods = L.methods;
    out.rows.resize(L.num_datasets(), L.num_methods());
    for (Eigen::Index i = 0; i < L.num_datasets(); ++i) out.rows.row(i) = average_rank_row(L.values.row(i).transpose()).transpose();
    out.average = out.rows.colwise().mean().transpose();
    return out;
}

// Regularized incomplete gamma functions.
namespace detail {

inline double gamma_p_series(double a, double x)
{
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (a + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Modified Lentz evaluation of the continued fraction for Q(a, x).
inline double gamma_q_continued_fraction(double a, double x)
{
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Q(a, x) = Gamma(a, x) / Gamma(a).
inline double gamma_q(double a, double x)
{
    require(a > 0.0 && x >= 0.0, "gamma_q: need a > 0 and x >= 0");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
    return detail::gamma_q_continued_fraction(a, x);
}

/// P(X > x) for X ~ chi-square(df).
inline double chi_square_sf(double x, double df)
{
    if (x <= 0.0) return 1.0;
    return gamma_q(0.5 * df, 0.5 * x);
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

struct FriedmanResult {
    double statistic;               // tie-corrected
    double p_value;
    double statistic_uncorrected;
    double p_value_uncorrected;
    int df;
};

inline FriedmanResult friedman_test(const LossMatrix& L)
{
    const RankResult ranks = average_ranks(L);
    const auto n = static_cast<double>(L.num_datasets());
    const auto k = static_cast<double>(L.num_methods());
    const double raw = 12.0 * n / (k * (k + 1.0)) * (ranks.average.squaredNorm() - k * (k + 1.0) * (k + 1.0) / 4.0);
    double ties = 0.0;
    for (Eigen::Index i = 0; i < L.num_datasets(); ++i) ties += tie_sum(L.values.row(i).transpose());
    const double correction = 1.0 - ties / (n * k * (k * k - 1.0));
    if (correction <= 0.0) throw NumericalError("friedman_test: every row is fully tied; statistic undefined");
    const double corrected = raw / correction;
    const int df = static_cast<int>(k) - 1;
    return {corrected, chi_square_sf(corrected, df), raw, chi_square_sf(raw, df), df};
}

struct WilcoxonResult {
    double statistic = 0.0;  // W+, sum of ranks of positive differences
    double p_value = 1.0;
    std::size_t n_nonzero = 0;
    bool exact = true;
    bool degenerate = false;
};

inline constexpr std::size_t wilcoxon_exact_limit = 25;

/// Two-sided Wilcoxon signed-rank test on a - b. Zero differences are
/// dropped; tied |differences| get average ranks. Exact null distribution
/// for up to 25 non-zero differences, otherwise the normal approximation
/// with tie-corrected variance and 0.5 continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(const Eigen::Ref<const Eigen::VectorXd>& a,
                                           const Eigen::Ref<const Eigen::VectorXd>& b)
{
    require(a.size() == b.size(), "wilcoxon_signed_rank: samples differ in length");
    std::vector<double> diffs;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) diffs.push_back(a[i] - b[i]);

    WilcoxonResult out;
    out.n_nonzero = diffs.size();
    if (diffs.empty()) {
        out.degenerate = true;
        return out;
    }
    const auto n = static_cast<Eigen::Index>(diffs.size());
    Eigen::VectorXd magnitude(n);
    for (Eigen::Index i = 0; i < n; ++i) magnitude[i] = std::abs(diffs[static_cast<std::size_t>(i)]);
    const Eigen::VectorXd ranks = average_rank_row(magnitude);
    for (Eigen::Index i = 0; i < n; ++i)
        if (diffs[static_cast<std::size_t>(i)] > 0.0) out.statistic += ranks[i];

    if (diffs.size() <= wilcoxon_exact_limit) {
        // Doubled ranks are integers even with ties; count subsets by doubled sum.
        std::vector<int> doubled(static_cast<std::size_t>(n));
        int total = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            doubled[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(2.0 * ranks[i]));
            total += doubled[static_cast<std::size_t>(i)];
        }
        std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
        ways[0] = 1.0;
        for (int r : doubled)
            for (int s = total; s >= r; --s) ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - r)];
        const double subsets = std::ldexp(1.0, static_cast<int>(n));
        const int observed = static_cast<int>(std::lround(2.0 * out.statistic));
        double lower = 0.0, upper = 0.0;
        for (int s = 0; s <= total; ++s) {
            if (s <= observed) lower += ways[static_cast<std::size_t>(s)];
            if (s >= observed) upper += ways[static_cast<std::size_t>(s)];
        }
        out.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / subsets);
        out.exact = true;
    } else {
        const auto nd = static_cast<double>(n);
        const double mean = nd * (nd + 1.0) / 4.0;
        const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_sum(magnitude) / 48.0;
        const double z = std::max(0.0, std::abs(out.statistic - mean) - 0.5) / std::sqrt(var);
        out.p_value = std::min(1.0, 2.0 * normal_sf(z));
        out.exact = false;
    }
    return out;
}

/// Holm step-down adjusted p-values, returned in input order.
inline std::vector<double> holm_adjust(const std::vector<double>& p)
{
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adjusted(m);
    double running = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        running = std::max(running, std::min(1.0, static_cast<double>(m - i) * p[order[i]]));
        adjusted[order[i]] = running;
    }
    return adjusted;
}

struct PairResult {
    std::size_t first;
    std::size_t second;
    double statistic;
    double p_raw;
    double p_holm;
    bool significant;
    bool degenerate;
    bool exact;
};

struct PairwiseSignificance {
    std::vector<std::string> methods;
    std::vector<PairResult> pairs;  // (0,1), (0,2), ..., (k-2,k-1)
    double alpha = 0.05;

    [[nodiscard]] const PairResult& find(std::size_t i, std::size_t j) const
    {
        if (i > j) std::swap(i, j);
        for (const auto& p : pairs)
            if (p.first == i && p.second == j) return p;
        throw ContractViolation("PairwiseSignificance: unknown method pair");
    }
};

inline PairwiseSignificance wilcoxon_holm(const LossMatrix& L, double alpha = 0.05)
{
    require(alpha > 0.0 && alpha < 1.0, "wilcoxon_holm: alpha must lie in (0, 1)");
    require(!L.values.hasNaN(), "wilcoxon_holm: loss matrix contains NaN");
    PairwiseSignificance out;
    out.methods = L.methods;
    out.alpha = alpha;
    std::vector<double> raw;
    const auto k = static_cast<std::size_t>(L.num_methods());
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            const WilcoxonResult w =
                wilcoxon_signed_rank(L.values.col(static_cast<Eigen::Index>(i)), L.values.col(static_cast<Eigen::Index>(j)));
            out.pairs.push_back({i, j, w.statistic, w.p_value, 0.0, false, w.degenerate, w.exact});
            raw.push_back(w.p_value);
        }
    }
    const std::vector<double> adjusted = holm_adjust(raw);
    for (std::size_t t = 0; t < out.pairs.size(); ++t) {
        out.pairs[t].p_holm = adjusted[t];
        out.pairs[t].significant = adjusted[t] <= alpha;
    }
    return out;
}

struct CriticalDifference {
    std::vector<std::string> order;            // best (lowest rank) first
    std::vector<double> avg_ranks;             // aligned with `order`
    std::vector<std::vector<std::string>> cliques;
    double alpha = 0.05;
};

namespace detail {

inline void bron_kerbosch(std::vector<std::size_t> R, std::vector<std::size_t> P, std::vector<std::size_t> X,
                          const std::vector<std::vector<bool>>& adj, std::vector<std::vector<std::size_t>>& out)
{
    if (P.empty() && X.empty()) {
        out.push_back(std::move(R));
        return;
    }
    while (!P.empty()) {
        const std::size_t v = P.front();
        std::vector<std::size_t> R2 = R, P2, X2;
        R2.push_back(v);
        for (std::size_t u : P)
            if (adj[v][u]) P2.push_back(u);
        for (std::size_t u : X)
            if (adj[v][u]) X2.push_back(u);
        bron_kerbosch(std::move(R2), std::move(P2), std::move(X2), adj, out);
        P.erase(P.begin());
        X.push_back(v);
    }
}

}  // namespace detail

/// Methods ordered by average rank, plus every maximal group of methods whose
/// pairwise differences are all non-significant.
inline CriticalDifference critical_difference_data(const RankResult& ranks, const PairwiseSignificance& sig)
{
    require(ranks.methods == sig.methods, "critical_difference_data: method sets differ");
    const std::size_t k = ranks.methods.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ranks.average[static_cast<Eigen::Index>(a)] < ranks.average[static_cast<Eigen::Index>(b)]; });
    std::vector<std::size_t> position(k);
    for (std::size_t i = 0; i < k; ++i) position[order[i]] = i;

    std::vector<std::vector<bool>> adj(k, std::vector<bool>(k, false));
    for (const auto& p : sig.pairs) adj[p.first][p.second] = adj[p.second][p.first] = !p.significant;

    std::vector<std::vector<std::size_t>> found;
    detail::bron_kerbosch({}, order, {}, adj, found);
    for (auto& c : found) std::sort(c.begin(), c.end(), [&](std::size_t a, std::size_t b) { return position[a] < position[b]; });
    std::sort(found.begin(), found.end(), [&](const auto& a, const auto& b) {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                            [&](std::size_t x, std::size_t y) { return position[x] < position[y]; });
    });

    CriticalDifference out;
    out.alpha = sig.alpha;
    for (std::size_t i : order) {
        out.order.push_back(ranks.methods[i]);
        out.avg_ranks.push_back(ranks.average[static_cast<Eigen::Index>(i)]);
    }
    for (const auto& c : found) {
        std::vector<std::string> names;
        for (std::size_t i : c) names.push_back(ranks.methods[i]);
        out.cliques.push_back(std::move(names));
    }
    return out;
}

inline nlohmann::json to_json(const CriticalDifference& cd)
{
    return {{"order", cd.order}, {"avg_ranks", cd.avg_ranks}, {"cliques", cd.cliques}, {"alpha", cd.alpha}};
}

/// Header "dataset,<method>,..."; one row per dataset.
inline LossMatrix read_loss_matrix(std::istream& in)
{
    std::string line;
    std::size_t line_no = 0;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            const auto a = cell.find_first_not_of(" \t\r");
            const auto b = cell.find_last_not_of(" \t\r");
            out.push_back(a == std::string::npos ? std::string{} : cell.substr(a, b - a + 1));
        }
        return out;
    };
    if (!std::getline(in, line)) throw ParseError("loss matrix: missing header", 1);
    ++line_no;
    auto header = split(line);
    if (header.size() < 3) throw ParseError("loss matrix: header needs a dataset column and at least two methods", line_no);
    std::vector<std::string> methods(header.begin() + 1, header.end());
    std::vector<std::string> datasets;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = split(line);
        if (cells.size() != header.size()) throw ParseError("loss matrix: wrong number of fields", line_no);
        datasets.push_back(cells[0]);
        std::vector<double> row;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cells[c], &used));
                if (used != cells[c].size()) throw std::invalid_argument(cells[c]);
            } catch (const std::exception&) {
                throw ParseError("loss matrix: cannot parse '" + cells[c] + "'", line_no);
            }
        }
        rows.push_back(std::move(row));
    }
    Eigen::MatrixXd values(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(methods.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < methods.size(); ++j) values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return {std::move(values), std::move(datasets), std::move(methods)};
}

inline LossMatrix read_loss_matrix(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open loss matrix " + path);
    return read_loss_matrix(in);
}

inline void write_loss_matrix(std::ostream& out, const LossMatrix& L)
{
    out << "dataset";
    for (const auto& m : L.methods) out << ',' << m;
    out << '\n';
    out.precision(17);
    for (Eigen::Index i = 0; i < L.num_datasets(); ++i) {
        out << L.datasets[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < L.num_methods(); ++j) out << ',' << L.values(i, j);
        out << '\n';
    }
}

}  // namespace bnncal
