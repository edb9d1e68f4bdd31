#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "bnncal/error.hpp"
#include "bnncal/network.hpp"
#include "bnncal/random.hpp"

namespace bnncal {

enum class ColumnKind { numeric, categorical };

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
};

/// Describes a delimited text file. When `header` is false the columns must
/// list every field of the file in order.
struct DatasetSchema {
    std::string name;
    std::filesystem::path path;
    std::string target;
    std::vector<ColumnSpec> columns;
    std::string separator = ",";
    bool header = true;
    std::size_t skip_rows = 0;
};

inline DatasetSchema parse_schema(const nlohmann::json& j, const std::filesystem::path& base_dir = {})
{
    try {
        DatasetSchema s;
        s.name = j.at("name").get<std::string>();
        s.path = j.at("path").get<std::string>();
        if (s.path.is_relative() && !base_dir.empty()) s.path = base_dir / s.path;
        s.target = j.at("target").get<std::string>();
        s.separator = j.value("separator", std::string(","));
        s.header = j.value("header", true);
        s.skip_rows = j.value("skip_rows", std::size_t{0});
        for (const auto& c : j.at("columns")) {
            ColumnSpec col;
            col.name = c.at("name").get<std::string>();
            const auto kind = c.value("kind", std::string("numeric"));
            if (kind == "numeric") col.kind = ColumnKind::numeric;
            else if (kind == "categorical") col.kind = ColumnKind::categorical;
            else throw ConfigError("column '" + col.name + "' has unknown kind '" + kind + "'");
            s.columns.push_back(std::move(col));
        }
        if (s.separator.empty()) throw ConfigError("schema separator must not be empty");
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid dataset schema: ") + e.what());
    }
}

inline DatasetSchema load_schema(const std::filesystem::path& file)
{
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open schema file " + file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("schema " + file.string() + " is not valid JSON: " + e.what());
    }
    return parse_schema(j, file.parent_path());
}

/// Encoded features with the untouched categorical target.
struct RawDataset {
    std::string name;
    std::vector<std::string> feature_names;
    Eigen::MatrixXd features;
    std::vector<std::string> targets;
    std::size_t dropped_rows = 0;

    [[nodiscard]] Eigen::Index rows() const noexcept { return features.rows(); }
};

namespace detail {

inline std::string trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    std::string out(s.substr(first, last - first + 1));
    if (out.size() >= 2 && (out.front() == '"' || out.front() == '\'') && out.back() == out.front())
        out = out.substr(1, out.size() - 2);
    return out;
}

inline std::vector<std::string> split_fields(const std::string& line, const std::string& separator)
{
    std::vector<std::string> out;
    if (separator == " " || separator == "whitespace") {
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) out.push_back(trim(tok));
        return out;
    }
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(separator, start);
        out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
        if (pos == std::string::npos) break;
        start = pos + separator.size();
    }
    return out;
}

inline bool is_missing(const std::string& cell)
{
    return cell.empty() || cell == "?" || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan";
}

}  // namespace detail

/// Parses a delimited file. Categorical features are one-hot encoded with one
/// column per level (levels in lexicographic order, named "column=level").
/// Rows with any missing cell among the used columns are dropped and counted.
inline RawDataset load_csv(const std::filesystem::path& path, const DatasetSchema& schema)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open data file " + path.string());

    std::string line;
    std::size_t line_no = 0;
    for (std::size_t i = 0; i < schema.skip_rows && std::getline(in, line); ++i) ++line_no;

    std::vector<std::string> file_columns;
    if (schema.header) {
        if (!std::getline(in, line)) throw ParseError("missing header row", line_no + 1);
        ++line_no;
        file_columns = detail::split_fields(line, schema.separator);
    } else {
        for (const auto& c : schema.columns) file_columns.push_back(c.name);
    }

    auto column_index = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(file_columns.begin(), file_columns.end(), name);
        if (it == file_columns.end()) throw ConfigError("schema column '" + name + "' not found in " + path.string());
        return static_cast<std::size_t>(it - file_columns.begin());
    };

    const std::size_t target_col = column_index(schema.target);
    std::vector<std::pair<std::size_t, ColumnSpec>> used;
    for (const auto& c : schema.columns) {
        const std::size_t idx = column_index(c.name);
        if (c.name != schema.target) used.emplace_back(idx, c);
    }
    if (used.empty()) throw ConfigError("schema declares no feature columns");

    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> row_lines;
    RawDataset out;
    out.name = schema.name;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_fields(line, schema.separator);
        if (fields.size() != file_columns.size())
            throw ParseError("expected " + std::to_string(file_columns.size()) + " fields, found " +
                                 std::to_string(fields.size()),
                             line_no);
        bool missing = detail::is_missing(fields[target_col]);
        for (const auto& [idx, spec] : used) missing = missing || detail::is_missing(fields[idx]);
        if (missing) {
            ++out.dropped_rows;
            continue;
        }
        rows.push_back(std::move(fields));
        row_lines.push_back(line_no);
    }

    // Levels per categorical column, sorted.
    std::vector<std::vector<std::string>> levels(used.size());
    Eigen::Index width = 0;
    for (std::size_t c = 0; c < used.size(); ++c) {
        const auto& [idx, spec] = used[c];
        if (spec.kind == ColumnKind::categorical) {
            std::set<std::string> seen;
            for (const auto& r : rows) seen.insert(r[idx]);
            levels[c].assign(seen.begin(), seen.end());
            for (const auto& lv : levels[c]) out.feature_names.push_back(spec.name + "=" + lv);
            width += static_cast<Eigen::Index>(levels[c].size());
        } else {
            out.feature_names.push_back(spec.name);
            width += 1;
        }
    }

    out.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), width);
    out.targets.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        Eigen::Index col = 0;
        for (std::size_t c = 0; c < used.size(); ++c) {
            const auto& [idx, spec] = used[c];
            const std::string& cell = rows[r][idx];
            if (spec.kind == ColumnKind::categorical) {
                const auto pos = std::lower_bound(levels[c].begin(), levels[c].end(), cell) - levels[c].begin();
                out.features(static_cast<Eigen::Index>(r), col + pos) = 1.0;
                col += static_cast<Eigen::Index>(levels[c].size());
            } else {
                double v = 0.0;
                try {
                    std::size_t consumed = 0;
                    v = std::stod(cell, &consumed);
                    if (consumed != cell.size()) throw std::invalid_argument(cell);
                } catch (const std::exception&) {
                    throw ParseError("column '" + spec.name + "': cannot parse '" + cell + "' as a number", row_lines[r]);
                }
                if (!std::isfinite(v))
                    throw ParseError("column '" + spec.name + "': non-finite value", row_lines[r]);
                out.features(static_cast<Eigen::Index>(r), col++) = v;
            }
        }
        out.targets.push_back(rows[r][target_col]);
    }
    return out;
}

inline RawDataset load_csv(const DatasetSchema& schema) { return load_csv(schema.path, schema); }

/// Most frequent label -> 1, all others -> 0. Frequency ties go to the
/// lexicographically smallest label.
inline Eigen::VectorXd binarize_majority(const std::vector<std::string>& targets)
{
    require(!targets.empty(), "binarize_majority: empty target vector");
    std::map<std::string, std::size_t> counts;
    for (const auto& t : targets) ++counts[t];
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
        if (it->second > best->second) best = it;
    Eigen::VectorXd y(static_cast<Eigen::Index>(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) y[static_cast<Eigen::Index>(i)] = targets[i] == best->first ? 1.0 : 0.0;
    return y;
}

/// Fractions of (train, validation, calibration, test).
using SplitFractions = std::array<double, 4>;

inline constexpr SplitFractions default_fractions{0.6, 0.1, 0.1, 0.2};

enum class SplitRole : std::size_t { train = 0, validation = 1, calibration = 2, test = 3 };

class SplitSet;
inline SplitSet standardize(const SplitSet& splits);

/// Four-way partition of a dataset. Reads of the test partition through
/// test() are counted so callers can audit that it is consulted once.
class SplitSet {
public:
    SplitSet(std::array<BinaryBatch, 4> parts, std::array<std::vector<std::size_t>, 4> indices)
        : parts_(std::move(parts)), indices_(std::move(indices))
    {
        const Eigen::Index p = parts_[0].dim();
        for (const auto& b : parts_) require(b.dim() == p, "SplitSet: partitions disagree on feature dimension");
        mean_ = Eigen::VectorXd::Zero(p);
        scale_ = Eigen::VectorXd::Ones(p);
    }

    [[nodiscard]] const BinaryBatch& train() const noexcept { return parts_[0]; }
    [[nodiscard]] const BinaryBatch& validation() const noexcept { return parts_[1]; }
    [[nodiscard]] const BinaryBatch& calibration() const noexcept { return parts_[2]; }
    [[nodiscard]] const BinaryBatch& test() const noexcept
    {
        ++test_reads_;
        return parts_[3];
    }
    [[nodiscard]] std::size_t test_reads() const noexcept { return test_reads_; }

    /// Source row indices of a partition, ascending.
    [[nodiscard]] const std::vector<std::size_t>& indices(SplitRole role) const
    {
        return indices_[static_cast<std::size_t>(role)];
    }
    [[nodiscard]] Eigen::Index size(SplitRole role) const { return parts_[static_cast<std::size_t>(role)].size(); }

    /// Standardization applied: x' = (x - mean) / scale (scale 1 for constant columns).
    [[nodiscard]] const Eigen::VectorXd& feature_mean() const noexcept { return mean_; }
    [[nodiscard]] const Eigen::VectorXd& feature_scale() const noexcept { return scale_; }
    [[nodiscard]] bool standardized() const noexcept { return standardized_; }

    friend SplitSet standardize(const SplitSet& splits);

private:
    std::array<BinaryBatch, 4> parts_;
    std::array<std::vector<std::size_t>, 4> indices_;
    Eigen::VectorXd mean_;
    Eigen::VectorXd scale_;
    bool standardized_ = false;
    mutable std::size_t test_reads_ = 0;
};

class StratificationError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// Per-class counts allocated to each split: floor of n * fraction, with the
/// remainder handed out by largest fractional part (earlier split wins ties).
inline std::array<std::size_t, 4> allocate_counts(std::size_t n, const SplitFractions& fractions)
{
    std::array<std::size_t, 4> counts{};
    std::array<double, 4> remainder{};
    std::size_t assigned = 0;
    for (std::size_t j = 0; j < 4; ++j) {
        const double quota = static_cast<double>(n) * fractions[j];
        counts[j] = static_cast<std::size_t>(std::floor(quota + 1e-9));
        remainder[j] = quota - static_cast<double>(counts[j]);
        assigned += counts[j];
    }
    std::array<std::size_t, 4> order{0, 1, 2, 3};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 4]];
    return counts;
}

inline SplitSet stratified_split(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels,
                                 const SplitFractions& fractions, std::uint64_t seed)
{
    require(features.rows() == labels.size(), "stratified_split: features and labels differ in length");
    double sum = 0.0;
    for (double f : fractions) {
        require(f > 0.0, "stratified_split: fractions must be positive");
        sum += f;
    }
    require(std::abs(sum - 1.0) < 1e-9, "stratified_split: fractions must sum to 1");

    Rng rng(seed);
    std::array<std::vector<std::size_t>, 4> indices;
    for (double cls : {0.0, 1.0}) {
        std::vector<std::size_t> members;
        for (Eigen::Index i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) members.push_back(static_cast<std::size_t>(i));
        if (members.empty()) continue;
        const std::string cls_name = cls == 1.0 ? "1" : "0";
        if (members.size() < 4)
            throw StratificationError("class " + cls_name + " has " + std::to_string(members.size()) +
                                      " members; at least 4 are needed to stratify");
        rng.shuffle(members);
        const auto counts = allocate_counts(members.size(), fractions);
        std::size_t pos = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            if (counts[j] == 0)
                throw StratificationError("class " + cls_name + " is too small to appear in every split");
            indices[j].insert(indices[j].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                              members.begin() + static_cast<std::ptrdiff_t>(pos + counts[j]));
            pos += counts[j];
        }
    }

    std::array<BinaryBatch, 4> parts;
    for (std::size_t j = 0; j < 4; ++j) {
        std::sort(indices[j].begin(), indices[j].end());
        Eigen::MatrixXd x(static_cast<Eigen::Index>(indices[j].size()), features.cols());
        Eigen::VectorXd y(static_cast<Eigen::Index>(indices[j].size()));
        for (std::size_t r = 0; r < indices[j].size(); ++r) {
            x.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(indices[j][r]));
            y[static_cast<Eigen::Index>(r)] = labels[static_cast<Eigen::Index>(indices[j][r])];
        }
        parts[j] = BinaryBatch(std::move(x), std::move(y));
    }
    return {std::move(parts), std::move(indices)};
}

/// Centers and scales every partition with the train mean and (population)
/// standard deviation. Constant train columns are only centered.
inline SplitSet standardize(const SplitSet& splits)
{
    const BinaryBatch& train = splits.parts_[0];
    require(!train.empty(), "standardize: empty train partition");
    const Eigen::Index n = train.size();
    const Eigen::VectorXd mean = train.features().colwise().mean().transpose();
    Eigen::VectorXd scale(mean.size());
    for (Eigen::Index c = 0; c < mean.size(); ++c) {
        const double var = (train.features().col(c).array() - mean[c]).square().sum() / static_cast<double>(n);
        const double sd = std::sqrt(var);
        scale[c] = sd > 0.0 ? sd : 1.0;
    }

    std::array<BinaryBatch, 4> parts;
    for (std::size_t j = 0; j < 4; ++j) {
        const BinaryBatch& b = splits.parts_[j];
        Eigen::MatrixXd x = (b.features().rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
        parts[j] = BinaryBatch(std::move(x), b.labels());
    }
    SplitSet out(std::move(parts), splits.indices_);
    out.mean_ = mean;
    out.scale_ = scale;
    out.standardized_ = true;
    return out;
}

/// Yeo-Johnson power transform.
inline double yeo_johnson(double x, double lam)
{
    if (x >= 0.0) {
        if (lam != 0.0) return (std::pow(x + 1.0, lam) - 1.0) / lam;
        return std::log1p(x);
    }
    if (lam != 2.0) return -(std::pow(1.0 - x, 2.0 - lam) - 1.0) / (2.0 - lam);
    return -std::log1p(-x);
}

/// Decision threshold of the toy process: y = 1 iff x1 < toy_threshold(x2) + noise.
inline double toy_threshold(double x2) { return yeo_johnson(x2, -1.0); }

/// Two standard-normal covariates and y = I(x1 < yeo_johnson(x2, -1) + e),
/// e standard normal. Per row the draws are x1, x2, e in that order.
/// Targets are "1" / "0".
inline RawDataset generate_toy(std::size_t n, std::uint64_t seed)
{
    require(n >= 1, "generate_toy: n must be positive");
    Rng rng(seed);
    RawDataset out;
    out.name = "Toy";
    out.feature_names = {"x1", "x2"};
    out.features.resize(static_cast<Eigen::Index>(n), 2);
    out.targets.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x1 = rng.normal();
        const double x2 = rng.normal();
        const double e = rng.normal();
        out.features(static_cast<Eigen::Index>(i), 0) = x1;
        out.features(static_cast<Eigen::Index>(i), 1) = x2;
        out.targets.emplace_back(x1 < toy_threshold(x2) + e ? "1" : "0");
    }
    return out;
}

/// label == positive -> 1, else 0.
inline Eigen::VectorXd indicator_labels(const std::vector<std::string>& targets, const std::string& positive)
{
    Eigen::VectorXd y(static_cast<Eigen::Index>(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) y[static_cast<Eigen::Index>(i)] = targets[i] == positive ? 1.0 : 0.0;
    return y;
}

}  // namespace bnncal
