#pragma once

// End-to-end benchmark protocol: load -> binarize -> stratified split ->
// standardize -> (baseline network + post-hoc calibrators, variational BNN)
// -> test metrics and plot-ready artifacts; and the cross-dataset rank
// statistics over the resulting loss matrix.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "bnncal/calibration.hpp"
#include "bnncal/data.hpp"
#include "bnncal/error.hpp"
#include "bnncal/metrics.hpp"
#include "bnncal/network.hpp"
#include "bnncal/random.hpp"
#include "bnncal/stats.hpp"
#include "bnncal/training.hpp"

namespace bnncal {

namespace fs = std::filesystem;

inline const std::string method_uncalibrated = "Uncalibrated";
inline const std::string method_beta = "Beta";
inline const std::string method_isotonic = "Isotonic";
inline const std::string method_logistic = "Logistic";
inline const std::string method_var_bayes = "VarBayes";

struct ExperimentConfig {
    std::string name;
    std::optional<fs::path> schema;  // dataset schema file; unset -> toy data
    std::size_t toy_samples = 10000;
    std::uint64_t seed = 0;
    SplitFractions fractions = default_fractions;
    std::vector<int> hidden{4, 4};
    TrainConfig bnn = default_bnn_config();
    TrainConfig baseline = default_baseline_config();
    std::vector<CalibrationMethod> calibrators{CalibrationMethod::beta, CalibrationMethod::isotonic,
                                               CalibrationMethod::logistic};
    std::size_t bins = 10;
    double probability_floor = default_probability_floor;
    fs::path output = "results";

    [[nodiscard]] bool is_toy() const noexcept { return !schema.has_value(); }
};

inline std::string method_name(CalibrationMethod m)
{
    switch (m) {
    case CalibrationMethod::beta: return method_beta;
    case CalibrationMethod::isotonic: return method_isotonic;
    case CalibrationMethod::logistic: return method_logistic;
    }
    return "?";
}

inline CalibrationMethod parse_calibration_method(const std::string& s)
{
    if (s == "Beta" || s == "beta") return CalibrationMethod::beta;
    if (s == "Isotonic" || s == "isotonic") return CalibrationMethod::isotonic;
    if (s == "Logistic" || s == "logistic") return CalibrationMethod::logistic;
    throw ConfigError("unknown calibrator '" + s + "'");
}

namespace detail {

inline void read_train_config(const nlohmann::json& j, TrainConfig& c)
{
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.factors = j.value("factors", c.factors);
    c.draws_validation = j.value("draws_validation", c.draws_validation);
    c.draws_test = j.value("draws_test", c.draws_test);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.init_scale = j.value("init_scale", c.init_scale);
    if (j.contains("gradient_form")) {
        const auto form = j.at("gradient_form").get<std::string>();
        if (form == "path") c.gradient_form = GradientForm::path;
        else if (form == "total") c.gradient_form = GradientForm::total;
        else throw ConfigError("gradient_form must be 'path' or 'total'");
    }
    if (c.max_epochs < 0) throw ConfigError("max_epochs must be non-negative");
    if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (c.draws_validation < 1 || c.draws_test < 1) throw ConfigError("draw counts must be at least 1");
    if (c.factors < 0) throw ConfigError("factors must be non-negative");
}

inline nlohmann::json train_config_json(const TrainConfig& c)
{
    return {{"max_epochs", c.max_epochs},
            {"learning_rate", c.learning_rate},
            {"factors", c.factors},
            {"draws_validation", c.draws_validation},
            {"draws_test", c.draws_test},
            {"clip_norm", c.clip_norm},
            {"init_scale", c.init_scale},
            {"gradient_form", c.gradient_form == GradientForm::path ? "path" : "total"}};
}

}  // namespace detail

/// Experiment config JSON. Relative paths resolve against `base_dir`.
///
///   {"name", "dataset": "<schema.json>" | "toy", "toy_samples", "seed",
///    "fractions": [train, validation, calibration, test], "hidden": [..],
///    "bnn": {...}, "baseline": {...}, "calibrators": ["Beta", ...],
///    "bins", "probability_floor", "output"}
///
/// The baseline's max_epochs defaults to half of the BNN's. On the toy data
/// the baseline learning rate defaults to 1e-2 instead of 1e-3.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j, const fs::path& base_dir = {})
{
    try {
        ExperimentConfig c;
        const auto dataset = j.value("dataset", std::string("toy"));
        if (dataset != "toy") {
            fs::path p = dataset;
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            c.schema = p;
        }
        c.toy_samples = j.value("toy_samples", c.toy_samples);
        c.seed = j.value("seed", c.seed);
        if (j.contains("fractions")) {
            const auto f = j.at("fractions").get<std::vector<double>>();
            if (f.size() != 4) throw ConfigError("fractions must list train, validation, calibration and test");
            double sum = 0.0;
            for (std::size_t i = 0; i < 4; ++i) {
                if (!(f[i] > 0.0)) throw ConfigError("fractions must be positive");
                c.fractions[i] = f[i];
                sum += f[i];
            }
            if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("fractions must sum to 1");
        }
        c.hidden = j.value("hidden", c.hidden);
        for (int h : c.hidden)
            if (h <= 0) throw ConfigError("hidden layer widths must be positive");
        if (j.contains("bnn")) detail::read_train_config(j.at("bnn"), c.bnn);
        c.baseline.max_epochs = c.bnn.max_epochs / 2;
        if (c.is_toy()) c.baseline.learning_rate = 1e-2;
        if (j.contains("baseline")) detail::read_train_config(j.at("baseline"), c.baseline);
        if (j.contains("calibrators")) {
            c.calibrators.clear();
            for (const auto& s : j.at("calibrators")) c.calibrators.push_back(parse_calibration_method(s.get<std::string>()));
        }
        c.bins = j.value("bins", c.bins);
        if (c.bins < 1) throw ConfigError("bins must be at least 1");
        c.probability_floor = j.value("probability_floor", c.probability_floor);
        if (!(c.probability_floor > 0.0 && c.probability_floor < 0.5)) throw ConfigError("probability_floor must lie in (0, 0.5)");
        c.output = j.value("output", std::string("results"));
        if (c.output.is_relative() && !base_dir.empty()) c.output = base_dir / c.output;
        c.name = j.value("name", std::string{});
        if (c.name.empty()) c.name = c.is_toy() ? "Toy" : c.schema->stem().string();
        if (c.schema && !fs::exists(*c.schema)) throw ConfigError("dataset schema " + c.schema->string() + " does not exist");
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid experiment config: ") + e.what());
    }
}

inline nlohmann::json read_json_file(const fs::path& file)
{
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open " + file.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(file.string() + " is not valid JSON: " + e.what());
    }
}

inline ExperimentConfig load_experiment_config(const fs::path& file)
{
    return parse_experiment_config(read_json_file(file), file.parent_path());
}

inline nlohmann::json to_json(const ExperimentConfig& c)
{
    std::vector<std::string> cal;
    for (auto m : c.calibrators) cal.push_back(method_name(m));
    return {{"name", c.name},
            {"dataset", c.schema ? c.schema->string() : std::string("toy")},
            {"toy_samples", c.toy_samples},
            {"seed", c.seed},
            {"fractions", c.fractions},
            {"hidden", c.hidden},
            {"bnn", detail::train_config_json(c.bnn)},
            {"baseline", detail::train_config_json(c.baseline)},
            {"calibrators", cal},
            {"bins", c.bins},
            {"probability_floor", c.probability_floor}};
}

struct MethodResult {
    std::string name;
    double log_loss = 0.0;
    double brier = 0.0;
    double ece = 0.0;
    ReliabilityCurve curve;
    int tau = 0;
    Eigen::VectorXd probs;  // test-set probabilities
};

struct ExperimentResult {
    std::string dataset;
    std::vector<MethodResult> methods;  // Uncalibrated, calibrators in config order, VarBayes
    Eigen::VectorXd test_labels;
    Eigen::MatrixXd test_features;      // standardized
    Eigen::MatrixXd test_features_raw;
    std::vector<std::size_t> test_indices;  // rows of the loaded data
    std::array<Eigen::Index, 4> split_sizes{};
    std::size_t dropped_rows = 0;
    TrainHistory baseline_history;
    TrainHistory bnn_history;
    std::vector<std::pair<std::string, Calibrator>> calibrators;
    std::size_t test_reads = 0;

    [[nodiscard]] const MethodResult& method(const std::string& name) const
    {
        for (const auto& m : methods)
            if (m.name == name) return m;
        throw ContractViolation("no result for method " + name);
    }
};

/// Failure of one stage of an experiment.
class ExperimentError : public std::runtime_error {
public:
    ExperimentError(std::string dataset, std::string stage, const std::string& message)
        : std::runtime_error(dataset + " [" + stage + "]: " + message), dataset_(std::move(dataset)), stage_(std::move(stage)),
          message_(message)
    {
    }
    [[nodiscard]] const std::string& dataset() const noexcept { return dataset_; }
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }
    [[nodiscard]] const std::string& message() const noexcept { return message_; }

private:
    std::string dataset_;
    std::string stage_;
    std::string message_;
};

namespace detail {

enum ExperimentStream : std::uint64_t { split_stream = 10, toy_stream = 11, baseline_stream = 12, bnn_stream = 13 };

inline MethodResult evaluate_method(std::string name, Eigen::VectorXd probs, const Eigen::VectorXd& labels, int tau,
                                    std::size_t bins, double floor)
{
    probs = probs.cwiseMax(floor).cwiseMin(1.0 - floor);
    const PredictionSet set(probs, labels);
    MethodResult r;
    r.name = std::move(name);
    r.log_loss = log_loss(set);
    r.brier = brier_score(set);
    r.ece = ece(set, bins);
    r.curve = reliability_curve(set, bins);
    r.tau = tau;
    r.probs = std::move(probs);
    return r;
}

template <typename F>
auto stage(const std::string& dataset, const std::string& name, F&& f)
{
    try {
        return f();
    } catch (const ExperimentError&) {
        throw;
    } catch (const std::exception& e) {
        throw ExperimentError(dataset, name, e.what());
    }
}

}  // namespace detail

/// Runs the full protocol for one dataset. Does not write files.
inline ExperimentResult run_experiment_in_memory(const ExperimentConfig& config)
{
    const std::string& ds = config.name;
    const Rng root(config.seed);

    struct Loaded {
        Eigen::MatrixXd features;
        Eigen::VectorXd labels;
        std::size_t dropped;
    };
    const Loaded data = detail::stage(ds, "load", [&] {
        if (config.is_toy()) {
            RawDataset raw = generate_toy(config.toy_samples, root.split(detail::toy_stream).seed());
            return Loaded{std::move(raw.features), indicator_labels(raw.targets, "1"), 0};
        }
        const DatasetSchema schema = load_schema(*config.schema);
        RawDataset raw = load_csv(schema);
        return Loaded{std::move(raw.features), binarize_majority(raw.targets), raw.dropped_rows};
    });

    const SplitSet splits = detail::stage(ds, "split", [&] {
        return standardize(stratified_split(data.features, data.labels, config.fractions, root.split(detail::split_stream).seed()));
    });
    const NetworkArch arch = NetworkArch::with_hidden(static_cast<int>(data.features.cols()), config.hidden);

    TrainConfig baseline_cfg = config.baseline;
    baseline_cfg.seed = root.split(detail::baseline_stream).seed();
    TrainConfig bnn_cfg = config.bnn;
    bnn_cfg.seed = root.split(detail::bnn_stream).seed();

    const NetworkFit baseline = detail::stage(ds, "baseline", [&] {
        return fit_network(splits.train(), splits.validation(), arch, baseline_cfg);
    });

    std::vector<std::pair<std::string, Calibrator>> calibrators = detail::stage(ds, "calibration", [&] {
        const Eigen::VectorXd scores =
            forward_batch(baseline.params, splits.calibration().features()).unaryExpr([](double f) { return logistic(f); });
        const ScoreSet cal(scores, splits.calibration().labels());
        std::vector<std::pair<std::string, Calibrator>> out;
        for (CalibrationMethod m : config.calibrators) out.emplace_back(method_name(m), fit_calibrator(m, cal));
        return out;
    });

    const BnnFit bnn = detail::stage(ds, "bnn", [&] { return fit_bnn(splits.train(), splits.validation(), arch, bnn_cfg); });

    return detail::stage(ds, "evaluate", [&] {
        const BinaryBatch& test = splits.test();
        ExperimentResult result;
        result.dataset = ds;
        result.test_labels = test.labels();
        result.test_features = test.features();
        result.test_indices = splits.indices(SplitRole::test);
        result.test_features_raw.resize(static_cast<Eigen::Index>(result.test_indices.size()), data.features.cols());
        for (std::size_t r = 0; r < result.test_indices.size(); ++r)
            result.test_features_raw.row(static_cast<Eigen::Index>(r)) = data.features.row(static_cast<Eigen::Index>(result.test_indices[r]));
        result.dropped_rows = data.dropped;
        for (std::size_t j = 0; j < 4; ++j) result.split_sizes[j] = splits.size(static_cast<SplitRole>(j));

        const Eigen::VectorXd scores = forward_batch(baseline.params, test.features()).unaryExpr([](double f) { return logistic(f); });
        const int tau_base = baseline.history.best_epoch;
        result.methods.push_back(
            detail::evaluate_method(method_uncalibrated, scores, test.labels(), tau_base, config.bins, config.probability_floor));
        for (const auto& [name, cal] : calibrators)
            result.methods.push_back(detail::evaluate_method(name, apply(cal, scores, config.probability_floor), test.labels(),
                                                             tau_base, config.bins, config.probability_floor));
        const Eigen::VectorXd vb =
            predictive_probabilities(bnn.lambda, arch, test.features(), bnn_cfg.draws_test, evaluation_seed(bnn_cfg));
        result.methods.push_back(detail::evaluate_method(method_var_bayes, vb, test.labels(), bnn.history.best_epoch,
                                                         config.bins, config.probability_floor));

        result.baseline_history = baseline.history;
        result.bnn_history = bnn.history;
        result.calibrators = calibrators;
        result.test_reads = splits.test_reads();
        return result;
    });
}

namespace detail {

inline void write_text(const fs::path& file, const std::string& content)
{
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + file.string());
}

inline nlohmann::json history_json(const TrainHistory& h)
{
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : h.epochs) epochs.push_back({e.epoch, e.objective, e.validation_loss});
    return {{"best_epoch", h.best_epoch}, {"clipped_steps", h.clipped_steps}, {"epochs", epochs}};
}

inline std::string format_double(double v)
{
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

}  // namespace detail

/// One CSV per method (reliability_<method>.csv) plus legend.csv with each
/// method's test log-loss.
inline void emit_reliability(const ExperimentResult& result, const fs::path& dir)
{
    fs::create_directories(dir);
    std::ostringstream legend;
    legend << "method,log_loss,file\n";
    for (const auto& m : result.methods) {
        const std::string file = "reliability_" + m.name + ".csv";
        std::ostringstream csv;
        m.curve.write_csv(csv);
        detail::write_text(dir / file, csv.str());
        legend << m.name << ',' << detail::format_double(m.log_loss) << ',' << file << '\n';
    }
    detail::write_text(dir / "legend.csv", legend.str());
}

inline std::string loss_row_csv(const ExperimentResult& r)
{
    std::ostringstream out;
    out << "dataset";
    for (const auto& m : r.methods) out << ',' << m.name;
    out << '\n' << r.dataset;
    for (const auto& m : r.methods) out << ',' << detail::format_double(m.log_loss);
    out << '\n';
    return out.str();
}

inline nlohmann::json to_json(const ExperimentResult& r, const ExperimentConfig& config)
{
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : r.methods)
        methods.push_back({{"name", m.name}, {"log_loss", m.log_loss}, {"brier", m.brier}, {"ece", m.ece}, {"tau", m.tau}});
    nlohmann::json cals = nlohmann::json::object();
    for (const auto& [name, c] : r.calibrators) cals[name] = to_json(c);
    return {{"dataset", r.dataset},
            {"config", to_json(config)},
            {"split_sizes",
             {{"train", r.split_sizes[0]}, {"validation", r.split_sizes[1]}, {"calibration", r.split_sizes[2]}, {"test", r.split_sizes[3]}}},
            {"dropped_rows", r.dropped_rows},
            {"methods", methods},
            {"calibrators", cals},
            {"baseline_history", detail::history_json(r.baseline_history)},
            {"bnn_history", detail::history_json(r.bnn_history)}};
}

/// predictions.csv: label, standardized features, then one column per method.
inline std::string predictions_csv(const ExperimentResult& r)
{
    std::ostringstream out;
    out.precision(17);
    out << "label";
    for (Eigen::Index c = 0; c < r.test_features.cols(); ++c) out << ",x" << c;
    for (const auto& m : r.methods) out << ',' << m.name;
    out << '\n';
    for (Eigen::Index i = 0; i < r.test_labels.size(); ++i) {
        out << static_cast<int>(r.test_labels[i]);
        for (Eigen::Index c = 0; c < r.test_features.cols(); ++c) out << ',' << r.test_features(i, c);
        for (const auto& m : r.methods) out << ',' << m.probs[i];
        out << '\n';
    }
    return out.str();
}

/// Writes results.json, predictions.csv, lossmatrix.csv (this dataset's row),
/// and the reliability CSVs into `dir`.
inline void write_experiment(const ExperimentResult& r, const ExperimentConfig& config, const fs::path& dir)
{
    fs::create_directories(dir);
    detail::write_text(dir / "results.json", to_json(r, config).dump(2) + "\n");
    detail::write_text(dir / "predictions.csv", predictions_csv(r));
    detail::write_text(dir / "lossmatrix.csv", loss_row_csv(r));
    emit_reliability(r, dir);
}

/// Runs one experiment and writes its files under config.output / config.name.
inline ExperimentResult run_experiment(const ExperimentConfig& config)
{
    ExperimentResult r = run_experiment_in_memory(config);
    detail::stage(config.name, "write", [&] {
        write_experiment(r, config, config.output / config.name);
        return 0;
    });
    return r;
}

/// Re-emits reliability curves from a predictions.csv written by run_experiment.
inline std::vector<std::pair<std::string, ReliabilityCurve>> reliability_from_predictions(const fs::path& file, std::size_t bins)
{
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open " + file.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("predictions file is empty", 1);
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    std::vector<std::size_t> method_cols;
    for (std::size_t c = 1; c < header.size(); ++c)
        if (!(header[c].size() > 1 && header[c][0] == 'x' && std::isdigit(static_cast<unsigned char>(header[c][1]))))
            method_cols.push_back(c);
    std::vector<double> labels;
    std::vector<std::vector<double>> probs(method_cols.size());
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != header.size()) throw ParseError("predictions: wrong number of fields", line_no);
        labels.push_back(std::stod(cells[0]));
        for (std::size_t k = 0; k < method_cols.size(); ++k) probs[k].push_back(std::stod(cells[method_cols[k]]));
    }
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(labels.data(), static_cast<Eigen::Index>(labels.size()));
    std::vector<std::pair<std::string, ReliabilityCurve>> out;
    for (std::size_t k = 0; k < method_cols.size(); ++k) {
        const Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(probs[k].data(), static_cast<Eigen::Index>(probs[k].size()));
        out.emplace_back(header[method_cols[k]], reliability_curve(PredictionSet(p, y), bins));
    }
    return out;
}

/// JSON + CSV summary of ranks, Friedman test, pairwise Wilcoxon-Holm and CD groups.
inline nlohmann::json stats_report(const LossMatrix& L, double alpha)
{
    const RankResult ranks = average_ranks(L);
    nlohmann::json report;
    report["datasets"] = L.datasets;
    report["methods"] = L.methods;
    report["alpha"] = alpha;
    std::vector<double> avg(ranks.average.data(), ranks.average.data() + ranks.average.size());
    report["avg_ranks"] = avg;
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < ranks.rows.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(ranks.rows.cols()));
        for (Eigen::Index j = 0; j < ranks.rows.cols(); ++j) r[static_cast<std::size_t>(j)] = ranks.rows(i, j);
        rows.push_back(r);
    }
    report["rank_rows"] = rows;
    try {
        const FriedmanResult f = friedman_test(L);
        report["friedman"] = {{"statistic", f.statistic},
                              {"p_value", f.p_value},
                              {"statistic_uncorrected", f.statistic_uncorrected},
                              {"p_value_uncorrected", f.p_value_uncorrected},
                              {"df", f.df},
                              {"reject_null", f.p_value < alpha}};
    } catch (const NumericalError& e) {
        report["friedman"] = {{"error", e.what()}};
    }
    const PairwiseSignificance sig = wilcoxon_holm(L, alpha);
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : sig.pairs)
        pairs.push_back({{"a", L.methods[p.first]},
                         {"b", L.methods[p.second]},
                         {"statistic", p.statistic},
                         {"p_raw", p.p_raw},
                         {"p_holm", p.p_holm},
                         {"significant", p.significant},
                         {"degenerate", p.degenerate},
                         {"exact", p.exact}});
    report["pairwise"] = pairs;
    report["critical_difference"] = to_json(critical_difference_data(ranks, sig));
    return report;
}

/// Writes lossmatrix.csv, report.json, ranks.csv, pairwise.csv and cd.json into `dir`.
inline nlohmann::json write_stats(const LossMatrix& L, double alpha, const fs::path& dir)
{
    fs::create_directories(dir);
    const nlohmann::json report = stats_report(L, alpha);
    std::ostringstream lm;
    write_loss_matrix(lm, L);
    detail::write_text(dir / "lossmatrix.csv", lm.str());
    detail::write_text(dir / "report.json", report.dump(2) + "\n");
    detail::write_text(dir / "cd.json", report["critical_difference"].dump(2) + "\n");

    std::ostringstream ranks;
    ranks << "method,avg_rank\n";
    for (std::size_t j = 0; j < L.methods.size(); ++j)
        ranks << L.methods[j] << ',' << detail::format_double(report["avg_ranks"][j].get<double>()) << '\n';
    detail::write_text(dir / "ranks.csv", ranks.str());

    std::ostringstream pw;
    pw << "a,b,statistic,p_raw,p_holm,significant\n";
    for (const auto& p : report["pairwise"])
        pw << p["a"].get<std::string>() << ',' << p["b"].get<std::string>() << ',' << detail::format_double(p["statistic"].get<double>())
           << ',' << detail::format_double(p["p_raw"].get<double>()) << ',' << detail::format_double(p["p_holm"].get<double>()) << ','
           << (p["significant"].get<bool>() ? 1 : 0) << '\n';
    detail::write_text(dir / "pairwise.csv", pw.str());
    return report;
}

/// Assembles the datasets x methods loss matrix. Every result must report the
/// same methods in the same order.
inline LossMatrix assemble_loss_matrix(const std::vector<ExperimentResult>& results)
{
    if (results.size() < 2) throw ConfigError("benchmark needs at least 2 completed experiments");
    std::vector<std::string> methods;
    for (const auto& m : results.front().methods) methods.push_back(m.name);
    std::vector<std::string> offenders;
    for (const auto& r : results) {
        std::vector<std::string> own;
        for (const auto& m : r.methods) own.push_back(m.name);
        if (own != methods) offenders.push_back(r.dataset);
    }
    if (!offenders.empty()) {
        std::string list;
        for (const auto& o : offenders) list += (list.empty() ? "" : ", ") + o;
        throw ConfigError("inconsistent method sets across datasets: " + list);
    }
    Eigen::MatrixXd values(static_cast<Eigen::Index>(results.size()), static_cast<Eigen::Index>(methods.size()));
    std::vector<std::string> names;
    for (std::size_t i = 0; i < results.size(); ++i) {
        names.push_back(results[i].dataset);
        for (std::size_t j = 0; j < methods.size(); ++j)
            values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = results[i].methods[j].log_loss;
    }
    return {std::move(values), std::move(names), std::move(methods)};
}

struct BenchmarkConfig {
    std::vector<ExperimentConfig> experiments;
    double alpha = 0.05;
    fs::path output = "bench";
    unsigned jobs = 1;
};

/// {"experiments": ["a.json", {...inline...}], "alpha", "output", "jobs"}.
inline BenchmarkConfig load_benchmark_config(const fs::path& file)
{
    const nlohmann::json j = read_json_file(file);
    const fs::path base = file.parent_path();
    try {
        BenchmarkConfig b;
        for (const auto& e : j.at("experiments")) {
            if (e.is_string()) {
                fs::path p = e.get<std::string>();
                if (p.is_relative()) p = base / p;
                b.experiments.push_back(load_experiment_config(p));
            } else {
                b.experiments.push_back(parse_experiment_config(e, base));
            }
        }
        b.alpha = j.value("alpha", b.alpha);
        if (!(b.alpha > 0.0 && b.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        b.output = j.value("output", std::string("bench"));
        if (b.output.is_relative()) b.output = base / b.output;
        b.jobs = j.value("jobs", 1u);
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid benchmark config: ") + e.what());
    }
}

struct BenchmarkOutcome {
    std::vector<ExperimentResult> results;
    std::vector<ExperimentError> errors;
    std::optional<LossMatrix> matrix;
    nlohmann::json report;
};

/// Runs every experiment (up to `jobs` concurrently; each owns its data and
/// random streams), writes per-dataset files under output/<name>, then the
/// consolidated stats into output. A failed dataset is recorded and skipped.
inline BenchmarkOutcome run_benchmark(const BenchmarkConfig& bench)
{
    BenchmarkOutcome outcome;
    std::vector<std::optional<ExperimentResult>> slots(bench.experiments.size());
    std::vector<std::optional<ExperimentError>> failures(bench.experiments.size());
    auto run_one = [&](std::size_t i) {
        ExperimentConfig cfg = bench.experiments[i];
        cfg.output = bench.output;
        try {
            slots[i] = run_experiment(cfg);
        } catch (const ExperimentError& e) {
            failures[i] = e;
        } catch (const std::exception& e) {
            failures[i] = ExperimentError(cfg.name, "unknown", e.what());
        }
    };
    const unsigned jobs = std::max(1u, bench.jobs);
    for (std::size_t start = 0; start < bench.experiments.size(); start += jobs) {
        std::vector<std::future<void>> batch;
        for (std::size_t i = start; i < std::min(bench.experiments.size(), start + jobs); ++i)
            batch.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, run_one, i));
        for (auto& f : batch) f.get();
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i]) outcome.results.push_back(std::move(*slots[i]));
        if (failures[i]) outcome.errors.push_back(*failures[i]);
    }

    nlohmann::json errors = nlohmann::json::array();
    for (const auto& e : outcome.errors)
        errors.push_back({{"dataset", e.dataset()}, {"stage", e.stage()}, {"message", e.message()}});

    fs::create_directories(bench.output);
    if (outcome.results.size() >= 2) {
        outcome.matrix = assemble_loss_matrix(outcome.results);
        outcome.report = write_stats(*outcome.matrix, bench.alpha, bench.output);
    } else {
        outcome.report = nlohmann::json::object();
        outcome.report["error"] = "fewer than 2 experiments completed";
    }
    outcome.report["errors"] = errors;
    detail::write_text(bench.output / "report.json", outcome.report.dump(2) + "\n");
    return outcome;
}

}  // namespace bnncal
