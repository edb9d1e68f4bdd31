// bnncal: calibration benchmark driver.
//
//   bnncal toy         [--config f] [--seed s] [--out dir] [--bins n]
//   bnncal run         --config f [--seed s] [--out dir] [--bins n]
//   bnncal bench       --config f [--out dir] [--alpha a]
//   bnncal stats       --input lossmatrix.csv [--out dir] [--alpha a]
//   bnncal reliability --input predictions.csv [--out dir] [--bins n]

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bnncal/bnncal.hpp"

namespace fs = std::filesystem;
using namespace bnncal;

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> bins;
    std::optional<double> alpha;
};

void apply(ExperimentConfig& c, const Overrides& o)
{
    if (o.seed) c.seed = *o.seed;
    if (o.out) c.output = *o.out;
    if (o.bins) c.bins = *o.bins;
}

int fail(const std::string& kind, const std::string& message, int code = 1)
{
    nlohmann::json err{{"error", kind}, {"message", message}};
    std::cerr << err.dump() << '\n';
    return code;
}

void report(const ExperimentResult& r, const ExperimentConfig& c)
{
    std::cout << r.dataset << " (train " << r.split_sizes[0] << ", validation " << r.split_sizes[1] << ", calibration "
              << r.split_sizes[2] << ", test " << r.split_sizes[3] << ")\n";
    if (r.dropped_rows > 0) std::clog << "dropped " << r.dropped_rows << " rows with missing values\n";
    if (r.bnn_history.clipped_steps > 0) std::clog << "BNN gradient clipped on " << r.bnn_history.clipped_steps << " steps\n";
    if (r.baseline_history.clipped_steps > 0)
        std::clog << "baseline gradient clipped on " << r.baseline_history.clipped_steps << " steps\n";
    for (const auto& m : r.methods)
        std::cout << "  " << m.name << ": log_loss " << m.log_loss << ", brier " << m.brier << ", ece " << m.ece << ", tau " << m.tau
                  << '\n';
    std::cout << "results written to " << (c.output / c.name).string() << '\n';
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Bayesian neural network vs. post-hoc calibration benchmark"};
    app.require_subcommand(1);

    Overrides o;
    std::string config_path;
    std::string input_path;
    std::size_t toy_samples = 10000;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "random seed");
        sub->add_option("--out", o.out, "output directory");
    };

    auto* toy = app.add_subcommand("toy", "generate the synthetic two-covariate data set and run the protocol on it");
    toy->add_option("--config", config_path, "experiment config overriding the toy defaults");
    toy->add_option("--samples", toy_samples, "number of generated rows")->check(CLI::PositiveNumber);
    toy->add_option("--bins", o.bins, "calibration bins")->check(CLI::PositiveNumber);
    add_common(toy);

    auto* run = app.add_subcommand("run", "run the protocol on one data set");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--bins", o.bins, "calibration bins")->check(CLI::PositiveNumber);
    add_common(run);

    auto* bench = app.add_subcommand("bench", "run every configured experiment and compare the methods");
    bench->add_option("--config", config_path, "benchmark config (JSON)")->required();
    bench->add_option("--out", o.out, "output directory");
    bench->add_option("--alpha", o.alpha, "significance level")->check(CLI::Range(0.0, 1.0));

    auto* stats = app.add_subcommand("stats", "rank statistics over an existing loss matrix CSV");
    stats->add_option("--input", input_path, "loss matrix CSV (datasets x methods)")->required();
    stats->add_option("--config", config_path, "optional JSON with {\"alpha\"}");
    stats->add_option("--out", o.out, "output directory");
    stats->add_option("--alpha", o.alpha, "significance level")->check(CLI::Range(0.0, 1.0));

    auto* rel = app.add_subcommand("reliability", "re-emit reliability curves from predictions.csv");
    rel->add_option("--input", input_path, "predictions.csv written by run/toy")->required();
    rel->add_option("--out", o.out, "output directory (defaults to the input's directory)");
    rel->add_option("--bins", o.bins, "calibration bins")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*toy) {
            ExperimentConfig c = config_path.empty() ? parse_experiment_config(nlohmann::json::object())
                                                     : load_experiment_config(config_path);
            if (!c.is_toy()) return fail("config", "toy expects a config without a dataset schema", 2);
            if (toy->count("--samples") > 0) c.toy_samples = toy_samples;
            apply(c, o);
            report(run_experiment(c), c);
        } else if (*run) {
            ExperimentConfig c = load_experiment_config(config_path);
            apply(c, o);
            report(run_experiment(c), c);
        } else if (*bench) {
            BenchmarkConfig b = load_benchmark_config(config_path);
            if (o.alpha) b.alpha = *o.alpha;
            if (o.out) b.output = *o.out;
            const BenchmarkOutcome outcome = run_benchmark(b);
            for (const auto& e : outcome.errors) {
                nlohmann::json err{{"error", "experiment"}, {"dataset", e.dataset()}, {"stage", e.stage()}, {"message", e.message()}};
                std::cerr << err.dump() << '\n';
            }
            if (!outcome.matrix) return fail("benchmark", "fewer than 2 experiments completed");
            std::cout << outcome.report.dump(2) << '\n';
            if (!outcome.errors.empty()) return 3;
        } else if (*stats) {
            double alpha = 0.05;
            if (!config_path.empty()) alpha = read_json_file(config_path).value("alpha", alpha);
            if (o.alpha) alpha = *o.alpha;
            const LossMatrix L = read_loss_matrix(input_path);
            const fs::path out = o.out ? fs::path(*o.out) : fs::path(input_path).parent_path() / "stats";
            std::cout << write_stats(L, alpha, out).dump(2) << '\n';
        } else if (*rel) {
            const std::size_t bins = o.bins.value_or(10);
            const fs::path out = o.out ? fs::path(*o.out) : fs::path(input_path).parent_path();
            fs::create_directories(out);
            for (const auto& [name, curve] : reliability_from_predictions(input_path, bins)) {
                const fs::path file = out / ("reliability_" + name + ".csv");
                std::ofstream f(file);
                if (!f) return fail("io", "cannot write " + file.string());
                curve.write_csv(f);
                std::cout << file.string() << '\n';
            }
        }
    } catch (const ExperimentError& e) {
        nlohmann::json err{{"error", "experiment"}, {"dataset", e.dataset()}, {"stage", e.stage()}, {"message", e.message()}};
        std::cerr << err.dump() << '\n';
        return 1;
    } catch (const ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const ParseError& e) {
        return fail("parse", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what());
    }
    return EXIT_SUCCESS;
}
