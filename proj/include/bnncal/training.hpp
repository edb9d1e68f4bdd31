#pragma once

// Full-batch training loops. One epoch is one gradient step on the whole
// train partition, followed by a validation log-loss evaluation; the
// parameters from the epoch with the lowest validation loss are returned.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bnncal/adam.hpp"
#include "bnncal/calibration.hpp"
#include "bnncal/data.hpp"
#include "bnncal/error.hpp"
#include "bnncal/metrics.hpp"
#include "bnncal/network.hpp"
#include "bnncal/random.hpp"
#include "bnncal/variational.hpp"

namespace bnncal {

struct TrainConfig {
    int max_epochs = 2000;
    double learning_rate = 1e-2;
    int factors = 1;              // K, variational path only
    int draws_validation = 50;
    int draws_test = 100;
    std::uint64_t seed = 0;
    double clip_norm = 1e4;
    double init_scale = 0.01;     // initial d, variational path only
    GradientForm gradient_form = GradientForm::path;
};

inline TrainConfig default_bnn_config() { return {}; }

inline TrainConfig default_baseline_config()
{
    TrainConfig c;
    c.max_epochs = 1000;
    c.learning_rate = 1e-3;
    return c;
}

/// `objective` is taken at the parameters entering the epoch, `validation_loss`
/// after its update.
struct EpochRecord {
    int epoch;
    double objective;        // ELBO estimate (variational) or train log-likelihood (baseline)
    double validation_loss;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    int clipped_steps = 0;

    [[nodiscard]] double best_validation_loss() const
    {
        for (const auto& e : epochs)
            if (e.epoch == best_epoch) return e.validation_loss;
        return std::numeric_limits<double>::quiet_NaN();
    }
};

class DivergenceError : public NumericalError {
public:
    DivergenceError(const std::string& what, int epoch, Eigen::VectorXd last_finite)
        : NumericalError(what), epoch_(epoch), last_finite_(std::move(last_finite))
    {
    }

    [[nodiscard]] int epoch() const noexcept { return epoch_; }
    /// Flattened parameters of the last finite state.
    [[nodiscard]] const Eigen::VectorXd& last_finite_state() const noexcept { return last_finite_; }

private:
    int epoch_;
    Eigen::VectorXd last_finite_;
};

/// Mean log-loss with probabilities clipped to [floor, 1 - floor].
inline double clipped_log_loss(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                               double floor = default_probability_floor)
{
    return log_loss(PredictionSet(probs.cwiseMax(floor).cwiseMin(1.0 - floor), labels));
}

/// Rescales `grad` in place to norm `limit` if it exceeds it. Returns whether it did.
inline bool clip_gradient(Eigen::VectorXd& grad, double limit)
{
    const double norm = grad.norm();
    if (!(norm > limit)) return false;
    grad *= limit / norm;
    return true;
}

namespace detail {

enum Stream : std::uint64_t { init_stream = 1, noise_stream = 2, validation_stream = 3, test_stream = 4 };

}  // namespace detail

/// Seed of the fixed evaluation stream used for test-time predictive draws.
inline std::uint64_t evaluation_seed(const TrainConfig& config)
{
    return Rng(config.seed).split(detail::test_stream).seed();
}

struct BnnFit {
    VariationalParams lambda;
    TrainHistory history;
};

/// Stochastic gradient ascent on the ELBO with ADAM, one noise draw and the
/// full train batch per epoch. Validation loss uses predictive probabilities
/// averaged over `draws_validation` samples from a fixed stream.
inline BnnFit fit_bnn(const BinaryBatch& train, const BinaryBatch& validation, const NetworkArch& arch,
                      const TrainConfig& config)
{
    require(!train.empty() && !validation.empty(), "fit_bnn: train and validation partitions must be non-empty");
    require(config.max_epochs >= 0, "fit_bnn: max_epochs must be non-negative");
    require(config.factors >= 0 && config.factors < arch.num_params(), "fit_bnn: need 0 <= K < m");

    const Rng root(config.seed);
    Rng init_rng = root.split(detail::init_stream);
    Rng noise_rng = root.split(detail::noise_stream);
    const std::uint64_t validation_seed = root.split(detail::validation_stream).seed();

    const NetworkLikelihood target(arch, train);
    const Eigen::Index m = arch.num_params();
    VariationalParams lambda = VariationalParams::around(init_network(arch, init_rng).theta(), config.factors, config.init_scale);
    AdamState adam = AdamState::for_size(lambda.num_params(), config.learning_rate);

    auto validation_loss = [&](const VariationalParams& l) {
        return clipped_log_loss(predictive_probabilities(l, arch, validation.features(), config.draws_validation, validation_seed),
                                validation.labels());
    };

    BnnFit fit{lambda, {}};
    {
        const NoiseDraw eps = draw_noise(lambda.factors(), m, noise_rng);
        fit.history.epochs.push_back({0, elbo_estimate(target, lambda, eps), validation_loss(lambda)});
    }
    double best = fit.history.epochs.front().validation_loss;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const NoiseDraw eps = draw_noise(lambda.factors(), m, noise_rng);
        const ElboGradient g = elbo_gradient_estimate(target, lambda, eps, config.gradient_form);
        Eigen::VectorXd grad = g.flatten();
        if (!std::isfinite(g.elbo) || !grad.allFinite())
            throw DivergenceError("fit_bnn: non-finite ELBO at epoch " + std::to_string(epoch), epoch, lambda.flatten());
        if (clip_gradient(grad, config.clip_norm)) ++fit.history.clipped_steps;

        auto step = adam_step(std::move(adam), lambda.flatten(), grad);
        adam = std::move(step.state);
        if (!step.vector.allFinite())
            throw DivergenceError("fit_bnn: parameters became non-finite at epoch " + std::to_string(epoch), epoch,
                                  lambda.flatten());
        lambda = VariationalParams::unflatten(step.vector, m, lambda.factors());

        const double loss = validation_loss(lambda);
        fit.history.epochs.push_back({epoch, g.elbo, loss});
        if (loss < best) {
            best = loss;
            fit.history.best_epoch = epoch;
            fit.lambda = lambda;
        }
    }
    return fit;
}

inline BnnFit fit_bnn(const SplitSet& splits, const NetworkArch& arch, const TrainConfig& config)
{
    return fit_bnn(splits.train(), splits.validation(), arch, config);
}

struct NetworkFit {
    NetworkParams params;
    TrainHistory history;
};

/// Maximum-likelihood training of the conventional network with ADAM.
inline NetworkFit fit_network(const BinaryBatch& train, const BinaryBatch& validation, const NetworkArch& arch,
                              const TrainConfig& config)
{
    require(!train.empty() && !validation.empty(), "fit_network: train and validation partitions must be non-empty");
    require(config.max_epochs >= 0, "fit_network: max_epochs must be non-negative");

    Rng init_rng = Rng(config.seed).split(detail::init_stream);
    const NetworkLikelihood target(arch, train);
    NetworkParams params = init_network(arch, init_rng);
    AdamState adam = AdamState::for_size(arch.num_params(), config.learning_rate);

    auto validation_loss = [&](const NetworkParams& p) {
        Eigen::VectorXd probs = forward_batch(p, validation.features()).unaryExpr([](double f) { return logistic(f); });
        return clipped_log_loss(probs, validation.labels());
    };

    NetworkFit fit{params, {}};
    fit.history.epochs.push_back({0, log_likelihood(params, train), validation_loss(params)});
    double best = fit.history.epochs.front().validation_loss;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        TargetEval eval = target.evaluate(params.theta());
        if (!std::isfinite(eval.value) || !eval.gradient.allFinite())
            throw DivergenceError("fit_network: non-finite log-likelihood at epoch " + std::to_string(epoch), epoch,
                                  params.theta());
        if (clip_gradient(eval.gradient, config.clip_norm)) ++fit.history.clipped_steps;
        auto step = adam_step(std::move(adam), params.theta(), eval.gradient);
        adam = std::move(step.state);
        if (!step.vector.allFinite())
            throw DivergenceError("fit_network: parameters became non-finite at epoch " + std::to_string(epoch), epoch,
                                  params.theta());
        params = NetworkParams(arch, std::move(step.vector));

        const double loss = validation_loss(params);
        fit.history.epochs.push_back({epoch, eval.value, loss});
        if (loss < best) {
            best = loss;
            fit.history.best_epoch = epoch;
            fit.params = params;
        }
    }
    return fit;
}

}  // namespace bnncal
