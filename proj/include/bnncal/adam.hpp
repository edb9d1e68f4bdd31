#pragma once

#include <cmath>
#include <utility>

#include <Eigen/Core>

#include "bnncal/error.hpp"

namespace bnncal {

struct AdamState {
    long step = 0;
    Eigen::VectorXd first_moment;
    Eigen::VectorXd second_moment;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;

    static AdamState for_size(Eigen::Index n, double learning_rate)
    {
        AdamState s;
        s.first_moment = Eigen::VectorXd::Zero(n);
        s.second_moment = Eigen::VectorXd::Zero(n);
        s.learning_rate = learning_rate;
        return s;
    }
};

struct AdamResult {
    Eigen::VectorXd vector;
    AdamState state;
};

/// One bias-corrected ADAM step in the ascent direction (maximizes the objective whose gradient is `grad`).
inline AdamResult adam_step(AdamState state, Eigen::VectorXd vector, const Eigen::Ref<const Eigen::VectorXd>& grad)
{
    require(vector.size() == grad.size(), "adam_step: gradient length differs from vector length");
    require(state.first_moment.size() == vector.size() && state.second_moment.size() == vector.size(),
            "adam_step: moment length differs from vector length");
    require(state.learning_rate > 0.0 && state.epsilon > 0.0, "adam_step: learning rate and epsilon must be positive");
    require(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0,
            "adam_step: betas must lie in (0, 1)");

    state.step += 1;
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    vector.array() += state.learning_rate * (state.first_moment.array() / c1) /
                      ((state.second_moment.array() / c2).sqrt() + state.epsilon);
    return {std::move(vector), std::move(state)};
}

}  // namespace bnncal
