#include <cmath>

#include <gtest/gtest.h>

#include "bnncal/adam.hpp"

using namespace bnncal;

namespace {

// Textbook ADAM written out per coordinate, ascent form.
struct AdamOracle {
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-7;
    std::vector<double> m, v;
    int t = 0;

    void step(std::vector<double>& x, const std::vector<double>& g)
    {
        ++t;
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            x[i] += lr * mh / (std::sqrt(vh) + eps);
        }
    }
};

}  // namespace

TEST(Adam, ZeroGradientLeavesVector)
{
    AdamState s = AdamState::for_size(3, 0.01);
    s.first_moment = Eigen::Vector3d(0.5, -1.0, 2.0);
    s.second_moment = Eigen::Vector3d(1.0, 4.0, 9.0);
    s.step = 5;
    const Eigen::Vector3d x(1.0, 2.0, 3.0);
    const AdamResult fresh = adam_step(AdamState::for_size(3, 0.01), x, Eigen::Vector3d::Zero());
    EXPECT_EQ(fresh.vector, x);
    EXPECT_EQ(fresh.state.step, 1);
    const AdamResult r = adam_step(s, x, Eigen::Vector3d::Zero());
    EXPECT_TRUE(r.state.first_moment.isApprox(0.9 * s.first_moment));
    EXPECT_TRUE(r.state.second_moment.isApprox(0.999 * s.second_moment));
}

TEST(Adam, FirstStepHasMagnitudeLr)
{
    const Eigen::Vector3d g(2.0, -0.3, 40.0);
    const AdamResult r = adam_step(AdamState::for_size(3, 1e-3), Eigen::Vector3d::Zero(), g);
    for (int i = 0; i < 3; ++i) {
        // m_hat = g, v_hat = g^2
        const double expect = 1e-3 * g[i] / (std::abs(g[i]) + 1e-7);
        EXPECT_NEAR(r.vector[i], expect, 1e-18);
        EXPECT_GT(r.vector[i] * g[i], 0.0);
        EXPECT_GT(std::abs(r.vector[i]), 1e-3 * (1.0 - 1e-6));
    }
}

TEST(Adam, MatchesOracleOverSeveralSteps)
{
    AdamOracle o{0.05, 0.9, 0.999, 1e-7, std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
    std::vector<double> xo{0.1, -0.2, 3.0, 0.0};
    Eigen::Vector4d x(0.1, -0.2, 3.0, 0.0);
    AdamState s = AdamState::for_size(4, 0.05);
    const double grads[3][4] = {{1.0, -2.0, 0.5, 0.0}, {0.3, 0.1, -4.0, 1e-3}, {-1.0, 2.0, 0.0, 7.0}};
    for (const auto& gr : grads) {
        const Eigen::Vector4d g(gr[0], gr[1], gr[2], gr[3]);
        AdamResult r = adam_step(std::move(s), x, g);
        s = std::move(r.state);
        x = r.vector;
        o.step(xo, {gr[0], gr[1], gr[2], gr[3]});
        for (int i = 0; i < 4; ++i) EXPECT_NEAR(x[i], xo[i], 1e-12);
    }
    EXPECT_EQ(s.step, 3);
}

TEST(Adam, AscendsAConcaveQuadratic)
{
    Eigen::Vector2d x(3.0, -2.0);
    AdamState s = AdamState::for_size(2, 0.05);
    for (int it = 0; it < 2000; ++it) {
        AdamResult r = adam_step(std::move(s), x, -2.0 * (x - Eigen::Vector2d(1.0, 1.0)));
        s = std::move(r.state);
        x = r.vector;
    }
    EXPECT_NEAR(x[0], 1.0, 1e-3);
    EXPECT_NEAR(x[1], 1.0, 1e-3);
}

TEST(Adam, LengthMismatch)
{
    EXPECT_THROW(adam_step(AdamState::for_size(2, 0.1), Eigen::Vector2d::Zero(), Eigen::Vector3d::Zero()), ContractViolation);
    EXPECT_THROW(adam_step(AdamState::for_size(3, 0.1), Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()), ContractViolation);
}
