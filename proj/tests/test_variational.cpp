#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "bnncal/variational.hpp"
#include "test_util.hpp"

using namespace bnncal;

namespace {

VariationalParams random_lambda(Rng& rng, Eigen::Index m, Eigen::Index k, double d_low = 0.3)
{
    Eigen::VectorXd d(m);
    for (Eigen::Index i = 0; i < m; ++i) d[i] = d_low + rng.uniform();
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(m, k);
    for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index i = j; i < m; ++i) B(i, j) = 0.5 * rng.normal();
    return {rng.normal_vector(m), d, B};
}

Eigen::MatrixXd dense_sigma(const VariationalParams& l)
{
    return l.B() * l.B().transpose() + Eigen::MatrixXd(l.d().cwiseAbs2().asDiagonal());
}

double dense_log_density(const VariationalParams& l, const Eigen::VectorXd& theta)
{
    const Eigen::LLT<Eigen::MatrixXd> llt(dense_sigma(l));
    const Eigen::MatrixXd L = llt.matrixL();
    const Eigen::VectorXd w = L.triangularView<Eigen::Lower>().solve(theta - l.mu());
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += 2.0 * std::log(L(i, i));
    return -0.5 * (static_cast<double>(l.dim()) * std::log(2.0 * std::numbers::pi) + logdet + w.squaredNorm());
}

BinaryBatch random_batch(Rng& rng, int n, int p)
{
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < p; ++j) X(i, j) = rng.normal();
        y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    return {X, y};
}

// Probabilists' Gauss-Hermite rule (weight exp(-x^2/2)/sqrt(2 pi)) by Golub-Welsch.
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int n)
{
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    Eigen::VectorXd w = es.eigenvectors().row(0).transpose().cwiseAbs2();
    return {es.eigenvalues(), w / w.sum()};
}

// y_i ~ N(theta, 1), flat prior.
struct GaussianMeanTarget {
    Eigen::VectorXd y;

    [[nodiscard]] Eigen::Index dim() const { return 1; }
    [[nodiscard]] double log_density(const Eigen::VectorXd& t) const
    {
        const double n = static_cast<double>(y.size());
        return -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * (y.array() - t[0]).square().sum();
    }
    [[nodiscard]] TargetEval evaluate(const Eigen::VectorXd& t) const
    {
        return {log_density(t), Eigen::VectorXd::Constant(1, (y.array() - t[0]).sum())};
    }
};

}  // namespace

TEST(Variational, FlattenRoundTrip)
{
    Rng rng(1);
    const VariationalParams l = random_lambda(rng, 6, 3);
    EXPECT_EQ(l.num_params(), 2 * 6 + 6 + 5 + 4);
    const VariationalParams back = VariationalParams::unflatten(l.flatten(), 6, 3);
    EXPECT_EQ(back.mu(), l.mu());
    EXPECT_EQ(back.d(), l.d());
    EXPECT_EQ(back.B(), l.B());
}

TEST(Variational, ShapeContracts)
{
    Eigen::MatrixXd B = Eigen::MatrixXd::Ones(3, 2);
    EXPECT_THROW(VariationalParams(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3), B), ContractViolation);
    B(0, 1) = 0.0;
    EXPECT_NO_THROW(VariationalParams(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3), B));
    EXPECT_THROW(VariationalParams(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Zero(2, 2)),
                 ContractViolation);
    EXPECT_THROW(VariationalParams(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(3), Eigen::MatrixXd::Zero(2, 1)),
                 ContractViolation);
}

TEST(SampleTheta, ZeroNoiseIsMean)
{
    Rng rng(2);
    const VariationalParams l = random_lambda(rng, 5, 2);
    EXPECT_EQ(sample_theta(l, {Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(5)}), l.mu());
}

TEST(SampleTheta, UnitDiagonal)
{
    Rng rng(3);
    const VariationalParams l(rng.normal_vector(4), Eigen::VectorXd::Ones(4), Eigen::MatrixXd::Zero(4, 1));
    const NoiseDraw e = draw_noise(1, 4, rng);
    EXPECT_EQ(sample_theta(l, e), l.mu() + e.eta);
}

TEST(SampleTheta, MatchesDenseOracle)
{
    Rng rng(4);
    const VariationalParams l = random_lambda(rng, 3, 2);
    const NoiseDraw e = draw_noise(2, 3, rng);
    Eigen::MatrixXd BD(3, 5);
    BD << l.B(), Eigen::MatrixXd(l.d().asDiagonal());
    Eigen::VectorXd eps(5);
    eps << e.z, e.eta;
    EXPECT_LT((sample_theta(l, e) - (l.mu() + BD * eps)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_THROW(sample_theta(l, {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(3)}), ContractViolation);
}

TEST(SampleTheta, EmpiricalCovariance)
{
    Rng rng(5);
    const VariationalParams l = random_lambda(rng, 5, 2);
    const int n = 100000;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(5, 5);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(5);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd t = sample_theta(l, draw_noise(2, 5, rng));
        mean += t;
        S += (t - l.mu()) * (t - l.mu()).transpose();
    }
    S /= n;
    mean /= n;
    const Eigen::MatrixXd sigma = dense_sigma(l);
    EXPECT_LT((S - sigma).norm() / sigma.norm(), 0.05);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(mean[i], l.mu()[i], 4.0 * std::sqrt(sigma(i, i) / n));
}

TEST(LogQ, StandardNormalAtMode)
{
    const VariationalParams l(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), Eigen::MatrixXd(1, 0));
    EXPECT_NEAR(log_q(l, Eigen::VectorXd::Zero(1)), -0.9189385332046727, 1e-15);
}

TEST(LogQ, MatchesDenseCholesky)
{
    Rng rng(6);
    for (Eigen::Index m = 1; m <= 5; ++m)
        for (Eigen::Index k = 0; k < m; ++k)
            for (int rep = 0; rep < 5; ++rep) {
                const VariationalParams l = random_lambda(rng, m, k);
                const Eigen::VectorXd theta = l.mu() + rng.normal_vector(m);
                EXPECT_NEAR(log_q(l, theta), dense_log_density(l, theta), 1e-10) << "m=" << m << " K=" << k;
            }
}

TEST(LogQ, ModeIsMaximal)
{
    Rng rng(7);
    const VariationalParams l = random_lambda(rng, 4, 1);
    const double top = log_q(l, l.mu());
    for (int rep = 0; rep < 50; ++rep) EXPECT_LT(log_q(l, l.mu() + 1e-3 * rng.normal_vector(4)), top);
}

TEST(LogQ, SingularDiagonal)
{
    VariationalParams l(Eigen::VectorXd::Zero(3), Eigen::Vector3d(1.0, 0.0, 1.0), Eigen::MatrixXd::Zero(3, 1));
    EXPECT_THROW(log_q(l, Eigen::VectorXd::Zero(3)), NumericalError);
}

TEST(FactorCovariance, WoodburyAgainstDense)
{
    Rng rng(8);
    for (Eigen::Index k = 0; k <= 3; ++k) {
        const VariationalParams l = random_lambda(rng, 7, k);
        const FactorCovariance cov(l);
        const Eigen::MatrixXd sigma = dense_sigma(l);
        const Eigen::MatrixXd inv = sigma.inverse();
        const Eigen::VectorXd r = rng.normal_vector(7);
        EXPECT_LT((cov.solve(r) - inv * r).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((cov.inverse_diagonal() - inv.diagonal()).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_NEAR(cov.log_det(), std::log(sigma.determinant()), 1e-10);
        if (k > 0) {
            EXPECT_LT((cov.solve_loadings() - inv * l.B()).cwiseAbs().maxCoeff(), 1e-10);
        }
    }
}

TEST(GradLogQ, FiniteDifferences)
{
    Rng rng(9);
    const VariationalParams l = random_lambda(rng, 6, 2);
    const Eigen::VectorXd theta = l.mu() + rng.normal_vector(6);
    const Eigen::VectorXd fd = test::central_difference([&](const Eigen::VectorXd& t) { return log_q(l, t); }, theta);
    EXPECT_LT(test::max_relative_error(grad_log_q(l, theta), fd), 1e-7);
}

TEST(Elbo, SingleDrawReproducible)
{
    Rng rng(10);
    const NetworkArch a({2, 3, 1});
    const BinaryBatch b = random_batch(rng, 20, 2);
    const VariationalParams l = random_lambda(rng, a.num_params(), 1);
    Rng r1(77), r2(77);
    const double e1 = elbo_estimate(a, b, l, draw_noise(1, a.num_params(), r1));
    const double e2 = elbo_estimate(a, b, l, draw_noise(1, a.num_params(), r2));
    EXPECT_EQ(e1, e2);
    Rng r3(77);
    EXPECT_EQ(e1, elbo_gradient_estimate(a, b, l, draw_noise(1, a.num_params(), r3)).elbo);
}

TEST(Elbo, ConjugateGaussianHasZeroGap)
{
    // q equal to the exact posterior N(ybar, 1/n): every draw returns log p(y)
    Rng rng(11);
    GaussianMeanTarget target{rng.normal_vector(9).array() + 1.5};
    const double n = 9.0;
    const double ybar = target.y.mean();
    const double ss = (target.y.array() - ybar).square().sum();
    const double log_evidence = -0.5 * (n - 1.0) * std::log(2.0 * std::numbers::pi) - 0.5 * std::log(n) - 0.5 * ss;
    const VariationalParams post(Eigen::VectorXd::Constant(1, ybar), Eigen::VectorXd::Constant(1, 1.0 / std::sqrt(n)),
                                 Eigen::MatrixXd(1, 0));
    for (int rep = 0; rep < 20; ++rep) EXPECT_NEAR(elbo_estimate(target, post, draw_noise(0, 1, rng)), log_evidence, 1e-10);

    // path form: grad log h and grad log q cancel draw by draw
    const ElboGradient g = elbo_gradient_estimate(target, post, draw_noise(0, 1, rng), GradientForm::path);
    EXPECT_NEAR(g.mu[0], 0.0, 1e-10);
    EXPECT_NEAR(g.d[0], 0.0, 1e-10);
}

TEST(ElboGradient, TotalFormMatchesFiniteDifferences)
{
    Rng rng(12);
    const NetworkArch a({2, 3, 2, 1});
    const BinaryBatch b = random_batch(rng, 25, 2);
    for (Eigen::Index k = 0; k <= 3; ++k) {
        const VariationalParams l = random_lambda(rng, a.num_params(), k);
        const NoiseDraw e = draw_noise(k, a.num_params(), rng);
        const Eigen::VectorXd g = elbo_gradient_estimate(a, b, l, e).flatten();
        const Eigen::VectorXd fd = test::central_difference(
            [&](const Eigen::VectorXd& flat) {
                return elbo_estimate(a, b, VariationalParams::unflatten(flat, a.num_params(), k), e);
            },
            l.flatten());
        EXPECT_LT(test::max_relative_error(g, fd), 1e-4) << "K=" << k;
    }
}

TEST(ElboGradient, PathFormIsJacobianTimesScoreDifference)
{
    Rng rng(13);
    const NetworkArch a({2, 3, 1});
    const BinaryBatch b = random_batch(rng, 15, 2);
    const Eigen::Index m = a.num_params();
    const VariationalParams l(rng.normal_vector(m), Eigen::VectorXd::Constant(m, 0.4), Eigen::MatrixXd::Zero(m, 1));
    const NoiseDraw e = draw_noise(1, m, rng);
    const Eigen::VectorXd theta = l.mu() + l.d().cwiseProduct(e.eta);
    const Eigen::VectorXd diff = grad_log_likelihood(NetworkParams(a, theta), b) - grad_log_q(l, theta);
    const ElboGradient g = elbo_gradient_estimate(a, b, l, e, GradientForm::path);
    EXPECT_LT((g.mu - diff).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((g.d - diff.cwiseProduct(e.eta)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((g.B - diff * e.z.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ElboGradient, StructuralZerosStayZero)
{
    Rng rng(14);
    const NetworkArch a({2, 2, 1});
    const BinaryBatch b = random_batch(rng, 10, 2);
    const VariationalParams l = random_lambda(rng, a.num_params(), 3);
    for (GradientForm f : {GradientForm::path, GradientForm::total}) {
        const ElboGradient g = elbo_gradient_estimate(a, b, l, draw_noise(3, a.num_params(), rng), f);
        for (Eigen::Index j = 0; j < 3; ++j)
            for (Eigen::Index i = 0; i < j; ++i) EXPECT_EQ(g.B(i, j), 0.0);
    }
}

namespace {

// m = 2 (one weight, one bias), K = 1: expectations over (z, eta1, eta2) by a 3-d product rule.
struct QuadratureCase {
    NetworkArch arch{std::vector<int>{1, 1}};
    BinaryBatch batch;
    VariationalParams lambda;
};

QuadratureCase make_quadrature_case()
{
    Eigen::MatrixXd X(6, 1);
    X << -1.5, -0.4, 0.1, 0.7, 1.2, 2.0;
    Eigen::VectorXd y(6);
    y << 0, 1, 0, 1, 1, 1;
    Eigen::MatrixXd B(2, 1);
    B << 0.3, -0.2;
    return {NetworkArch({1, 1}), BinaryBatch(X, y), VariationalParams(Eigen::Vector2d(0.8, 0.1), Eigen::Vector2d(0.4, 0.5), B)};
}

}  // namespace

TEST(Elbo, MonteCarloMatchesQuadrature)
{
    const QuadratureCase c = make_quadrature_case();
    const auto [x, w] = gauss_hermite(24);
    const NetworkLikelihood target(c.arch, c.batch);
    double expected_h = 0.0;
    for (int i = 0; i < x.size(); ++i)
        for (int j = 0; j < x.size(); ++j)
            for (int k = 0; k < x.size(); ++k) {
                const NoiseDraw e{Eigen::VectorXd::Constant(1, x[i]), Eigen::Vector2d(x[j], x[k])};
                expected_h += w[i] * w[j] * w[k] * target.log_density(sample_theta(c.lambda, e));
            }
    const double entropy = 0.5 * std::log(std::pow(2.0 * std::numbers::pi * std::numbers::e, 2) * dense_sigma(c.lambda).determinant());
    const double exact = expected_h + entropy;

    Rng rng(15);
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int s = 0; s < n; ++s) {
        const double v = elbo_estimate(target, c.lambda, draw_noise(1, 2, rng));
        sum += v;
        sum2 += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    EXPECT_LT(std::abs(mean - exact), 3.0 * se) << "mean " << mean << " exact " << exact << " se " << se;
}

TEST(ElboGradient, MonteCarloMatchesQuadrature)
{
    const QuadratureCase c = make_quadrature_case();
    const auto [x, w] = gauss_hermite(24);
    const NetworkLikelihood target(c.arch, c.batch);
    const Eigen::Index np = c.lambda.num_params();  // mu(2), d(2), B(2)

    // pathwise part: E[(dtheta/dlambda)' grad log h]; entropy part: (Sigma^-1 B, diag(Sigma^-1) d)
    Eigen::VectorXd exact = Eigen::VectorXd::Zero(np);
    for (int i = 0; i < x.size(); ++i)
        for (int j = 0; j < x.size(); ++j)
            for (int k = 0; k < x.size(); ++k) {
                const NoiseDraw e{Eigen::VectorXd::Constant(1, x[i]), Eigen::Vector2d(x[j], x[k])};
                const Eigen::VectorXd gh = target.evaluate(sample_theta(c.lambda, e)).gradient;
                Eigen::VectorXd v(np);
                v << gh, gh.cwiseProduct(e.eta), gh * x[i];
                exact += w[i] * w[j] * w[k] * v;
            }
    const Eigen::MatrixXd inv = dense_sigma(c.lambda).inverse();
    exact.segment(2, 2) += inv.diagonal().cwiseProduct(c.lambda.d());
    exact.tail(2) += inv * c.lambda.B();

    for (GradientForm form : {GradientForm::path, GradientForm::total}) {
        Rng rng(16);
        const int n = 10000;
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(np), sum2 = Eigen::VectorXd::Zero(np);
        for (int s = 0; s < n; ++s) {
            const Eigen::VectorXd g = elbo_gradient_estimate(target, c.lambda, draw_noise(1, 2, rng), form).flatten();
            sum += g;
            sum2 += g.cwiseAbs2();
        }
        const Eigen::VectorXd mean = sum / n;
        const Eigen::VectorXd se = ((sum2 / n - mean.cwiseAbs2()) / n).cwiseSqrt();
        for (Eigen::Index i = 0; i < np; ++i)
            EXPECT_LT(std::abs(mean[i] - exact[i]), 3.0 * se[i])
                << (form == GradientForm::path ? "path" : "total") << " coordinate " << i << ": " << mean[i] << " vs " << exact[i];
    }
}

TEST(Predictive, PointMassLimit)
{
    Rng rng(17);
    const NetworkArch a({2, 4, 4, 1});
    const VariationalParams l = VariationalParams::around(rng.normal_vector(a.num_params()), 1, 1e-9);
    const Eigen::Vector2d x(0.3, -0.8);
    EXPECT_NEAR(predictive_probability(l, a, x, 20, 1), logistic(forward(NetworkParams(a, l.mu()), x)), 1e-8);
}

TEST(Predictive, SingleDraw)
{
    Rng rng(18);
    const NetworkArch a({2, 3, 1});
    const VariationalParams l = random_lambda(rng, a.num_params(), 2);
    const Eigen::Vector2d x(1.0, 0.5);
    Rng stream(99);
    const NoiseDraw e = draw_noise(2, a.num_params(), stream);
    EXPECT_EQ(predictive_probability(l, a, x, 1, 99), logistic(forward(sample_theta(l, a, e), x)));
}

TEST(Predictive, RowsAgreeWithSingleCalls)
{
    Rng rng(19);
    const NetworkArch a({3, 4, 1});
    const VariationalParams l = random_lambda(rng, a.num_params(), 1);
    const BinaryBatch b = random_batch(rng, 7, 3);
    const Eigen::VectorXd p = predictive_probabilities(l, a, b.features(), 30, 5);
    for (Eigen::Index i = 0; i < 7; ++i)
        EXPECT_NEAR(p[i], predictive_probability(l, a, b.features().row(i).transpose(), 30, 5), 1e-15);
    EXPECT_THROW(predictive_probabilities(l, a, b.features(), 0, 5), ContractViolation);
}

TEST(Predictive, MonteCarloConvergence)
{
    Rng rng(20);
    const NetworkArch a({2, 3, 1});
    const VariationalParams l = random_lambda(rng, a.num_params(), 1);
    const Eigen::Vector2d x(0.2, 0.9);
    const double reference = predictive_probability(l, a, x, 1000000, 1);
    EXPECT_NEAR(predictive_probability(l, a, x, 10000, 2), reference, 0.01);
}
