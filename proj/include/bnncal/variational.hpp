#pragma once

// Gaussian variational family with factor covariance Sigma = B B' + D^2,
// reparameterized as theta = mu + B z + d .* eta with z ~ N(0, I_K),
// eta ~ N(0, I_m).
//
// B is lower-trapezoidal (B(i, j) = 0 for j > i); only those free entries
// are optimized and they are flattened column-major after mu and d. With the
// default K = 1 every entry of B is free.
//
// All density and gradient evaluations go through the Woodbury identity and
// the matrix-determinant lemma, so nothing of size m x m is ever formed.

#include <algorithm>
#include <cmath>
#include <string>
#include <concepts>
#include <numbers>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "bnncal/error.hpp"
#include "bnncal/network.hpp"
#include "bnncal/random.hpp"

namespace bnncal {

class VariationalParams {
public:
    VariationalParams(Eigen::VectorXd mu, Eigen::VectorXd d, Eigen::MatrixXd B)
        : mu_(std::move(mu)), d_(std::move(d)), B_(std::move(B))
    {
        require(d_.size() == mu_.size() && B_.rows() == mu_.size(), "VariationalParams: mu, d and B disagree on m");
        require(B_.cols() < mu_.size(), "VariationalParams: factor count K must be smaller than m");
        require(mu_.allFinite() && d_.allFinite() && B_.allFinite(), "VariationalParams: non-finite entry");
        for (Eigen::Index j = 0; j < B_.cols(); ++j)
            for (Eigen::Index i = 0; i < std::min(j, B_.rows()); ++i)
                require(B_(i, j) == 0.0, "VariationalParams: B must be lower-trapezoidal");
    }

    /// mu from `center`, d = `scale` everywhere, B = 0 with `factors` columns.
    static VariationalParams around(const Eigen::VectorXd& center, Eigen::Index factors, double scale)
    {
        return {center, Eigen::VectorXd::Constant(center.size(), scale), Eigen::MatrixXd::Zero(center.size(), factors)};
    }

    [[nodiscard]] const Eigen::VectorXd& mu() const noexcept { return mu_; }
    [[nodiscard]] const Eigen::VectorXd& d() const noexcept { return d_; }
    [[nodiscard]] const Eigen::MatrixXd& B() const noexcept { return B_; }
    [[nodiscard]] Eigen::Index dim() const noexcept { return mu_.size(); }
    [[nodiscard]] Eigen::Index factors() const noexcept { return B_.cols(); }

    /// Number of free entries in B.
    [[nodiscard]] Eigen::Index num_free_loadings() const noexcept { return free_loadings(dim(), factors()); }
    [[nodiscard]] Eigen::Index num_params() const noexcept { return 2 * dim() + num_free_loadings(); }

    static Eigen::Index free_loadings(Eigen::Index m, Eigen::Index k) noexcept
    {
        Eigen::Index n = 0;
        for (Eigen::Index j = 0; j < k; ++j) n += m - j;
        return n;
    }

    /// (mu, d, vech(B)).
    [[nodiscard]] Eigen::VectorXd flatten() const
    {
        Eigen::VectorXd out(num_params());
        out.head(dim()) = mu_;
        out.segment(dim(), dim()) = d_;
        Eigen::Index k = 2 * dim();
        for (Eigen::Index j = 0; j < factors(); ++j)
            for (Eigen::Index i = j; i < dim(); ++i) out[k++] = B_(i, j);
        return out;
    }

    static VariationalParams unflatten(const Eigen::Ref<const Eigen::VectorXd>& flat, Eigen::Index m, Eigen::Index factors)
    {
        require(flat.size() == 2 * m + free_loadings(m, factors), "VariationalParams::unflatten: length mismatch");
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(m, factors);
        Eigen::Index k = 2 * m;
        for (Eigen::Index j = 0; j < factors; ++j)
            for (Eigen::Index i = j; i < m; ++i) B(i, j) = flat[k++];
        return {flat.head(m), flat.segment(m, m), std::move(B)};
    }

private:
    Eigen::VectorXd mu_;
    Eigen::VectorXd d_;
    Eigen::MatrixXd B_;
};

struct NoiseDraw {
    Eigen::VectorXd z;    // length K
    Eigen::VectorXd eta;  // length m
};

/// z is drawn before eta.
inline NoiseDraw draw_noise(Eigen::Index factors, Eigen::Index m, Rng& rng)
{
    NoiseDraw eps;
    eps.z = rng.normal_vector(factors);
    eps.eta = rng.normal_vector(m);
    return eps;
}

/// theta = mu + B z + d .* eta.
inline Eigen::VectorXd sample_theta(const VariationalParams& lambda, const NoiseDraw& eps)
{
    require(eps.z.size() == lambda.factors() && eps.eta.size() == lambda.dim(),
            "sample_theta: noise shape does not match variational parameters");
    Eigen::VectorXd theta = lambda.mu() + lambda.d().cwiseProduct(eps.eta);
    if (lambda.factors() > 0) theta.noalias() += lambda.B() * eps.z;
    return theta;
}

inline NetworkParams sample_theta(const VariationalParams& lambda, const NetworkArch& arch, const NoiseDraw& eps)
{
    return {arch, sample_theta(lambda, eps)};
}

/// Woodbury factorization of Sigma = B B' + D^2.
class FactorCovariance {
public:
    explicit FactorCovariance(const VariationalParams& lambda) : B_(lambda.B())
    {
        const Eigen::VectorXd& d = lambda.d();
        for (Eigen::Index i = 0; i < d.size(); ++i)
            if (d[i] == 0.0) throw NumericalError("factor covariance is singular: d[" + std::to_string(i) + "] = 0");
        inv_d2_ = d.cwiseAbs2().cwiseInverse();
        scaled_B_ = inv_d2_.asDiagonal() * B_;
        const Eigen::Index k = B_.cols();
        Eigen::MatrixXd capacitance = Eigen::MatrixXd::Identity(k, k);
        capacitance.noalias() += B_.transpose() * scaled_B_;
        chol_.compute(capacitance);
        if (chol_.info() != Eigen::Success) throw NumericalError("factor covariance: capacitance matrix not positive definite");
        log_det_ = d.cwiseAbs2().array().log().sum();
        const Eigen::MatrixXd L = chol_.matrixL();
        for (Eigen::Index j = 0; j < k; ++j) log_det_ += 2.0 * std::log(L(j, j));
    }

    [[nodiscard]] double log_det() const noexcept { return log_det_; }
    [[nodiscard]] Eigen::Index dim() const noexcept { return inv_d2_.size(); }

    /// Sigma^{-1} r = D^-2 r - D^-2 B M^-1 B' D^-2 r, M = I + B' D^-2 B.
    [[nodiscard]] Eigen::VectorXd solve(const Eigen::Ref<const Eigen::VectorXd>& r) const
    {
        Eigen::VectorXd out = inv_d2_.cwiseProduct(r);
        if (B_.cols() > 0) out.noalias() -= scaled_B_ * chol_.solve(scaled_B_.transpose() * r);
        return out;
    }

    /// Sigma^{-1} B = D^-2 B M^-1.
    [[nodiscard]] Eigen::MatrixXd solve_loadings() const
    {
        if (B_.cols() == 0) return Eigen::MatrixXd(dim(), 0);
        return chol_.solve(scaled_B_.transpose()).transpose();
    }

    [[nodiscard]] Eigen::VectorXd inverse_diagonal() const
    {
        Eigen::VectorXd diag = inv_d2_;
        if (B_.cols() > 0) diag -= solve_loadings().cwiseProduct(scaled_B_).rowwise().sum();
        return diag;
    }

private:
    Eigen::MatrixXd B_;
    Eigen::VectorXd inv_d2_;
    Eigen::MatrixXd scaled_B_;
    Eigen::LLT<Eigen::MatrixXd> chol_;
    double log_det_ = 0.0;
};

/// log phi_m(theta; mu, B B' + D^2).
inline double log_q(const VariationalParams& lambda, const Eigen::Ref<const Eigen::VectorXd>& theta)
{
    require(theta.size() == lambda.dim(), "log_q: theta length does not match variational parameters");
    const FactorCovariance cov(lambda);
    const Eigen::VectorXd r = theta - lambda.mu();
    const double m = static_cast<double>(lambda.dim());
    return -0.5 * (m * std::log(2.0 * std::numbers::pi) + cov.log_det() + r.dot(cov.solve(r)));
}

inline double log_q(const VariationalParams& lambda, const NetworkParams& theta)
{
    return log_q(lambda, theta.theta());
}

/// -Sigma^{-1} (theta - mu).
inline Eigen::VectorXd grad_log_q(const VariationalParams& lambda, const Eigen::Ref<const Eigen::VectorXd>& theta)
{
    require(theta.size() == lambda.dim(), "grad_log_q: theta length does not match variational parameters");
    return -FactorCovariance(lambda).solve(theta - lambda.mu());
}

/// Value and gradient of an unnormalized log posterior log h(theta).
struct TargetEval {
    double value;
    Eigen::VectorXd gradient;
};

template <typename T>
concept LogTarget = requires(const T& t, const Eigen::VectorXd& theta) {
    { t.dim() } -> std::convertible_to<Eigen::Index>;
    { t.log_density(theta) } -> std::convertible_to<double>;
    { t.evaluate(theta) } -> std::same_as<TargetEval>;
};

/// log h(theta) = log p(y | theta) under a flat prior on R^m (constant dropped).
class NetworkLikelihood {
public:
    NetworkLikelihood(NetworkArch arch, const BinaryBatch& batch) : arch_(std::move(arch)), batch_(&batch)
    {
        require(!batch.empty(), "NetworkLikelihood: empty batch");
        require(batch.dim() == arch_.input_dim(), "NetworkLikelihood: batch dimension does not match architecture");
    }

    [[nodiscard]] Eigen::Index dim() const { return arch_.num_params(); }
    [[nodiscard]] const NetworkArch& arch() const noexcept { return arch_; }

    [[nodiscard]] double log_density(const Eigen::VectorXd& theta) const
    {
        return log_likelihood(NetworkParams(arch_, theta), *batch_);
    }

    [[nodiscard]] TargetEval evaluate(const Eigen::VectorXd& theta) const
    {
        const NetworkParams params(arch_, theta);
        const Eigen::VectorXd f = forward_batch(params, batch_->features());
        Eigen::VectorXd residual(f.size());
        double value = 0.0;
        for (Eigen::Index i = 0; i < f.size(); ++i) {
            const bool positive = batch_->labels()[i] == 1.0;
            value -= positive ? softplus(-f[i]) : softplus(f[i]);
            residual[i] = batch_->labels()[i] - logistic(f[i]);
        }
        return {value, backprop_batch(params, batch_->features(), residual)};
    }

private:
    NetworkArch arch_;
    const BinaryBatch* batch_;
};

static_assert(LogTarget<NetworkLikelihood>);

/// Single-draw ELBO: log h(theta) - log q(theta) at theta = sample_theta(lambda, eps).
template <LogTarget Target>
double elbo_estimate(const Target& target, const VariationalParams& lambda, const NoiseDraw& eps)
{
    require(target.dim() == lambda.dim(), "elbo_estimate: target dimension does not match variational parameters");
    const Eigen::VectorXd theta = sample_theta(lambda, eps);
    return target.log_density(theta) - log_q(lambda, theta);
}

inline double elbo_estimate(const NetworkArch& arch, const BinaryBatch& batch, const VariationalParams& lambda,
                            const NoiseDraw& eps)
{
    return elbo_estimate(NetworkLikelihood(arch, batch), lambda, eps);
}

/// Gradient blocks for (mu, d, B). `B` has the shape of the loadings with
/// structurally-zero entries set to 0.
struct ElboGradient {
    Eigen::VectorXd mu;
    Eigen::VectorXd d;
    Eigen::MatrixXd B;
    double elbo = 0.0;

    /// Same layout as VariationalParams::flatten().
    [[nodiscard]] Eigen::VectorXd flatten() const
    {
        const Eigen::Index m = mu.size();
        Eigen::VectorXd out(2 * m + VariationalParams::free_loadings(m, B.cols()));
        out.head(m) = mu;
        out.segment(m, m) = d;
        Eigen::Index k = 2 * m;
        for (Eigen::Index j = 0; j < B.cols(); ++j)
            for (Eigen::Index i = j; i < m; ++i) out[k++] = B(i, j);
        return out;
    }
};

enum class GradientForm {
    /// (d theta / d lambda)' {grad log h - grad log q}, the reparameterization
    /// gradient with the zero-mean score term of q omitted.
    path,
    /// Exact derivative of lambda -> elbo_estimate(lambda, eps) for fixed eps.
    /// Also unbiased; differs from `path` by the zero-mean score term.
    total,
};

/// One-draw unbiased estimate of the ELBO gradient.
template <LogTarget Target>
ElboGradient elbo_gradient_estimate(const Target& target, const VariationalParams& lambda, const NoiseDraw& eps,
                                    GradientForm form = GradientForm::total)
{
    require(target.dim() == lambda.dim(), "elbo_gradient_estimate: target dimension does not match");
    const Eigen::VectorXd theta = sample_theta(lambda, eps);
    const FactorCovariance cov(lambda);
    const Eigen::VectorXd r = theta - lambda.mu();
    const Eigen::VectorXd u = cov.solve(r);  // = -grad log q(theta)
    const TargetEval h = target.evaluate(theta);
    const double m = static_cast<double>(lambda.dim());

    ElboGradient g;
    g.elbo = h.value + 0.5 * (m * std::log(2.0 * std::numbers::pi) + cov.log_det() + r.dot(u));

    if (form == GradientForm::path) {
        const Eigen::VectorXd total = h.gradient + u;
        g.mu = total;
        g.d = total.cwiseProduct(eps.eta);
        g.B = total * eps.z.transpose();
    } else {
        g.mu = h.gradient;
        g.d = h.gradient.cwiseProduct(eps.eta) + cov.inverse_diagonal().cwiseProduct(lambda.d()) +
              u.cwiseProduct(eps.eta) - u.cwiseAbs2().cwiseProduct(lambda.d());
        g.B = (h.gradient + u) * eps.z.transpose();
        if (lambda.factors() > 0) {
            g.B += cov.solve_loadings();
            g.B.noalias() -= u * (u.transpose() * lambda.B());
        }
    }
    g.B.triangularView<Eigen::StrictlyUpper>().setZero();
    return g;
}

inline ElboGradient elbo_gradient_estimate(const NetworkArch& arch, const BinaryBatch& batch,
                                           const VariationalParams& lambda, const NoiseDraw& eps,
                                           GradientForm form = GradientForm::total)
{
    return elbo_gradient_estimate(NetworkLikelihood(arch, batch), lambda, eps, form);
}

/// Monte Carlo posterior predictive Pr(y = 1 | x) for every row of `features`.
/// The same `draws` parameter samples (from a stream seeded by `seed`) are
/// shared by all rows.
inline Eigen::VectorXd predictive_probabilities(const VariationalParams& lambda, const NetworkArch& arch,
                                                const Eigen::Ref<const Eigen::MatrixXd>& features, int draws,
                                                std::uint64_t seed)
{
    require(draws >= 1, "predictive_probability: draws must be at least 1");
    require(arch.num_params() == lambda.dim(), "predictive_probability: architecture does not match lambda");
    Rng rng(seed);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(features.rows());
    for (int s = 0; s < draws; ++s) {
        const NoiseDraw eps = draw_noise(lambda.factors(), lambda.dim(), rng);
        const Eigen::VectorXd f = forward_batch(sample_theta(lambda, arch, eps), features);
        for (Eigen::Index i = 0; i < f.size(); ++i) total[i] += logistic(f[i]);
    }
    return total / static_cast<double>(draws);
}

inline double predictive_probability(const VariationalParams& lambda, const NetworkArch& arch,
                                     const Eigen::Ref<const Eigen::VectorXd>& x, int draws, std::uint64_t seed)
{
    return predictive_probabilities(lambda, arch, x.transpose(), draws, seed)[0];
}

}  // namespace bnncal
