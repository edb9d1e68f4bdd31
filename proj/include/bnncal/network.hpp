#pragma once

// Feedforward network with rectified-linear hidden layers and a single
// identity output unit, linked to a binary outcome through the logistic
// function.
//
// Parameter layout (shared bit-exactly with the variational code): for each
// layer l in order, the weight matrix of shape (size_l x size_{l-1}) stored
// row-major, followed by the bias vector of length size_l.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "bnncal/error.hpp"
#include "bnncal/random.hpp"

namespace bnncal {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class NetworkArch {
public:
    NetworkArch() = default;

    /// `layer_sizes` = (input dim, hidden widths..., 1).
    explicit NetworkArch(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes))
    {
        require(sizes_.size() >= 2, "NetworkArch needs at least an input and an output layer");
        require(sizes_.back() == 1, "NetworkArch output layer must have exactly one unit");
        for (int s : sizes_) require(s > 0, "NetworkArch layer sizes must be positive");
        offsets_.reserve(sizes_.size());
        std::size_t offset = 0;
        for (std::size_t l = 1; l < sizes_.size(); ++l) {
            offsets_.push_back(offset);
            offset += static_cast<std::size_t>(sizes_[l - 1]) * sizes_[l] + sizes_[l];
        }
        offsets_.push_back(offset);
    }

    /// Input dim `p`, `hidden` widths, scalar output.
    static NetworkArch with_hidden(int p, const std::vector<int>& hidden)
    {
        std::vector<int> sizes{p};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(1);
        return NetworkArch(std::move(sizes));
    }

    [[nodiscard]] const std::vector<int>& layer_sizes() const noexcept { return sizes_; }
    [[nodiscard]] int input_dim() const { return sizes_.front(); }
    [[nodiscard]] std::size_t num_layers() const noexcept { return sizes_.empty() ? 0 : sizes_.size() - 1; }
    [[nodiscard]] Eigen::Index num_params() const { return static_cast<Eigen::Index>(offsets_.back()); }

    [[nodiscard]] int fan_in(std::size_t layer) const { return sizes_[layer]; }
    [[nodiscard]] int fan_out(std::size_t layer) const { return sizes_[layer + 1]; }
    [[nodiscard]] Eigen::Index weight_offset(std::size_t layer) const
    {
        return static_cast<Eigen::Index>(offsets_[layer]);
    }
    [[nodiscard]] Eigen::Index bias_offset(std::size_t layer) const
    {
        return weight_offset(layer) + static_cast<Eigen::Index>(fan_in(layer)) * fan_out(layer);
    }

    friend bool operator==(const NetworkArch& a, const NetworkArch& b) { return a.sizes_ == b.sizes_; }

private:
    std::vector<int> sizes_;
    std::vector<std::size_t> offsets_;
};

class NetworkParams {
public:
    NetworkParams(NetworkArch arch, Eigen::VectorXd theta) : arch_(std::move(arch)), theta_(std::move(theta))
    {
        require(theta_.size() == arch_.num_params(), "NetworkParams: theta length does not match architecture");
        require(theta_.allFinite(), "NetworkParams: theta contains non-finite entries");
    }

    static NetworkParams zeros(const NetworkArch& arch)
    {
        return {arch, Eigen::VectorXd::Zero(arch.num_params())};
    }

    [[nodiscard]] const NetworkArch& arch() const noexcept { return arch_; }
    [[nodiscard]] const Eigen::VectorXd& theta() const noexcept { return theta_; }

    [[nodiscard]] Eigen::Map<const RowMajorMatrix> weights(std::size_t layer) const
    {
        return {theta_.data() + arch_.weight_offset(layer), arch_.fan_out(layer), arch_.fan_in(layer)};
    }
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const
    {
        return {theta_.data() + arch_.bias_offset(layer), arch_.fan_out(layer)};
    }

private:
    NetworkArch arch_;
    Eigen::VectorXd theta_;
};

/// Standardized features with binary labels.
class BinaryBatch {
public:
    BinaryBatch() = default;
    BinaryBatch(Eigen::MatrixXd features, Eigen::VectorXd labels)
        : features_(std::move(features)), labels_(std::move(labels))
    {
        require(features_.rows() == labels_.size(), "BinaryBatch: row count differs from label count");
        require(features_.allFinite(), "BinaryBatch: non-finite feature");
        for (double y : labels_) require(y == 0.0 || y == 1.0, "BinaryBatch: labels must be 0 or 1");
    }

    [[nodiscard]] const Eigen::MatrixXd& features() const noexcept { return features_; }
    [[nodiscard]] const Eigen::VectorXd& labels() const noexcept { return labels_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return labels_.size(); }
    [[nodiscard]] Eigen::Index dim() const noexcept { return features_.cols(); }
    [[nodiscard]] bool empty() const noexcept { return labels_.size() == 0; }

private:
    Eigen::MatrixXd features_;
    Eigen::VectorXd labels_;
};

/// g(a) = 1 / (1 + e^-a), branch-stable for large |a|.
inline double logistic(double a) noexcept
{
    if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
    const double e = std::exp(a);
    return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) noexcept
{
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

namespace detail {

inline void check_input(const NetworkParams& params, Eigen::Index dim)
{
    if (dim != params.arch().input_dim())
        throw ContractViolation("network input has dimension " + std::to_string(dim) + ", architecture expects " +
                                std::to_string(params.arch().input_dim()));
}

}  // namespace detail

/// Raw pre-link score f(x, theta).
inline double forward(const NetworkParams& params, const Eigen::Ref<const Eigen::VectorXd>& x)
{
    detail::check_input(params, x.size());
    Eigen::VectorXd h = x;
    const std::size_t layers = params.arch().num_layers();
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::VectorXd z = params.weights(l) * h + params.bias(l);
        h = (l + 1 < layers) ? Eigen::VectorXd(z.cwiseMax(0.0)) : z;
    }
    return h[0];
}

/// Row-wise scores for an N x p feature matrix.
inline Eigen::VectorXd forward_batch(const NetworkParams& params, const Eigen::Ref<const Eigen::MatrixXd>& features)
{
    detail::check_input(params, features.cols());
    Eigen::MatrixXd h = features;
    const std::size_t layers = params.arch().num_layers();
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd z = h * params.weights(l).transpose();
        z.rowwise() += params.bias(l).transpose();
        if (l + 1 < layers) z = z.cwiseMax(0.0);
        h = std::move(z);
    }
    return h.col(0);
}

/// Bernoulli log-likelihood of the labels, summed over the batch.
inline double log_likelihood(const NetworkParams& params, const BinaryBatch& batch)
{
    require(!batch.empty(), "log_likelihood: empty batch");
    const Eigen::VectorXd f = forward_batch(params, batch.features());
    double total = 0.0;
    for (Eigen::Index i = 0; i < f.size(); ++i) {
        // log g(f) = -softplus(-f), log(1 - g(f)) = -softplus(f)
        total -= batch.labels()[i] == 1.0 ? softplus(-f[i]) : softplus(f[i]);
    }
    return total;
}

/// Exact gradient of forward() with respect to theta. ReLU derivative at 0 is 0.
inline Eigen::VectorXd network_gradient(const NetworkParams& params, const Eigen::Ref<const Eigen::VectorXd>& x)
{
    detail::check_input(params, x.size());
    const NetworkArch& arch = params.arch();
    const std::size_t layers = arch.num_layers();

    std::vector<Eigen::VectorXd> inputs;  // input to each layer (post-activation of the previous one)
    inputs.reserve(layers);
    Eigen::VectorXd h = x;
    for (std::size_t l = 0; l < layers; ++l) {
        inputs.push_back(h);
        Eigen::VectorXd z = params.weights(l) * h + params.bias(l);
        h = (l + 1 < layers) ? Eigen::VectorXd(z.cwiseMax(0.0)) : z;
    }

    Eigen::VectorXd grad(arch.num_params());
    Eigen::VectorXd delta = Eigen::VectorXd::Ones(1);
    for (std::size_t l = layers; l-- > 0;) {
        Eigen::Map<RowMajorMatrix> gw(grad.data() + arch.weight_offset(l), arch.fan_out(l), arch.fan_in(l));
        gw.noalias() = delta * inputs[l].transpose();
        grad.segment(arch.bias_offset(l), arch.fan_out(l)) = delta;
        if (l > 0) {
            Eigen::VectorXd back = params.weights(l).transpose() * delta;
            // inputs[l] = relu(z_{l-1}); positive iff z_{l-1} > 0
            delta = back.cwiseProduct((inputs[l].array() > 0.0).cast<double>().matrix());
        }
    }
    return grad;
}

/// Backpropagates per-row output sensitivities `weights_out` (d objective / d f_i)
/// and returns the summed parameter gradient.
inline Eigen::VectorXd backprop_batch(const NetworkParams& params, const Eigen::Ref<const Eigen::MatrixXd>& features,
                                      const Eigen::Ref<const Eigen::VectorXd>& weights_out)
{
    detail::check_input(params, features.cols());
    const NetworkArch& arch = params.arch();
    const std::size_t layers = arch.num_layers();

    std::vector<Eigen::MatrixXd> inputs;
    inputs.reserve(layers);
    Eigen::MatrixXd h = features;
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd z = h * params.weights(l).transpose();
        z.rowwise() += params.bias(l).transpose();
        if (l + 1 < layers) z = z.cwiseMax(0.0);
        inputs.push_back(std::move(h));
        h = std::move(z);
    }

    Eigen::VectorXd grad(arch.num_params());
    Eigen::MatrixXd delta = weights_out;  // N x 1
    for (std::size_t l = layers; l-- > 0;) {
        Eigen::Map<RowMajorMatrix> gw(grad.data() + arch.weight_offset(l), arch.fan_out(l), arch.fan_in(l));
        gw.noalias() = delta.transpose() * inputs[l];
        grad.segment(arch.bias_offset(l), arch.fan_out(l)) = delta.colwise().sum().transpose();
        if (l > 0) {
            Eigen::MatrixXd back = delta * params.weights(l);
            delta = back.cwiseProduct((inputs[l].array() > 0.0).cast<double>().matrix());
        }
    }
    return grad;
}

/// Sum_{i: y_i = 1} grad f_i - Sum_i g(f_i) grad f_i, i.e. Sum_i (y_i - g(f_i)) grad f_i.
inline Eigen::VectorXd grad_log_likelihood(const NetworkParams& params, const BinaryBatch& batch)
{
    require(!batch.empty(), "grad_log_likelihood: empty batch");
    const Eigen::VectorXd f = forward_batch(params, batch.features());
    Eigen::VectorXd residual(f.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) residual[i] = batch.labels()[i] - logistic(f[i]);
    return backprop_batch(params, batch.features(), residual);
}

/// Glorot-uniform weights, zero biases.
inline NetworkParams init_network(const NetworkArch& arch, Rng& rng)
{
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(arch.num_params());
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const double limit = std::sqrt(6.0 / static_cast<double>(arch.fan_in(l) + arch.fan_out(l)));
        const Eigen::Index count = static_cast<Eigen::Index>(arch.fan_in(l)) * arch.fan_out(l);
        for (Eigen::Index j = 0; j < count; ++j)
            theta[arch.weight_offset(l) + j] = limit * (2.0 * rng.uniform() - 1.0);
    }
    return {arch, std::move(theta)};
}

}  // namespace bnncal
