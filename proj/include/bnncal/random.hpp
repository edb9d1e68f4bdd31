#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>

#include <Eigen/Core>

namespace bnncal {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Seedable, splittable random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. Uniforms and normals are derived here rather than through
/// <random> distributions so that draws are identical across standard
/// library implementations. Normals use the Box-Muller transform; the sine
/// branch is cached and returned by the following call.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(detail::splitmix64(seed)) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    /// Independent child stream identified by `stream`. Does not advance this stream.
    [[nodiscard]] Rng split(std::uint64_t stream) const
    {
        return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(stream + 0x632BE59BD9B4E019ULL)));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    double uniform()
    {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n)
    {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    double normal()
    {
        if (cached_) {
            const double v = *cached_;
            cached_.reset();
            return v;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        cached_ = radius * std::sin(angle);
        return radius * std::cos(angle);
    }

    Eigen::VectorXd normal_vector(Eigen::Index n)
    {
        Eigen::VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
        return v;
    }

    /// Fisher-Yates shuffle.
    template <typename Container>
    void shuffle(Container& c)
    {
        for (std::size_t i = c.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(c[i - 1], c[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::optional<double> cached_;
};

}  // namespace bnncal
