#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Core>

namespace bnncal::test {

/// Central differences, step 1e-5 scaled by max(1, |x_i|).
template <typename F>
Eigen::VectorXd central_difference(F&& f, const Eigen::VectorXd& x, double h = 1e-5)
{
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double step = h * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + step;
        const double up = f(xp);
        xp[i] = x[i] - step;
        const double down = f(xp);
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-3)
{
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

inline std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::filesystem::path data_dir()
{
#ifdef BNNCAL_TEST_DATA
    return BNNCAL_TEST_DATA;
#else
    return "tests/data";
#endif
}

}  // namespace bnncal::test
