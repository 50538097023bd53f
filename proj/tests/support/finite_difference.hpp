#ifndef MATRREC_TESTS_FINITE_DIFFERENCE_HPP
#define MATRREC_TESTS_FINITE_DIFFERENCE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "matrrec/tape.hpp"

namespace matrrec::testing {

/// Central differences of a scalar function with respect to one leaf tensor.
/// The leaf is perturbed in place and restored.
inline std::vector<double> numeric_gradient(Tensor<double> leaf, const std::function<double()>& f,
                                            double h = 1e-5) {
    std::vector<double> out(leaf.numel());
    auto v = leaf.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + h;
        const double up = f();
        v[i] = saved - h;
        const double down = f();
        v[i] = saved;
        out[i] = (up - down) / (2 * h);
    }
    return out;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are
/// zero up to rounding from dominating the ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double max_relative_error(std::span<const double> analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double a = analytic.empty() ? 0.0 : analytic[i];
        worst = std::max(worst, relative_error(a, numeric[i], floor));
    }
    return worst;
}

}  // namespace matrrec::testing

#endif  // MATRREC_TESTS_FINITE_DIFFERENCE_HPP
