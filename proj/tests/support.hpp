#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "top/rng.hpp"

namespace top::testing {

// Central finite differences of a scalar function w.r.t. every entry of x.
inline std::vector<double> finite_difference(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Worst relative deviation between analytic and finite-difference gradients.
// The denominator floor keeps near-zero components from blowing up the ratio.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& fd,
                            double floor = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double rel = std::abs(analytic[i] - fd[i]) / std::max(std::abs(fd[i]), floor);
        worst = std::max(worst, rel);
    }
    return worst;
}

inline std::vector<double> random_vector(std::size_t n, top::Rng& rng, double lo = -1.0,
                                         double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace top::testing
