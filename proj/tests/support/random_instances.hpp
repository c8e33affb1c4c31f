#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <dmrlab/skorokhod.hpp>

namespace dmr::testing {

struct ForwardInstance {
    TimeGrid grid;
    std::vector<double> s;
    BoundaryFn upper;
    BoundaryFn lower;
};

struct BackwardInstance {
    TimeGrid grid;
    std::vector<double> s;
    double a = 0.0;
    BoundaryFn l;
    BoundaryFn r;
};

namespace detail {

inline std::vector<double> random_walk(std::mt19937_64& eng, const TimeGrid& g, double sigma) {
    std::normal_distribution<double> z;
    std::vector<double> s(g.size(), 0.0);
    s[0] = sigma * 0.3 * z(eng);
    for (std::size_t k = 1; k < g.size(); ++k) s[k] = s[k - 1] + sigma * std::sqrt(g.dt) * z(eng);
    return s;
}

// x + alpha tanh(x) - level(t) with level = centre + amp sin(freq t + phase).
// With tanh == false alpha is zero and the boundary is affine.
inline BoundaryFn random_level_boundary(std::mt19937_64& eng, const TimeGrid& g, bool tanh, double centre) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double alpha = tanh ? u(eng) : 0.0;
    const double amp = 0.4 * u(eng);
    const double freq = 1.0 + 8.0 * u(eng);
    const double phase = 6.0 * u(eng);
    return analytic_boundary(
        g,
        [=](double t, double x) { return x + alpha * std::tanh(x) - (centre + amp * std::sin(freq * t + phase)); },
        Band{1.0, 1.0 + alpha});
}

}  // namespace detail

/// Random feasible two-sided problem: upper level in [0.5, 1.5], lower in [-1.5, -0.5].
inline ForwardInstance random_forward_instance(std::mt19937_64& eng, bool tanh, std::size_t N = 120) {
    ForwardInstance inst{make_grid(1.0, N), {}, {}, {}};
    inst.s = detail::random_walk(eng, inst.grid, 2.0);
    inst.upper = detail::random_level_boundary(eng, inst.grid, tanh, 1.0);
    inst.lower = detail::random_level_boundary(eng, inst.grid, tanh, -1.0);
    return inst;
}

/// Random backward problem with an admissible anchor a in [-0.2, 0.2].
inline BackwardInstance random_backward_instance(std::mt19937_64& eng, bool tanh, std::size_t N = 120) {
    BackwardInstance inst{make_grid(1.0, N), {}, 0.0, {}, {}};
    inst.s = detail::random_walk(eng, inst.grid, 2.0);
    inst.s[0] = 0.0;
    inst.a = std::uniform_real_distribution<double>(-0.2, 0.2)(eng);
    inst.l = detail::random_level_boundary(eng, inst.grid, tanh, 1.0);
    inst.r = detail::random_level_boundary(eng, inst.grid, tanh, -1.0);
    return inst;
}

}  // namespace dmr::testing
