#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "core.hpp"

namespace dmr {

/// Uniform grid t_k = k T / N on [0, T].
struct TimeGrid {
    double T = 1.0;
    std::size_t N = 2;
    double dt = 0.5;
    std::vector<double> times;

    std::size_t size() const { return N + 1; }
    double t(std::size_t k) const { return times[k]; }
};

inline TimeGrid make_grid(double T, std::size_t N) {
    if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("grid horizon T must be positive");
    if (N < 2) throw ConfigError("grid needs at least N = 2 steps");
    TimeGrid g;
    g.T = T;
    g.N = N;
    g.dt = T / static_cast<double>(N);
    g.times.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k)
        g.times[k] = T * static_cast<double>(k) / static_cast<double>(N);
    g.times[N] = T;
    return g;
}

/// M Brownian paths on a grid. W(m, 0) = 0 and W(m, k+1) = W(m, k) + dW(m, k).
/// dW is stored as a PathArray with N columns.
struct PathEnsemble {
    TimeGrid grid;
    std::size_t M = 0;
    std::uint64_t seed = 0;
    bool antithetic = false;
    PathArray W;
    PathArray dW;

    std::size_t N() const { return grid.N; }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Open interval (0,1) from the top 53 bits.
inline double open_uniform(std::mt19937_64& eng) {
    return (static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53;
}

// Box-Muller; written out so the stream is identical across standard libraries.
inline void fill_normals(std::mt19937_64& eng, std::span<double> out) {
    std::size_t i = 0;
    while (i < out.size()) {
        const double u1 = open_uniform(eng);
        const double u2 = open_uniform(eng);
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * std::numbers::pi * u2;
        out[i++] = rad * std::cos(ang);
        if (i < out.size()) out[i++] = rad * std::sin(ang);
    }
}

// Increments live on the dyadic lattice 2^-40 Z, so W(k+1) - W(k) == dW(k) and
// the running sums are exact (|W| stays far below 2^12).
inline double quantize_increment(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 40)), -40); }

}  // namespace detail

/// Per-path generator keyed on (seed, path index): path m is the same whatever
/// order or thread count the ensemble is built with.
inline PathEnsemble sample_ensemble(const TimeGrid& grid, std::size_t M, std::uint64_t seed,
                                    bool antithetic = false) {
    if (M < 2) throw ConfigError("ensemble needs at least M = 2 paths");
    if (antithetic && M % 2 != 0) throw ConfigError("antithetic sampling needs an even M");

    PathEnsemble ens;
    ens.grid = grid;
    ens.M = M;
    ens.seed = seed;
    ens.antithetic = antithetic;
    ens.W = PathArray(M, grid.N + 1, 0.0);
    ens.dW = PathArray(M, grid.N, 0.0);

    const double sd = std::sqrt(grid.dt);
    const std::size_t independent = antithetic ? M / 2 : M;
    parallel_for(independent, [&](std::size_t j) {
        const std::size_t m = antithetic ? 2 * j : j;
        std::mt19937_64 eng(detail::splitmix64(seed ^ detail::splitmix64(j + 1)));
        std::vector<double> z(grid.N);
        detail::fill_normals(eng, z);
        double w = 0.0;
        for (std::size_t k = 0; k < grid.N; ++k) {
            const double inc = detail::quantize_increment(sd * z[k]);
            ens.dW(m, k) = inc;
            w += inc;
            ens.W(m, k + 1) = w;
            if (antithetic) {
                ens.dW(m + 1, k) = -inc;
                ens.W(m + 1, k + 1) = -w;
            }
        }
    });
    return ens;
}

}  // namespace dmr
