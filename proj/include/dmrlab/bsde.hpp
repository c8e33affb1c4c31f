#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "condexp.hpp"
#include "core.hpp"
#include "grid_paths.hpp"

namespace dmr {

/// Driver catalog:
///   zero
///   affine:    a(t) y + b(t) z + c(t)     (a, b, c polynomials in t)
///   lipschitz: lambda1 sin(y) + lambda2 cos(z) + c(t)
struct DriverSpec {
    enum class Kind { zero, affine, lipschitz };
    Kind kind = Kind::zero;
    std::vector<double> a{0.0}, b{0.0}, c{0.0};
    double lambda1 = 0.0;
    double lambda2 = 0.0;

    static DriverSpec zero() { return {}; }
    static DriverSpec affine(std::vector<double> a, std::vector<double> b, std::vector<double> c) {
        DriverSpec d;
        d.kind = Kind::affine;
        d.a = std::move(a);
        d.b = std::move(b);
        d.c = std::move(c);
        return d;
    }
    static DriverSpec lipschitz(double l1, double l2, std::vector<double> c = {0.0}) {
        DriverSpec d;
        d.kind = Kind::lipschitz;
        d.lambda1 = l1;
        d.lambda2 = l2;
        d.c = std::move(c);
        return d;
    }

    static double poly(const std::vector<double>& p, double t) {
        double acc = 0.0;
        for (auto it = p.rbegin(); it != p.rend(); ++it) acc = acc * t + *it;
        return acc;
    }

    double operator()(double t, double y, double z) const {
        switch (kind) {
            case Kind::zero: return 0.0;
            case Kind::affine: return poly(a, t) * y + poly(b, t) * z + poly(c, t);
            case Kind::lipschitz: return lambda1 * std::sin(y) + lambda2 * std::cos(z) + poly(c, t);
        }
        return 0.0;
    }

    /// Lipschitz constant in (y, z) for the l1 metric, over the grid times.
    double lipschitz_constant(std::span<const double> times) const {
        switch (kind) {
            case Kind::zero: return 0.0;
            case Kind::lipschitz: return std::max(std::abs(lambda1), std::abs(lambda2));
            case Kind::affine: {
                double lip = 0.0;
                for (double t : times) lip = std::max({lip, std::abs(poly(a, t)), std::abs(poly(b, t))});
                return lip;
            }
        }
        return 0.0;
    }

    bool yz_free() const {
        auto zero_poly = [](const std::vector<double>& p) {
            return std::all_of(p.begin(), p.end(), [](double v) { return v == 0.0; });
        };
        switch (kind) {
            case Kind::zero: return true;
            case Kind::affine: return zero_poly(a) && zero_poly(b);
            case Kind::lipschitz: return lambda1 == 0.0 && lambda2 == 0.0;
        }
        return false;
    }

    /// Of the form a_t y + h(t, z) with deterministic a.
    bool affine_in_y() const { return kind != Kind::lipschitz || lambda1 == 0.0; }
};

/// Driver values f(t_{k0+j}, U(., j), V(., j)) for j < cols.
inline PathArray driver_paths(const DriverSpec& f, const TimeGrid& grid, std::size_t k0, const PathArray& U,
                              const PathArray& V) {
    PathArray out(U.paths(), U.times(), 0.0);
    if (f.kind == DriverSpec::Kind::zero) return out;
    for (std::size_t j = 0; j < U.times(); ++j) {
        const double t = grid.t(k0 + j);
        auto u = U.column(j);
        auto v = V.column(j);
        auto o = out.column(j);
        for (std::size_t m = 0; m < U.paths(); ++m) o[m] = f(t, u[m], v[m]);
    }
    return out;
}

struct SchemeResult {
    PathArray Y;
    PathArray Z;
};

/// Step j (grid index k0 + j) maps the mean of the predictor to the corrected mean.
struct UnreflectedStep {
    double operator()(std::size_t, double ybar) const { return ybar; }
};

/// Backward Euler with regression on the window [k0, k1]:
///   E = E_k[Y_{k+1}],  Z_k = E_k[(Y_{k+1} - E) dW_k] / dt,
///   Ytilde = E + f(t_k, Ytilde, Z_k) dt   (two fixed-point passes from Ytilde = E),
///   Y_k = Ytilde + (step(mean Ytilde) - mean Ytilde).
/// The mean correction is deterministic and applied to every path.
template <class MeanStep>
SchemeResult backward_scheme(const PathEnsemble& ens, const DriverSpec& f, std::span<const double> terminal,
                             std::size_t k0, std::size_t k1, const RegressionSpec& spec, MeanStep&& step) {
    if (!(k0 < k1) || k1 > ens.N()) throw ConfigError("scheme window out of range");
    const std::size_t n = k1 - k0;
    const std::size_t M = ens.M;
    const double dt = ens.grid.dt;
    SchemeResult res{PathArray(M, n + 1), PathArray(M, n + 1)};
    std::copy(terminal.begin(), terminal.end(), res.Y.column(n).begin());

    std::vector<double> prod(M), yt(M);
    for (std::size_t j = n; j-- > 0;) {
        const std::size_t k = k0 + j;
        const double t = ens.grid.t(k);
        auto next = res.Y.column(j + 1);
        auto state = ens.W.column(k);
        auto dw = ens.dW.column(k);
        const auto E = regress_on_state(state, next, spec);
        for (std::size_t m = 0; m < M; ++m) prod[m] = (next[m] - E[m]) * dw[m];
        auto zfit = regress_on_state(state, prod, spec);
        auto z = res.Z.column(j);
        for (std::size_t m = 0; m < M; ++m) z[m] = zfit[m] / dt;

        std::copy(E.begin(), E.end(), yt.begin());
        if (f.kind != DriverSpec::Kind::zero) {
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t m = 0; m < M; ++m) yt[m] = E[m] + f(t, yt[m], z[m]) * dt;
        }
        for (double v : yt)
            if (!std::isfinite(v)) throw NumericError("backward scheme produced a non-finite value");
        const double ybar = pairwise_mean(std::span<const double>(yt));
        const double shift = step(j, ybar) - ybar;
        auto y = res.Y.column(j);
        for (std::size_t m = 0; m < M; ++m) y[m] = yt[m] + shift;
    }
    auto zl = res.Z.column(n);
    auto zp = res.Z.column(n - 1);
    std::copy(zp.begin(), zp.end(), zl.begin());
    return res;
}

/// Unreflected BSDE on the whole grid.
inline SchemeResult solve_unreflected(const PathEnsemble& ens, const DriverSpec& f, std::span<const double> xi,
                                      const RegressionSpec& spec) {
    return backward_scheme(ens, f, xi, 0, ens.N(), spec, UnreflectedStep{});
}

}  // namespace dmr
