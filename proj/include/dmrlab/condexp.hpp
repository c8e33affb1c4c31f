#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "grid_paths.hpp"

namespace dmr {

struct RegressionSpec {
    int degree = 4;
    double ridge = 1e-10;
    bool standardize = true;
};

// ---------------------------------------------------------------------------
// Least-squares projection on polynomials of the Brownian state.
// ---------------------------------------------------------------------------

namespace detail {

// Probabilists' Hermite polynomials He_1..He_d at z.
inline void hermite_row(double z, int d, std::span<double> out) {
    double prev = 1.0, cur = z;
    for (int j = 1; j <= d; ++j) {
        out[j - 1] = cur;
        const double next = z * cur - j * prev;
        prev = cur;
        cur = next;
    }
}

inline void monomial_row(double z, int d, std::span<double> out) {
    double p = 1.0;
    for (int j = 1; j <= d; ++j) {
        p *= z;
        out[j - 1] = p;
    }
}

}  // namespace detail

/// Projection of `target` on span{1, p_1(x), ..., p_d(x)} where x is the state
/// sample. The intercept is not penalized and the other basis columns are
/// centered, so mean(fitted) equals mean(target) up to rounding.
inline std::vector<double> regress_on_state(std::span<const double> state, std::span<const double> target,
                                            const RegressionSpec& spec) {
    const std::size_t M = state.size();
    if (target.size() != M) throw ConfigError("regression: state/target size mismatch");
    if (spec.degree < 0) throw ConfigError("regression degree must be nonnegative");
    require_finite(target, "regression target");

    const double ybar = pairwise_mean(target);
    const double xbar = pairwise_mean(state);
    const double xvar = pairwise_mean(M, [&](std::size_t m) {
        const double d = state[m] - xbar;
        return d * d;
    });
    if (spec.degree == 0 || !(xvar > 0.0)) return std::vector<double>(M, ybar);

    const int d = spec.degree;
    const double scale = spec.standardize ? 1.0 / std::sqrt(xvar) : 1.0;
    const double shift = spec.standardize ? xbar : 0.0;

    // Basis stored column by column: basis[j*M + m].
    std::vector<double> basis(static_cast<std::size_t>(d) * M);
    std::vector<double> row(d);
    for (std::size_t m = 0; m < M; ++m) {
        const double z = (state[m] - shift) * scale;
        if (spec.standardize)
            detail::hermite_row(z, d, row);
        else
            detail::monomial_row(z, d, row);
        for (int j = 0; j < d; ++j) basis[j * M + m] = row[j];
    }
    for (int j = 0; j < d; ++j) {
        std::span<double> col(basis.data() + j * M, M);
        const double mu = pairwise_mean(col);
        for (double& v : col) v -= mu;
    }

    Eigen::MatrixXd G(d, d);
    Eigen::VectorXd rhs(d);
    for (int i = 0; i < d; ++i) {
        const double* bi = basis.data() + i * M;
        for (int j = 0; j <= i; ++j) {
            const double* bj = basis.data() + j * M;
            const double g = pairwise_mean(M, [&](std::size_t m) { return bi[m] * bj[m]; });
            G(i, j) = g;
            G(j, i) = g;
        }
        G(i, i) += spec.ridge;
        rhs(i) = pairwise_mean(M, [&](std::size_t m) { return bi[m] * (target[m] - ybar); });
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    const Eigen::VectorXd pivots = ldlt.vectorD();
    const bool degenerate = !(pivots.minCoeff() > 1e-14 * std::max(pivots.maxCoeff(), 1e-300));
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || degenerate || ldlt.rcond() < 1e-15)
        throw RegressionError("regression normal equations are singular (degree " + std::to_string(d) +
                              ", rcond " + std::to_string(ldlt.rcond()) + ")");
    const Eigen::VectorXd beta = ldlt.solve(rhs);
    for (int i = 0; i < d; ++i)
        if (!std::isfinite(beta(i))) throw RegressionError("regression produced non-finite coefficients");

    std::vector<double> fitted(M);
    for (std::size_t m = 0; m < M; ++m) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += beta(j) * basis[j * M + m];
        fitted[m] = ybar + acc;
    }
    return fitted;
}

/// E_{t_k}[target] estimated by regression on W(., k). Returns the plain mean at
/// k = 0 and the target itself at k = N.
inline std::vector<double> regress_condexp(const PathEnsemble& ens, std::span<const double> target,
                                           std::size_t k, const RegressionSpec& spec) {
    if (target.size() != ens.M) throw ConfigError("regression: target has wrong path count");
    if (k > ens.N()) throw ConfigError("regression: time index out of range");
    if (k == ens.N()) {
        require_finite(target, "regression target");
        return {target.begin(), target.end()};
    }
    return regress_on_state(ens.W.column(k), target, spec);
}

struct MartingaleParts {
    PathArray M;  // M(., j) = E_{k0+j}[H] - E[H]
    PathArray Z;  // martingale integrand, Z(., n) duplicated from n-1
};

/// Martingale representation of H on the window [k0, k1], where H is known at
/// t_{k1}. Column j of the result sits at grid index k0 + j.
inline MartingaleParts extract_martingale_z(const PathEnsemble& ens, std::span<const double> H,
                                            std::size_t k0, std::size_t k1, const RegressionSpec& spec) {
    if (!(k0 < k1) || k1 > ens.N()) throw ConfigError("martingale window out of range");
    if (H.size() != ens.M) throw ConfigError("martingale target has wrong path count");
    require_finite(H, "martingale target");
    const std::size_t n = k1 - k0;
    const double hbar = pairwise_mean(H);
    MartingaleParts out{PathArray(ens.M, n + 1), PathArray(ens.M, n + 1)};

    parallel_for(n + 1, [&](std::size_t j) {
        auto col = out.M.column(j);
        if (j == n) {
            for (std::size_t m = 0; m < ens.M; ++m) col[m] = H[m] - hbar;
            return;
        }
        auto fit = regress_on_state(ens.W.column(k0 + j), H, spec);
        for (std::size_t m = 0; m < ens.M; ++m) col[m] = fit[m] - hbar;
    });

    const double dt = ens.grid.dt;
    parallel_for(n, [&](std::size_t j) {
        auto dw = ens.dW.column(k0 + j);
        auto a = out.M.column(j);
        auto b = out.M.column(j + 1);
        std::vector<double> prod(ens.M);
        for (std::size_t m = 0; m < ens.M; ++m) prod[m] = (b[m] - a[m]) * dw[m];
        auto fit = regress_on_state(ens.W.column(k0 + j), prod, spec);
        auto z = out.Z.column(j);
        for (std::size_t m = 0; m < ens.M; ++m) z[m] = fit[m] / dt;
    });
    auto last = out.Z.column(n);
    auto prev = out.Z.column(n - 1);
    std::copy(prev.begin(), prev.end(), last.begin());
    return out;
}

inline MartingaleParts extract_martingale_z(const PathEnsemble& ens, std::span<const double> H,
                                            const RegressionSpec& spec) {
    return extract_martingale_z(ens, H, 0, ens.N(), spec);
}

// ---------------------------------------------------------------------------
// Terminal-value catalog, functions of the Brownian endpoint B_T.
// ---------------------------------------------------------------------------

struct TerminalSpec {
    enum class Kind { affine, poly, call, sin };
    Kind kind = Kind::affine;
    double a = 0.0, b = 1.0;       // affine: a + b x
    std::vector<double> coeffs;    // poly: sum c_i x^i
    double strike = 0.0;           // call: scale (x - strike)^+
    double scale = 1.0;
    double amplitude = 1.0;        // sin: amplitude sin(frequency x + phase)
    double frequency = 1.0;
    double phase = 0.0;

    static TerminalSpec affine(double a, double b) {
        TerminalSpec s;
        s.a = a;
        s.b = b;
        return s;
    }
    static TerminalSpec poly(std::vector<double> c) {
        TerminalSpec s;
        s.kind = Kind::poly;
        s.coeffs = std::move(c);
        return s;
    }
    static TerminalSpec call(double strike, double scale = 1.0) {
        TerminalSpec s;
        s.kind = Kind::call;
        s.strike = strike;
        s.scale = scale;
        return s;
    }
    static TerminalSpec sine(double amplitude = 1.0, double frequency = 1.0, double phase = 0.0) {
        TerminalSpec s;
        s.kind = Kind::sin;
        s.amplitude = amplitude;
        s.frequency = frequency;
        s.phase = phase;
        return s;
    }

    double operator()(double x) const {
        switch (kind) {
            case Kind::affine: return a + b * x;
            case Kind::poly: {
                double acc = 0.0;
                for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * x + *it;
                return acc;
            }
            case Kind::call: return scale * positive_part(x - strike);
            case Kind::sin: return amplitude * std::sin(frequency * x + phase);
        }
        return 0.0;
    }
};

inline std::vector<double> terminal_values(const PathEnsemble& ens, const TerminalSpec& xi) {
    auto wT = ens.W.column(ens.N());
    std::vector<double> out(ens.M);
    for (std::size_t m = 0; m < ens.M; ++m) out[m] = xi(wT[m]);
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian quadrature.
// ---------------------------------------------------------------------------

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Gauss-Hermite rule for the weight exp(-x^2), Newton iteration on the
/// normalized three-term recurrence.
inline QuadratureRule gauss_hermite(int n) {
    QuadratureRule q{std::vector<double>(n), std::vector<double>(n)};
    const double pim4 = std::pow(std::numbers::pi, -0.25);
    double z = 0.0;
    for (int i = 0; i < (n + 1) / 2; ++i) {
        if (i == 0)
            z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
        else if (i == 1)
            z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
        else if (i == 2)
            z = 1.86 * z - 0.86 * q.nodes[0];
        else if (i == 3)
            z = 1.91 * z - 0.91 * q.nodes[1];
        else
            z = 2.0 * z - q.nodes[i - 2];
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p1 = pim4, p2 = 0.0;
            for (int j = 1; j <= n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt(static_cast<double>(j - 1) / j) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) break;
        }
        q.nodes[i] = z;
        q.nodes[n - 1 - i] = -z;
        q.weights[i] = 2.0 / (pp * pp);
        q.weights[n - 1 - i] = q.weights[i];
    }
    return q;
}

/// Gauss-Legendre rule on [-1, 1].
inline QuadratureRule gauss_legendre(int n) {
    QuadratureRule q{std::vector<double>(n), std::vector<double>(n)};
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p1 = 1.0, p2 = 0.0;
            for (int j = 1; j <= n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
            }
            pp = n * (z * p1 - p2) / (z * z - 1.0);
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::abs(z - z1) <= 1e-16) break;
        }
        q.nodes[i] = -z;
        q.nodes[n - 1 - i] = z;
        q.weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        q.weights[n - 1 - i] = q.weights[i];
    }
    return q;
}

/// E[fn(mean + sd G)], G standard normal, by 64-node Gauss-Hermite.
inline double gaussian_expectation(const std::function<double(double)>& fn, double mean, double sd) {
    static const QuadratureRule gh = gauss_hermite(64);
    if (sd == 0.0) return fn(mean);
    double acc = 0.0;
    for (std::size_t i = 0; i < gh.nodes.size(); ++i)
        acc += gh.weights[i] * fn(mean + sd * std::numbers::sqrt2 * gh.nodes[i]);
    return acc / std::sqrt(std::numbers::pi);
}

/// E[fn(mean + sd G) 1{G > cut}] by composite Gauss-Legendre on [cut, 14];
/// fn must be smooth on that half-line.
inline double gaussian_tail_expectation(const std::function<double(double)>& fn, double mean, double sd,
                                        double cut) {
    static const QuadratureRule gl = gauss_legendre(16);
    const double lo = std::max(cut, -14.0);
    const double hi = 14.0;
    if (lo >= hi) return 0.0;
    const int panels = 64;
    const double h = (hi - lo) / panels;
    double acc = 0.0;
    for (int p = 0; p < panels; ++p) {
        const double a = lo + p * h;
        for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
            const double u = a + 0.5 * h * (gl.nodes[i] + 1.0);
            const double dens = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
            acc += 0.5 * h * gl.weights[i] * fn(mean + sd * u) * dens;
        }
    }
    return acc;
}

/// E[xi(B_T) | B_t = b] for the terminal catalog. The kinked call payoff is
/// integrated on the smooth side of its kink.
inline double quadrature_condexp_oracle(const TerminalSpec& xi, double T, double t, double b) {
    if (t > T) throw ConfigError("oracle time beyond horizon");
    const double sd = std::sqrt(T - t);
    switch (xi.kind) {
        case TerminalSpec::Kind::affine:
        case TerminalSpec::Kind::poly:
        case TerminalSpec::Kind::sin:
            return gaussian_expectation([&](double x) { return xi(x); }, b, sd);
        case TerminalSpec::Kind::call:
            if (sd == 0.0) return xi(b);
            return gaussian_tail_expectation(
                [&](double x) { return xi.scale * (x - xi.strike); }, b, sd, (xi.strike - b) / sd);
    }
    throw OracleUnavailable("no quadrature oracle for this terminal kind");
}

}  // namespace dmr
