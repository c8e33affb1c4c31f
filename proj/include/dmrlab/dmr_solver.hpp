#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "bsde.hpp"
#include "condexp.hpp"
#include "core.hpp"
#include "grid_paths.hpp"
#include "mean_boundaries.hpp"
#include "skorokhod.hpp"

namespace dmr {

struct DmrOptions {
    /// Root tolerance for the induced boundaries; NaN keeps the boundary default.
    double eps_root = std::numeric_limits<double>::quiet_NaN();
};

struct PicardConfig {
    int max_iter = 50;
    double tol = 1e-10;
    std::size_t subintervals = 1;
};

/// Solution of the doubly mean-reflected BSDE on the grid. K, K_R, K_L are
/// deterministic; K = K_R - K_L with K_R pushing up (lower constraint R).
struct DmrSolution {
    PathArray Y;
    PathArray Z;
    std::vector<double> K, K_R, K_L;
    std::vector<double> meanY;
    std::vector<double> EL, ER;          // mean L(t, Y_t), mean R(t, Y_t)
    std::vector<double> s;               // mean driver integral (single-window solves)
    double a = 0.0;                      // mean terminal value
    std::vector<double> x;               // Skorokhod path (single-window solves)
    std::vector<std::vector<double>> traces;  // Picard deltas per window, earliest window first
    std::size_t iterations = 0;
    bool converged = true;
    double eps_root = 0.0;
    double tol_T = 0.0;
    double mean_identity_error = 0.0;    // max |meanY - x| / (1 + |x|)
};

/// Per-path means of a loss along Y: out[k] = mean L(t_k, Y(., k)).
inline std::vector<double> mean_loss_path(const PathEnsemble& ens, const PathArray& Y, const LossFn& loss,
                                          std::size_t k0 = 0) {
    std::vector<double> out(Y.times());
    for (std::size_t j = 0; j < Y.times(); ++j) {
        const std::size_t k = k0 + j;
        const double t = ens.grid.t(k);
        auto y = Y.column(j);
        auto w = ens.W.column(k);
        out[j] = pairwise_mean(y.size(), [&](std::size_t m) {
            return eval_loss(loss, loss.feature_value(w[m]), t, y[m]);
        });
    }
    return out;
}

/// Standard error of the mean of loss(T, xi) over the ensemble.
inline double terminal_loss_se(const PathEnsemble& ens, std::span<const double> xi, const LossFn& loss,
                               std::size_t k) {
    auto w = ens.W.column(k);
    const double t = ens.grid.t(k);
    std::vector<double> v(ens.M);
    for (std::size_t m = 0; m < ens.M; ++m) v[m] = eval_loss(loss, loss.feature_value(w[m]), t, xi[m]);
    const double mu = pairwise_mean(std::span<const double>(v));
    const double var = pairwise_mean(v.size(), [&](std::size_t m) { return (v[m] - mu) * (v[m] - mu); });
    return std::sqrt(var / static_cast<double>(ens.M));
}

namespace detail {

struct WindowSolution {
    PathArray Y, Z;
    std::vector<double> K, K_R, K_L, s, x;
    double a = 0.0;
    double eps = 0.0;
    double tol_T = 0.0;
    double identity_error = 0.0;
};

inline WindowSolution constant_coeff_window(const PathEnsemble& ens, const PathArray& C,
                                            std::span<const double> terminal, std::size_t k0, std::size_t k1,
                                            const LossPair& losses, const RegressionSpec& spec,
                                            const DmrOptions& opt) {
    const std::size_t n = k1 - k0;
    const std::size_t M = ens.M;
    const double dt = ens.grid.dt;

    // Left-Riemann running integrals I(., j) = sum_{i<j} C(., i) dt.
    PathArray I(M, n + 1, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        auto prev = I.column(j);
        auto c = C.column(j);
        auto out = I.column(j + 1);
        for (std::size_t m = 0; m < M; ++m) out[m] = prev[m] + c[m] * dt;
    }
    // Xtilde_j = E_j[terminal + I_n - I_j]. Only the remaining integral is
    // regressed: it is a function of W_{k0+j}, the elapsed part I_j is not.
    PathArray X(M, n + 1);
    auto In = I.column(n);
    std::copy(terminal.begin(), terminal.end(), X.column(n).begin());
    parallel_for(n, [&](std::size_t j) {
        auto ij = I.column(j);
        std::vector<double> rest(M);
        for (std::size_t m = 0; m < M; ++m) rest[m] = terminal[m] + (In[m] - ij[m]);
        auto fit = regress_on_state(ens.W.column(k0 + j), rest, spec);
        std::copy(fit.begin(), fit.end(), X.column(j).begin());
    });

    // Z_j = E_j[(Xtilde_{j+1} - Xtilde_j) dW_j] / dt; Z at the window end copies j = n - 1.
    PathArray Z(M, n + 1);
    parallel_for(n, [&](std::size_t j) {
        auto dw = ens.dW.column(k0 + j);
        auto a = X.column(j);
        auto b = X.column(j + 1);
        std::vector<double> prod(M);
        for (std::size_t m = 0; m < M; ++m) prod[m] = (b[m] - a[m]) * dw[m];
        auto fit = regress_on_state(ens.W.column(k0 + j), prod, spec);
        auto z = Z.column(j);
        for (std::size_t m = 0; m < M; ++m) z[m] = fit[m] / dt;
    });
    std::copy(Z.column(n - 1).begin(), Z.column(n - 1).end(), Z.column(n).begin());

    WindowSolution w;
    w.s.resize(n + 1);
    for (std::size_t j = 0; j <= n; ++j) w.s[j] = I.column_mean(j);
    w.a = pairwise_mean(terminal);

    std::span<const double> times(ens.grid.times.data() + k0, n + 1);
    const PathArray etaL = feature_paths(losses.L, ens, k0, n + 1);
    const PathArray etaR = feature_paths(losses.R, ens, k0, n + 1);
    const BoundaryFn l = induced_boundary(times, X, losses.L, &etaL);
    const BoundaryFn r = induced_boundary(times, X, losses.R, &etaR);

    w.eps = std::isnan(opt.eps_root) ? l.default_tolerance() : opt.eps_root;
    const double se = std::max(terminal_loss_se(ens, terminal, losses.L, k1),
                               terminal_loss_se(ens, terminal, losses.R, k1));
    w.tol_T = std::max(3.0 * se, w.eps);

    SkorokhodOptions so;
    so.eps_root = w.eps;
    so.terminal_tol = w.tol_T;
    auto bsp = solve_backward_sp(w.s, w.a, l, r, so);

    w.Y = PathArray(M, n + 1);
    for (std::size_t j = 0; j <= n; ++j) {
        const double push = bsp.k[n] - bsp.k[j];
        auto xj = X.column(j);
        auto yj = w.Y.column(j);
        for (std::size_t m = 0; m < M; ++m) yj[m] = xj[m] + push;
        const double my = pairwise_mean(std::span<const double>(yj.data(), yj.size()));
        w.identity_error = std::max(w.identity_error, std::abs(my - bsp.x[j]) / (1.0 + std::abs(bsp.x[j])));
    }
    w.Z = std::move(Z);
    w.K = std::move(bsp.k);
    w.K_R = std::move(bsp.k_up);
    w.K_L = std::move(bsp.k_down);
    w.x = std::move(bsp.x);
    return w;
}

inline double picard_delta(const PathArray& Y, const PathArray& U, const PathArray& Z, const PathArray& V,
                           double dt) {
    double sup_y = 0.0, int_z = 0.0;
    for (std::size_t j = 0; j < Y.times(); ++j) {
        auto y = Y.column(j);
        auto u = U.column(j);
        sup_y = std::max(sup_y, pairwise_mean(y.size(), [&](std::size_t m) {
                             const double d = y[m] - u[m];
                             return d * d;
                         }));
        if (j + 1 < Y.times()) {
            auto z = Z.column(j);
            auto v = V.column(j);
            int_z += dt * pairwise_mean(z.size(), [&](std::size_t m) {
                         const double d = z[m] - v[m];
                         return d * d;
                     });
        }
    }
    return sup_y + int_z;
}

inline void finish_solution(DmrSolution& sol, const PathEnsemble& ens, const LossPair& losses) {
    sol.meanY = sol.Y.column_means();
    sol.EL = mean_loss_path(ens, sol.Y, losses.L);
    sol.ER = mean_loss_path(ens, sol.Y, losses.R);
}

}  // namespace detail

/// Constant-coefficient problem: driver values C(m, k) do not depend on (Y, Z).
/// Builds Xtilde = E_t[xi + int_t^T C], the induced boundaries from its centered
/// law, solves the backward Skorokhod problem for the mean and adds K_T - K_t.
inline DmrSolution solve_constant_coeff(const PathEnsemble& ens, const PathArray& C, std::span<const double> xi,
                                        const LossPair& losses, const RegressionSpec& spec,
                                        const DmrOptions& opt = {}) {
    if (C.paths() != ens.M || C.times() < ens.N()) throw ConfigError("driver array has the wrong shape");
    if (xi.size() != ens.M) throw ConfigError("terminal values have the wrong path count");
    auto w = detail::constant_coeff_window(ens, C, xi, 0, ens.N(), losses, spec, opt);
    DmrSolution sol;
    sol.Y = std::move(w.Y);
    sol.Z = std::move(w.Z);
    sol.K = std::move(w.K);
    sol.K_R = std::move(w.K_R);
    sol.K_L = std::move(w.K_L);
    sol.s = std::move(w.s);
    sol.x = std::move(w.x);
    sol.a = w.a;
    sol.eps_root = w.eps;
    sol.tol_T = w.tol_T;
    sol.mean_identity_error = w.identity_error;
    sol.iterations = 1;
    detail::finish_solution(sol, ens, losses);
    return sol;
}

/// Picard iteration U -> f(t, U, V) -> constant-coefficient solve, started from
/// the unreflected solution, optionally on `subintervals` windows solved
/// backward in time. Stops when
///   delta = sup_k mean|Y - U|^2 + sum_k mean|Z - V|^2 dt <= tol.
inline DmrSolution picard_solve(const PathEnsemble& ens, const DriverSpec& driver, std::span<const double> xi,
                                const LossPair& losses, const PicardConfig& cfg, const RegressionSpec& spec,
                                const DmrOptions& opt = {}) {
    const std::size_t N = ens.N();
    if (cfg.subintervals == 0 || N % cfg.subintervals != 0)
        throw ConfigError("picard.subintervals must divide N");
    if (cfg.max_iter < 1) throw ConfigError("picard.max_iter must be positive");
    if (xi.size() != ens.M) throw ConfigError("terminal values have the wrong path count");
    const std::size_t S = cfg.subintervals;
    const std::size_t width = N / S;
    const std::size_t M = ens.M;
    const double dt = ens.grid.dt;

    DmrSolution sol;
    sol.Y = PathArray(M, N + 1);
    sol.Z = PathArray(M, N + 1);
    sol.traces.assign(S, {});
    std::vector<std::vector<double>> wK(S), wKR(S), wKL(S);
    std::copy(xi.begin(), xi.end(), sol.Y.column(N).begin());

    for (std::size_t i = S; i-- > 0;) {
        const std::size_t k0 = i * width;
        const std::size_t k1 = k0 + width;
        std::vector<double> terminal(sol.Y.column(k1).begin(), sol.Y.column(k1).end());

        if (k1 < N) {
            const double tol = 3.0 * std::max(terminal_loss_se(ens, terminal, losses.L, k1),
                                              terminal_loss_se(ens, terminal, losses.R, k1)) +
                               1e-8;
            PathArray tcol(M, 1);
            std::copy(terminal.begin(), terminal.end(), tcol.column(0).begin());
            const double el = mean_loss_path(ens, tcol, losses.L, k1)[0];
            const double er = mean_loss_path(ens, tcol, losses.R, k1)[0];
            if (el > tol || er < -tol) {
                std::ostringstream os;
                os << "inadmissible terminal value at subdivision point t=" << ens.grid.t(k1)
                   << ": E[L]=" << el << ", E[R]=" << er << ", tolerance " << tol;
                throw InvariantViolation(os.str());
            }
        }

        auto init = backward_scheme(ens, driver, terminal, k0, k1, spec, UnreflectedStep{});
        PathArray U = std::move(init.Y);
        PathArray V = std::move(init.Z);
        detail::WindowSolution w;
        bool done = false;
        std::vector<double>& trace = sol.traces[i];
        for (int it = 1; it <= cfg.max_iter; ++it) {
            const PathArray C = driver_paths(driver, ens.grid, k0, U, V);
            w = detail::constant_coeff_window(ens, C, terminal, k0, k1, losses, spec, opt);
            const double delta = detail::picard_delta(w.Y, U, w.Z, V, dt);
            trace.push_back(delta);
            ++sol.iterations;
            U = w.Y;
            V = w.Z;
            if (driver.yz_free() || delta <= cfg.tol) {
                done = true;
                break;
            }
        }
        if (!done) {
            const std::size_t L = trace.size();
            if (L < 2 || trace[L - 1] >= trace[L - 2]) {
                std::ostringstream os;
                os << "Picard iteration did not converge in " << cfg.max_iter
                   << " iterations (last delta " << trace.back() << ", not decreasing)";
                throw ConvergenceFailure(os.str());
            }
            sol.converged = false;
        }

        for (std::size_t j = 0; j <= width; ++j) {
            auto src = w.Y.column(j);
            std::copy(src.begin(), src.end(), sol.Y.column(k0 + j).begin());
        }
        for (std::size_t j = 0; j < width; ++j) {
            auto src = w.Z.column(j);
            std::copy(src.begin(), src.end(), sol.Z.column(k0 + j).begin());
        }
        wK[i] = std::move(w.K);
        wKR[i] = std::move(w.K_R);
        wKL[i] = std::move(w.K_L);
        sol.eps_root = w.eps;
        sol.tol_T = std::max(sol.tol_T, w.tol_T);
        sol.mean_identity_error = std::max(sol.mean_identity_error, w.identity_error);
        if (S == 1) {
            sol.s = std::move(w.s);
            sol.x = std::move(w.x);
            sol.a = w.a;
        }
    }
    {
        auto zl = sol.Z.column(N);
        auto zp = sol.Z.column(N - 1);
        std::copy(zp.begin(), zp.end(), zl.begin());
    }

    sol.K.assign(N + 1, 0.0);
    sol.K_R.assign(N + 1, 0.0);
    sol.K_L.assign(N + 1, 0.0);
    for (std::size_t i = 0; i < S; ++i) {
        const std::size_t k0 = i * width;
        const double base = sol.K[k0], baseR = sol.K_R[k0], baseL = sol.K_L[k0];
        for (std::size_t j = 1; j <= width; ++j) {
            sol.K[k0 + j] = base + wK[i][j];
            sol.K_R[k0 + j] = baseR + wKR[i][j];
            sol.K_L[k0 + j] = baseL + wKL[i][j];
        }
    }
    if (S != 1) sol.a = pairwise_mean(xi);
    detail::finish_solution(sol, ens, losses);
    return sol;
}

/// Linear obstacles lower_t <= E[Y_t] <= upper_t written as affine losses:
/// L = y - upper_t (upper constraint), R = y - lower_t (lower constraint).
inline LossPair affine_losses(Obstacle lower, Obstacle upper) {
    return LossPair{LossFn::affine(std::move(upper)), LossFn::affine(std::move(lower)), 0.0};
}

}  // namespace dmr
