#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <span>
#include <vector>

#include "bsde.hpp"
#include "condexp.hpp"
#include "core.hpp"
#include "dmr_solver.hpp"
#include "grid_paths.hpp"
#include "mean_boundaries.hpp"

namespace dmr {

/// Deterministic obstacles l_k <= E[Y_k] <= r_k on the grid.
struct LinearObstacles {
    std::vector<double> l;
    std::vector<double> r;
    bool relax_origin = false;

    /// Samples two obstacle curves on the grid. Without relax_origin both must
    /// vanish at t = 0.
    static LinearObstacles sample(const TimeGrid& grid, const Obstacle& lower, const Obstacle& upper,
                                  bool relax_origin = false) {
        LinearObstacles o;
        o.relax_origin = relax_origin;
        o.l.resize(grid.size());
        o.r.resize(grid.size());
        for (std::size_t k = 0; k < grid.size(); ++k) {
            o.l[k] = lower(grid.t(k));
            o.r[k] = upper(grid.t(k));
        }
        o.validate();
        return o;
    }

    void validate() const {
        if (l.size() != r.size() || l.empty()) throw ConfigError("obstacle arrays have mismatched sizes");
        for (std::size_t k = 0; k < l.size(); ++k) {
            if (!std::isfinite(l[k]) || !std::isfinite(r[k])) throw ConfigError("obstacles must be finite");
            if (l[k] > r[k]) {
                std::ostringstream os;
                os << "obstacles cross at grid index " << k << ": l = " << l[k] << " > r = " << r[k];
                throw ConfigError(os.str());
            }
        }
        if (!relax_origin && (l[0] != 0.0 || r[0] != 0.0))
            throw ConfigError("obstacles must start at l_0 = r_0 = 0 unless relax_origin is set");
    }
};

/// Solution y of y = ytilde + ndt (y - l)^- - ndt (y - r)^+.
inline double implicit_penalty_step(double ytilde, double l, double r, double ndt) {
    if (ytilde < l) return (ytilde + ndt * l) / (1.0 + ndt);
    if (ytilde > r) return (ytilde + ndt * r) / (1.0 + ndt);
    return ytilde;
}

struct PenalizedSolution {
    PathArray Y;
    PathArray Z;
    std::vector<double> K_l;  // up-push from the lower obstacle
    std::vector<double> K_r;  // down-push from the upper obstacle
    std::vector<double> meanY;
    double n = 0.0;
    double pen_l = 0.0;  // sum_k ((meanY_k - l_k)^-)^2 dt, k < N
    double pen_r = 0.0;  // sum_k ((meanY_k - r_k)^+)^2 dt, k < N
};

/// Checks l_N <= mean(xi) <= r_N within three standard errors of the mean.
inline void check_obstacle_terminal(const LinearObstacles& obs, std::span<const double> xi) {
    const double mu = pairwise_mean(xi);
    const double var = pairwise_mean(xi.size(), [&](std::size_t m) { return (xi[m] - mu) * (xi[m] - mu); });
    const double tol = std::max(3.0 * std::sqrt(var / static_cast<double>(xi.size())), 1e-12);
    if (obs.l.back() > mu + tol) {
        std::ostringstream os;
        os << "terminal admissibility l_T <= E[xi] fails: l_T = " << obs.l.back() << ", E[xi] = " << mu
           << ", tolerance " << tol;
        throw TerminalConditionError(os.str());
    }
    if (obs.r.back() < mu - tol) {
        std::ostringstream os;
        os << "terminal admissibility E[xi] <= r_T fails: E[xi] = " << mu << ", r_T = " << obs.r.back()
           << ", tolerance " << tol;
        throw TerminalConditionError(os.str());
    }
}

/// Penalized mean-field scheme with penalty parameter n.
inline PenalizedSolution penalized_solve(const PathEnsemble& ens, const DriverSpec& driver, std::span<const double> xi,
                                         const LinearObstacles& obs, double n, const RegressionSpec& spec) {
    if (!(n >= 0.0) || !std::isfinite(n)) throw ConfigError("penalty parameter n must be finite and >= 0");
    if (obs.l.size() != ens.grid.size()) throw ConfigError("obstacles do not match the grid");
    obs.validate();
    check_obstacle_terminal(obs, xi);
    const std::size_t N = ens.N();
    const double ndt = n * ens.grid.dt;

    std::vector<double> push_l(N, 0.0), push_r(N, 0.0);
    auto step = [&](std::size_t k, double ybar) {
        const double y = implicit_penalty_step(ybar, obs.l[k], obs.r[k], ndt);
        push_l[k] = ndt * negative_part(y - obs.l[k]);
        push_r[k] = ndt * positive_part(y - obs.r[k]);
        return y;
    };
    auto res = backward_scheme(ens, driver, xi, 0, N, spec, step);

    PenalizedSolution sol;
    sol.Y = std::move(res.Y);
    sol.Z = std::move(res.Z);
    sol.n = n;
    sol.meanY = sol.Y.column_means();
    require_finite(sol.meanY, "penalized solution");
    sol.K_l.assign(N + 1, 0.0);
    sol.K_r.assign(N + 1, 0.0);
    for (std::size_t k = 0; k < N; ++k) {
        sol.K_l[k + 1] = sol.K_l[k] + push_l[k];
        sol.K_r[k + 1] = sol.K_r[k] + push_r[k];
    }
    const double dt = ens.grid.dt;
    sol.pen_l = pairwise_sum(N, [&](std::size_t k) {
                    const double d = negative_part(sol.meanY[k] - obs.l[k]);
                    return d * d;
                }) * dt;
    sol.pen_r = pairwise_sum(N, [&](std::size_t k) {
                    const double d = positive_part(sol.meanY[k] - obs.r[k]);
                    return d * d;
                }) * dt;
    return sol;
}

struct SweepRow {
    double n = 0.0;
    double pen_l = 0.0;
    double pen_r = 0.0;
    double dist_to_ref = std::numeric_limits<double>::quiet_NaN();  // sup_k |meanY^n - meanY^ref|
    double supY2 = 0.0;                                             // sup_k mean(Y^2)
    double intZ2 = 0.0;                                             // sum_k mean(Z^2) dt, k < N
    double cauchy = std::numeric_limits<double>::quiet_NaN();       // sup_k mean|Y^n - Y^prev|^2
};

struct SweepResult {
    std::vector<SweepRow> rows;
    double slope_r = std::numeric_limits<double>::quiet_NaN();      // log pen_r against log n
    double slope_l = std::numeric_limits<double>::quiet_NaN();      // log pen_l against log n
    double slope_total = std::numeric_limits<double>::quiet_NaN();  // log(pen_l + pen_r) against log n
};

/// Least-squares slope of log y against log x; NaN if any y is not positive.
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    if (n < 2 || y.size() != n) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> lx(n), ly(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) return std::numeric_limits<double>::quiet_NaN();
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
    }
    const double mx = pairwise_mean(std::span<const double>(lx));
    const double my = pairwise_mean(std::span<const double>(ly));
    const double sxy = pairwise_sum(n, [&](std::size_t i) { return (lx[i] - mx) * (ly[i] - my); });
    const double sxx = pairwise_sum(n, [&](std::size_t i) { return (lx[i] - mx) * (lx[i] - mx); });
    return sxy / sxx;
}

/// Solves the penalized scheme for every n on the same ensemble and tabulates
/// penetration, moment bounds, the distance to a reference mean path and the
/// successive-difference norm.
inline SweepResult convergence_sweep(const PathEnsemble& ens, const DriverSpec& driver, std::span<const double> xi,
                                     const LinearObstacles& obs, std::span<const double> n_list,
                                     const RegressionSpec& spec, const std::vector<double>* ref_meanY = nullptr) {
    if (n_list.size() < 2) throw ConfigError("penalization sweep needs at least two values of n");
    for (std::size_t i = 1; i < n_list.size(); ++i)
        if (!(n_list[i] > n_list[i - 1])) throw ConfigError("penalization n_list must be increasing");
    const std::size_t N = ens.N();
    const double dt = ens.grid.dt;

    SweepResult out;
    std::optional<PathArray> prev;
    for (double n : n_list) {
        auto sol = penalized_solve(ens, driver, xi, obs, n, spec);
        SweepRow row;
        row.n = n;
        row.pen_l = sol.pen_l;
        row.pen_r = sol.pen_r;
        for (std::size_t k = 0; k <= N; ++k) {
            auto y = sol.Y.column(k);
            row.supY2 = std::max(row.supY2, pairwise_mean(y.size(), [&](std::size_t m) { return y[m] * y[m]; }));
        }
        row.intZ2 = pairwise_sum(N, [&](std::size_t k) {
                        auto z = sol.Z.column(k);
                        return pairwise_mean(z.size(), [&](std::size_t m) { return z[m] * z[m]; });
                    }) * dt;
        if (ref_meanY) {
            row.dist_to_ref = 0.0;
            for (std::size_t k = 0; k <= N; ++k)
                row.dist_to_ref = std::max(row.dist_to_ref, std::abs(sol.meanY[k] - (*ref_meanY)[k]));
        }
        if (prev) {
            row.cauchy = 0.0;
            for (std::size_t k = 0; k <= N; ++k) {
                auto a = sol.Y.column(k);
                auto b = prev->column(k);
                row.cauchy = std::max(row.cauchy, pairwise_mean(a.size(), [&](std::size_t m) {
                                          const double d = a[m] - b[m];
                                          return d * d;
                                      }));
            }
        }
        prev = std::move(sol.Y);
        out.rows.push_back(row);
    }
    std::vector<double> ns, pl, pr, pt;
    for (const auto& r : out.rows) {
        ns.push_back(r.n);
        pl.push_back(r.pen_l);
        pr.push_back(r.pen_r);
        pt.push_back(r.pen_l + r.pen_r);
    }
    out.slope_l = loglog_slope(ns, pl);
    out.slope_r = loglog_slope(ns, pr);
    out.slope_total = loglog_slope(ns, pt);
    return out;
}

struct PenalizedStability {
    double lhs = 0.0;    // sum_k mean|dY|^2 dt + sum_k mean|dZ|^2 dt
    double rhs = 0.0;    // mean|dxi|^2 + sum_k mean|df|^2 dt
    double ratio = 0.0;  // lhs / rhs, the empirical constant
};

/// Empirical constant of the stability estimate between two penalized runs on
/// one ensemble; df is evaluated along the first solution.
inline PenalizedStability penalized_stability(const PathEnsemble& ens, const DriverSpec& f1, std::span<const double> xi1,
                                              const DriverSpec& f2, std::span<const double> xi2,
                                              const LinearObstacles& obs, double n, const RegressionSpec& spec) {
    const auto s1 = penalized_solve(ens, f1, xi1, obs, n, spec);
    const auto s2 = penalized_solve(ens, f2, xi2, obs, n, spec);
    const std::size_t N = ens.N();
    const double dt = ens.grid.dt;
    PenalizedStability out;
    out.lhs = pairwise_sum(N, [&](std::size_t k) {
                  auto y1 = s1.Y.column(k), y2 = s2.Y.column(k);
                  auto z1 = s1.Z.column(k), z2 = s2.Z.column(k);
                  return pairwise_mean(y1.size(), [&](std::size_t m) {
                      const double dy = y1[m] - y2[m], dz = z1[m] - z2[m];
                      return dy * dy + dz * dz;
                  });
              }) * dt;
    const double dxi = pairwise_mean(xi1.size(), [&](std::size_t m) {
        const double d = xi1[m] - xi2[m];
        return d * d;
    });
    const double df = pairwise_sum(N, [&](std::size_t k) {
                          const double t = ens.grid.t(k);
                          auto y = s1.Y.column(k);
                          auto z = s1.Z.column(k);
                          return pairwise_mean(y.size(), [&](std::size_t m) {
                              const double d = f1(t, y[m], z[m]) - f2(t, y[m], z[m]);
                              return d * d;
                          });
                      }) * dt;
    out.rhs = dxi + df;
    out.ratio = out.rhs > 0.0 ? out.lhs / out.rhs : 0.0;
    return out;
}

}  // namespace dmr
