#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "bsde.hpp"
#include "condexp.hpp"
#include "core.hpp"
#include "dmr_solver.hpp"
#include "grid_paths.hpp"
#include "mean_boundaries.hpp"
#include "skorokhod.hpp"

namespace dmr {

/// Stieltjes sums against the compensator parts; dK over [k, k+1] pairs with Y_k.
struct FlatOffResidual {
    double R = 0.0;  // |sum_k mean R(t_k, Y_k) dK_R[k]|
    double L = 0.0;  // |sum_k mean L(t_k, Y_k) dK_L[k]|
};

inline FlatOffResidual flatoff_residual(const DmrSolution& sol, const LossPair& losses, const PathEnsemble& ens) {
    const auto er = mean_loss_path(ens, sol.Y, losses.R);
    const auto el = mean_loss_path(ens, sol.Y, losses.L);
    const std::size_t N = ens.N();
    FlatOffResidual out;
    out.R = std::abs(pairwise_sum(N, [&](std::size_t k) { return er[k] * (sol.K_R[k + 1] - sol.K_R[k]); }));
    out.L = std::abs(pairwise_sum(N, [&](std::size_t k) { return el[k] * (sol.K_L[k + 1] - sol.K_L[k]); }));
    return out;
}

/// sup_k max(mean L(t_k, Y_k)^+, mean R(t_k, Y_k)^-).
inline double constraint_violation(const DmrSolution& sol, const LossPair& losses, const PathEnsemble& ens) {
    const auto er = mean_loss_path(ens, sol.Y, losses.R);
    const auto el = mean_loss_path(ens, sol.Y, losses.L);
    double worst = 0.0;
    for (std::size_t k = 0; k < er.size(); ++k)
        worst = std::max({worst, positive_part(el[k]), negative_part(er[k])});
    return worst;
}

/// Constraint tolerance: max(eps_root (1 + C/c), 3 standard errors of the mean losses).
inline double constraint_tolerance(const DmrSolution& sol, const LossPair& losses, const PathEnsemble& ens) {
    const double ratio = std::max(losses.L.band().ratio(), losses.R.band().ratio());
    double se = 0.0;
    for (std::size_t k = 0; k < sol.Y.times(); ++k) {
        auto y = sol.Y.column(k);
        se = std::max({se, terminal_loss_se(ens, y, losses.L, k), terminal_loss_se(ens, y, losses.R, k)});
    }
    return std::max(sol.eps_root * (1.0 + ratio), 3.0 * se);
}

struct DynkinResult {
    double supinf = 0.0;
    double infsup = 0.0;
    double meanY = 0.0;
    double tol_game = 0.0;
    std::vector<double> rbar;  // indexed from t_index to N
    std::vector<double> lbar;
    double ordering_defect = 0.0;  // max(rbar - meanY, meanY - lbar)^+ over k >= t_index
};

/// Exhaustive sup-inf / inf-sup over deterministic grid times s, q in [t, T] of
///   R_t(s, q) = E[sum_{t <= u < s^q} f dt + xi 1{s^q = T}] + rbar_q 1{q < T, q <= s} + lbar_s 1{s < q},
/// with rbar, lbar the roots of the boundaries induced by R, L from the centered
/// Ybar_k = E_k[xi + sum_{j >= k} f dt].
inline DynkinResult dynkin_value(const DmrSolution& sol, const DriverSpec& driver, std::span<const double> xi,
                                 const LossPair& losses, const PathEnsemble& ens, std::size_t t_index,
                                 const RegressionSpec& spec) {
    const std::size_t N = ens.N();
    const std::size_t M = ens.M;
    if (t_index > N) throw ConfigError("dynkin time index beyond the grid");
    const double dt = ens.grid.dt;

    // Per-path driver values along the solution and backward running sums.
    const PathArray F = driver_paths(driver, ens.grid, 0, sol.Y, sol.Z);
    PathArray tail(M, N + 1, 0.0);
    std::copy(xi.begin(), xi.end(), tail.column(N).begin());
    for (std::size_t k = N; k-- > 0;) {
        auto next = tail.column(k + 1);
        auto f = F.column(k);
        auto out = tail.column(k);
        for (std::size_t m = 0; m < M; ++m) out[m] = next[m] + f[m] * dt;
    }
    const std::size_t n = N - t_index;
    PathArray Ybar(M, n + 1);
    parallel_for(n + 1, [&](std::size_t j) {
        const auto fit = regress_condexp(ens, tail.column(t_index + j), t_index + j, spec);
        std::copy(fit.begin(), fit.end(), Ybar.column(j).begin());
    });

    std::span<const double> times(ens.grid.times.data() + t_index, n + 1);
    const PathArray etaL = feature_paths(losses.L, ens, t_index, n + 1);
    const PathArray etaR = feature_paths(losses.R, ens, t_index, n + 1);
    const BoundaryFn lb = induced_boundary(times, Ybar, losses.L, &etaL);
    const BoundaryFn rb = induced_boundary(times, Ybar, losses.R, &etaR);
    const double eps = std::isnan(sol.eps_root) || sol.eps_root <= 0.0 ? lb.default_tolerance() : sol.eps_root;

    DynkinResult res;
    res.rbar.resize(n + 1);
    res.lbar.resize(n + 1);
    parallel_for(n + 1, [&](std::size_t j) {
        const double hint = sol.meanY[t_index + j];
        res.rbar[j] = boundary_root(rb, j, eps, hint);
        res.lbar[j] = boundary_root(lb, j, eps, hint);
    });
    for (std::size_t j = 0; j <= n; ++j) {
        const double my = sol.meanY[t_index + j];
        res.ordering_defect = std::max({res.ordering_defect, res.rbar[j] - my, my - res.lbar[j]});
    }

    // Fcum[j] = mean sum_{t_index <= u < t_index + j} f dt.
    std::vector<double> Fcum(n + 1, 0.0);
    for (std::size_t j = 0; j < n; ++j) Fcum[j + 1] = Fcum[j] + F.column_mean(t_index + j) * dt;
    const double mean_xi = pairwise_mean(xi);

    auto payoff = [&](std::size_t s, std::size_t q) {
        const std::size_t u = std::min(s, q);
        double v = Fcum[u] + (u == n ? mean_xi : 0.0);
        if (q < n && q <= s) v += res.rbar[q];
        if (s < q) v += res.lbar[s];
        return v;
    };
    std::vector<double> row_min(n + 1), col_max(n + 1);
    parallel_for(n + 1, [&](std::size_t q) {
        double lo = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= n; ++s) lo = std::min(lo, payoff(s, q));
        row_min[q] = lo;
    });
    parallel_for(n + 1, [&](std::size_t s) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q <= n; ++q) hi = std::max(hi, payoff(s, q));
        col_max[s] = hi;
    });
    res.supinf = *std::max_element(row_min.begin(), row_min.end());
    res.infsup = *std::min_element(col_max.begin(), col_max.end());
    res.meanY = sol.meanY[t_index];

    auto y = sol.Y.column(t_index);
    const double var = pairwise_mean(M, [&](std::size_t m) {
        const double d = y[m] - res.meanY;
        return d * d;
    });
    const double c = std::min(losses.L.band().c, losses.R.band().c);
    res.tol_game = eps / c + 3.0 * std::sqrt(var / static_cast<double>(M)) +
                   driver.lipschitz_constant(ens.grid.times) * dt;
    return res;
}

enum class SandwichStatus { holds, violated, not_applicable };

inline const char* to_string(SandwichStatus s) {
    switch (s) {
        case SandwichStatus::holds: return "holds";
        case SandwichStatus::violated: return "violated";
        case SandwichStatus::not_applicable: return "not-applicable";
    }
    return "unknown";
}

struct SandwichSide {
    bool applicable = false;
    double omitted_breach = 0.0;  // worst breach of the constraint the one-sided problem drops
    std::size_t breach_index = 0;
    double order_defect = 0.0;    // worst pathwise breach of the ordering
    std::size_t defect_path = 0;
    std::size_t defect_index = 0;
};

struct SandwichReport {
    SandwichStatus status = SandwichStatus::not_applicable;
    SandwichSide lower;  // R-only problem, candidate below Y
    SandwichSide upper;  // L-only problem, candidate above Y
    double tolerance = 0.0;
    std::string witness;
};

struct SandwichOptions {
    double order_tol = 1e-6;
    double coupling_tol = 0.0;
};

/// Loss that never binds: y - 1e9 (upper) or y + 1e9 (lower).
inline LossFn sentinel_loss(bool upper) {
    return LossFn::affine(Obstacle::constant(upper ? kSentinelLevel : -kSentinelLevel));
}

/// Compares the two-sided solution with the one-sided ones on a common ensemble.
/// A side is applicable when its one-sided solution also satisfies the dropped
/// constraint; the ordering is asserted only on applicable sides.
inline SandwichReport sandwich_check(const PathEnsemble& ens, const DriverSpec& driver, std::span<const double> xi,
                                     const LossPair& losses, const PicardConfig& cfg, const RegressionSpec& spec,
                                     const SandwichOptions& opt = {}) {
    if (!driver.affine_in_y())
        throw ConfigError("sandwich check needs a driver of the form a(t) y + h(t, z)");
    const LossPair lower_pair{sentinel_loss(true), losses.R, 0.0};
    const LossPair upper_pair{losses.L, sentinel_loss(false), 0.0};
    const auto full = picard_solve(ens, driver, xi, losses, cfg, spec);
    const auto below = picard_solve(ens, driver, xi, lower_pair, cfg, spec);
    const auto above = picard_solve(ens, driver, xi, upper_pair, cfg, spec);

    SandwichReport rep;
    rep.tolerance = constraint_tolerance(full, losses, ens);
    const std::size_t N = ens.N();

    const auto el = mean_loss_path(ens, below.Y, losses.L);
    const auto er = mean_loss_path(ens, above.Y, losses.R);
    for (std::size_t k = 0; k <= N; ++k) {
        if (el[k] > rep.lower.omitted_breach) {
            rep.lower.omitted_breach = el[k];
            rep.lower.breach_index = k;
        }
        if (-er[k] > rep.upper.omitted_breach) {
            rep.upper.omitted_breach = -er[k];
            rep.upper.breach_index = k;
        }
    }
    rep.lower.applicable = rep.lower.omitted_breach <= rep.tolerance;
    rep.upper.applicable = rep.upper.omitted_breach <= rep.tolerance;

    const double tol = opt.order_tol + opt.coupling_tol;
    auto scan = [&](SandwichSide& side, const PathArray& lo, const PathArray& hi) {
        for (std::size_t k = 0; k <= N; ++k) {
            auto a = lo.column(k);
            auto b = hi.column(k);
            for (std::size_t m = 0; m < a.size(); ++m) {
                const double d = a[m] - b[m];
                if (d > side.order_defect) {
                    side.order_defect = d;
                    side.defect_path = m;
                    side.defect_index = k;
                }
            }
        }
    };
    if (rep.lower.applicable) scan(rep.lower, below.Y, full.Y);
    if (rep.upper.applicable) scan(rep.upper, full.Y, above.Y);

    std::ostringstream w;
    if (!rep.lower.applicable && !rep.upper.applicable) {
        rep.status = SandwichStatus::not_applicable;
        w << "lower candidate breaches E[L] <= 0 by " << rep.lower.omitted_breach << " at t="
          << ens.grid.t(rep.lower.breach_index) << "; upper candidate breaches E[R] >= 0 by "
          << rep.upper.omitted_breach << " at t=" << ens.grid.t(rep.upper.breach_index);
    } else if ((rep.lower.applicable && rep.lower.order_defect > tol) ||
               (rep.upper.applicable && rep.upper.order_defect > tol)) {
        rep.status = SandwichStatus::violated;
        const SandwichSide& s = rep.lower.order_defect > tol ? rep.lower : rep.upper;
        w << (&s == &rep.lower ? "lower" : "upper") << " ordering breached by " << s.order_defect << " on path "
          << s.defect_path << " at t=" << ens.grid.t(s.defect_index);
    } else {
        rep.status = SandwichStatus::holds;
        w << "ordering holds on "
          << (rep.lower.applicable && rep.upper.applicable ? "both sides"
              : rep.lower.applicable                       ? "the lower side"
                                                           : "the upper side");
    }
    rep.witness = w.str();
    return rep;
}

/// Backward Skorokhod instance used as the base of the stability suite.
struct SkorokhodInstance {
    std::vector<double> s;
    double a = 0.0;
    BoundaryFn l;  // upper boundary
    BoundaryFn r;  // lower boundary
};

struct PerturbationSpec {
    double da = 0.1;
    double ds = 0.1;
    double dl = 0.1;
    double dr = 0.1;
    std::size_t knots = 6;
};

struct StabilityReport {
    double worst_slack = std::numeric_limits<double>::infinity();
    std::size_t worst_trial = 0;
    std::size_t trials = 0;
    std::size_t skipped = 0;  // perturbed instance not admissible at T
};

struct StabilityTrial {
    double gap = 0.0;    // sup_k |k1 - k2|
    double bound = 0.0;
};

/// Solves the base and a perturbed instance and compares sup|k1 - k2| with the bound.
inline StabilityTrial stability_trial(const SkorokhodInstance& base, double da, const std::vector<double>& ds,
                                      const std::vector<double>& dl, const std::vector<double>& dr,
                                      const SkorokhodOptions& opt = {}) {
    const std::size_t N = base.s.size() - 1;
    std::vector<double> s2(N + 1);
    for (std::size_t k = 0; k <= N; ++k) s2[k] = base.s[k] + ds[k];
    const auto k1 = solve_backward_sp(base.s, base.a, base.l, base.r, opt);
    const auto k2 = solve_backward_sp(s2, base.a + da, base.l.plus(dl), base.r.plus(dr), opt);
    auto sup_abs = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    };
    StabilityTrial t;
    for (std::size_t k = 0; k <= N; ++k) t.gap = std::max(t.gap, std::abs(k1.k[k] - k2.k[k]));
    const Band lb = base.l.band(), rb = base.r.band();
    const Band band{std::min(lb.c, rb.c), std::max(lb.C, rb.C)};
    t.bound = backward_stability_bound(band, da, sup_abs(ds), sup_abs(dl), sup_abs(dr));
    return t;
}

/// Randomized perturbations: uniform da, piecewise-linear ds through random knots,
/// and per-index dl, dr drawn uniformly. Returns the minimum slack bound - gap.
inline StabilityReport stability_check(const SkorokhodInstance& base, const PerturbationSpec& pert,
                                       std::size_t trials, std::uint64_t seed,
                                       const SkorokhodOptions& opt = {}) {
    const std::size_t N = base.s.size() - 1;
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    StabilityReport rep;
    const std::size_t knots = std::max<std::size_t>(pert.knots, 2);
    for (std::size_t i = 0; i < trials; ++i) {
        const double da = pert.da * u(eng);
        std::vector<double> kv(knots);
        for (double& v : kv) v = pert.ds * u(eng);
        std::vector<double> ds(N + 1), dl(N + 1), dr(N + 1);
        for (std::size_t k = 0; k <= N; ++k) {
            const double pos = static_cast<double>(k) * static_cast<double>(knots - 1) / static_cast<double>(N);
            const std::size_t j = std::min<std::size_t>(static_cast<std::size_t>(pos), knots - 2);
            const double w = pos - static_cast<double>(j);
            ds[k] = (1.0 - w) * kv[j] + w * kv[j + 1];
        }
        for (std::size_t k = 0; k <= N; ++k) dl[k] = pert.dl * u(eng);
        for (std::size_t k = 0; k <= N; ++k) dr[k] = pert.dr * u(eng);
        StabilityTrial t;
        try {
            t = stability_trial(base, da, ds, dl, dr, opt);
        } catch (const TerminalConditionError&) {
            ++rep.skipped;
            continue;
        }
        ++rep.trials;
        const double slack = t.bound - t.gap;
        if (slack < rep.worst_slack) {
            rep.worst_slack = slack;
            rep.worst_trial = i;
        }
    }
    return rep;
}

struct DiagnosticsReport {
    double flatoff_R = 0.0;
    double flatoff_L = 0.0;
    double flatoff_tol = 0.0;
    double violation_sup = 0.0;
    double violation_tol = 0.0;
    double game_value_supinf = std::numeric_limits<double>::quiet_NaN();
    double game_value_infsup = std::numeric_limits<double>::quiet_NaN();
    double meanY_at_t = std::numeric_limits<double>::quiet_NaN();
    double tol_game = std::numeric_limits<double>::quiet_NaN();
    SandwichStatus sandwich_ok = SandwichStatus::not_applicable;
    std::string sandwich_witness;
    double stability_margin = std::numeric_limits<double>::quiet_NaN();
};

}  // namespace dmr
