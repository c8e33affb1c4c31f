#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "grid_paths.hpp"

namespace dmr {

/// Two-sided slope bounds: c (y - x) <= b(t,y) - b(t,x) <= C (y - x) for x < y.
struct Band {
    double c = 1.0;
    double C = 1.0;
    double ratio() const { return C / c; }
};

enum class BoundaryKind { analytic, induced, sentinel };

/// A reflecting boundary evaluated on grid indices: b(k, x) means b(t_k, x).
/// Time reversal and windowing are index remaps, so they compose exactly.
class BoundaryFn {
public:
    using Eval = std::function<double(std::size_t, double)>;

    BoundaryFn() = default;
    BoundaryFn(Eval eval, Band band, BoundaryKind kind)
        : eval_(std::make_shared<const Eval>(std::move(eval))), band_(band), kind_(kind) {}

    double operator()(std::size_t k, double x) const { return (*eval_)(k + offset_, x); }

    Band band() const { return band_; }
    BoundaryKind kind() const { return kind_; }

    /// Root tolerance used when the caller does not pick one.
    double default_tolerance() const { return kind_ == BoundaryKind::induced ? 1e-8 : 1e-10; }

    /// k -> last - k.
    BoundaryFn reversed(std::size_t last) const {
        BoundaryFn self = *this;
        return BoundaryFn(
            [self, last](std::size_t k, double x) { return self(last - k, x); }, band_, kind_);
    }

    /// k -> k + offset.
    BoundaryFn shifted(std::size_t offset) const {
        BoundaryFn out = *this;
        out.offset_ += offset;
        return out;
    }

    /// b(k, x) + delta[k].
    BoundaryFn plus(std::vector<double> delta) const {
        BoundaryFn self = *this;
        auto d = std::make_shared<const std::vector<double>>(std::move(delta));
        return BoundaryFn([self, d](std::size_t k, double x) { return self(k, x) + (*d)[k]; },
                          band_, kind_);
    }

private:
    std::shared_ptr<const Eval> eval_;
    Band band_{};
    BoundaryKind kind_ = BoundaryKind::analytic;
    std::size_t offset_ = 0;
};

/// Wraps a continuous-time map (t, x) -> value on the grid.
inline BoundaryFn analytic_boundary(const TimeGrid& grid, std::function<double(double, double)> f,
                                    Band band) {
    auto times = std::make_shared<const std::vector<double>>(grid.times);
    return BoundaryFn([times, f = std::move(f)](std::size_t k, double x) { return f((*times)[k], x); },
                      band, BoundaryKind::analytic);
}

inline constexpr double kSentinelLevel = 1e9;

/// Upper boundary that never binds (x <= 1e9).
inline BoundaryFn upper_sentinel() {
    return BoundaryFn([](std::size_t, double x) { return x - kSentinelLevel; }, Band{1.0, 1.0},
                      BoundaryKind::sentinel);
}

/// Lower boundary that never binds (x >= -1e9).
inline BoundaryFn lower_sentinel() {
    return BoundaryFn([](std::size_t, double x) { return x + kSentinelLevel; }, Band{1.0, 1.0},
                      BoundaryKind::sentinel);
}

/// Solves b(t_k, x) = 0 to |b| <= eps. The bracket [x0 - |b(x0)|/c, x0 + |b(x0)|/c]
/// must contain a sign change if the band holds; otherwise the band is violated.
inline double boundary_root(const BoundaryFn& b, std::size_t k, double eps, double x0 = 0.0) {
    auto eval = [&](double x) {
        const double v = b(k, x);
        if (!std::isfinite(v))
            throw NumericError("boundary evaluated to a non-finite value at index " +
                               std::to_string(k));
        return v;
    };
    const double v0 = eval(x0);
    if (std::abs(v0) <= eps) return x0;

    const double reach = std::abs(v0) / b.band().c;
    double lo, hi;
    if (v0 > 0.0) {
        lo = x0 - reach;
        hi = x0;
        const double flo = eval(lo);
        if (std::abs(flo) <= eps) return lo;
        if (flo > 0.0)
            throw InvariantViolation("boundary slope below declared c at index " +
                                     std::to_string(k) + " (bracket end " + std::to_string(lo) +
                                     " still positive)");
    } else {
        lo = x0;
        hi = x0 + reach;
        const double fhi = eval(hi);
        if (std::abs(fhi) <= eps) return hi;
        if (fhi < 0.0)
            throw InvariantViolation("boundary slope below declared c at index " +
                                     std::to_string(k) + " (bracket end " + std::to_string(hi) +
                                     " still negative)");
    }

    double best = lo;
    double best_val = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 2000; ++it) {
        const double mid = lo + 0.5 * (hi - lo);
        if (mid <= lo || mid >= hi) break;
        const double fm = eval(mid);
        if (std::abs(fm) <= eps) return mid;
        if (std::abs(fm) < best_val) {
            best_val = std::abs(fm);
            best = mid;
        }
        (fm < 0.0 ? lo : hi) = mid;
    }
    return best;
}

/// Constrained path x, compensator k and its Jordan parts.
/// Forward problem: k_up pushes against the lower boundary h, k_down against g.
/// Backward problem: k_up pushes against r, k_down against l.
struct SkorokhodSolution {
    std::vector<double> x;
    std::vector<double> k;
    std::vector<double> k_up;
    std::vector<double> k_down;
    std::vector<double> phi;  // upper-boundary room, root(upper) - input
    std::vector<double> psi;  // lower-boundary room, root(lower) - input
};

struct JordanParts {
    std::vector<double> up;
    std::vector<double> down;
};

/// Minimal decomposition k = k[0] + up - down with up, down nondecreasing from 0.
inline JordanParts jordan_decompose(std::span<const double> k) {
    JordanParts jp{std::vector<double>(k.size(), 0.0), std::vector<double>(k.size(), 0.0)};
    for (std::size_t i = 1; i < k.size(); ++i) {
        const double inc = k[i] - k[i - 1];
        jp.up[i] = jp.up[i - 1] + positive_part(inc);
        jp.down[i] = jp.down[i - 1] + negative_part(inc);
    }
    return jp;
}

inline double total_variation(std::span<const double> k) {
    double tv = k.empty() ? 0.0 : std::abs(k[0]);
    for (std::size_t i = 1; i < k.size(); ++i) tv += std::abs(k[i] - k[i - 1]);
    return tv;
}

template <class T>
std::vector<T> reversed_path(const std::vector<T>& v) {
    return std::vector<T>(v.rbegin(), v.rend());
}

struct SkorokhodOptions {
    /// Root tolerance; NaN selects each boundary's default.
    double eps_root = std::numeric_limits<double>::quiet_NaN();
    /// Terminal admissibility slack for the backward problem; NaN means eps_root.
    double terminal_tol = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double pick_eps(const SkorokhodOptions& opt, const BoundaryFn& a, const BoundaryFn& b) {
    if (!std::isnan(opt.eps_root)) return opt.eps_root;
    return std::max(a.default_tolerance(), b.default_tolerance());
}

struct Rooms {
    std::vector<double> phi;
    std::vector<double> psi;
};

inline Rooms boundary_rooms(std::span<const double> s, const BoundaryFn& upper,
                            const BoundaryFn& lower, double eps) {
    require_finite(s, "Skorokhod input");
    Rooms r{std::vector<double>(s.size()), std::vector<double>(s.size())};
    parallel_for(s.size(), [&](std::size_t k) {
        r.phi[k] = boundary_root(upper, k, eps, s[k]) - s[k];
        r.psi[k] = boundary_root(lower, k, eps, s[k]) - s[k];
    });
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (r.psi[k] > r.phi[k])
            throw InfeasibleBoundaries("lower boundary root exceeds upper root at index " +
                                       std::to_string(k) + " (psi=" + std::to_string(r.psi[k]) +
                                       ", phi=" + std::to_string(r.phi[k]) + ")");
    }
    return r;
}

// k_i = min(phi_i, max(psi_i, k_{i-1})), k_{-1} = 0. With pin_start the initial
// jump is suppressed (the backward problem's terminal anchor is admissible).
inline SkorokhodSolution forward_from_rooms(std::span<const double> s, Rooms rooms, bool pin_start) {
    const std::size_t n = s.size();
    SkorokhodSolution sol;
    sol.k.resize(n);
    sol.x.resize(n);
    double prev = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ki = (i == 0 && pin_start) ? 0.0 : std::min(rooms.phi[i], std::max(rooms.psi[i], prev));
        sol.k[i] = ki;
        sol.x[i] = s[i] + ki;
        prev = ki;
    }
    auto jp = jordan_decompose(sol.k);
    const double up0 = positive_part(sol.k[0]);
    const double down0 = negative_part(sol.k[0]);
    for (std::size_t i = 0; i < n; ++i) {
        jp.up[i] += up0;
        jp.down[i] += down0;
    }
    sol.k_up = std::move(jp.up);
    sol.k_down = std::move(jp.down);
    sol.phi = std::move(rooms.phi);
    sol.psi = std::move(rooms.psi);
    return sol;
}

}  // namespace detail

/// Forward two-sided Skorokhod map with upper boundary g (g(t,x) <= 0) and
/// lower boundary h (h(t,x) >= 0), O(N) running min/max recursion.
/// The initial jump k[0] is carried by k_up[0] or k_down[0].
inline SkorokhodSolution solve_forward_sp(std::span<const double> s, const BoundaryFn& g,
                                          const BoundaryFn& h, const SkorokhodOptions& opt = {}) {
    const double eps = detail::pick_eps(opt, g, h);
    return detail::forward_from_rooms(s, detail::boundary_rooms(s, g, h, eps), false);
}

/// Literal O(N^2) evaluation of
///   k_t = min( [-phi_0^-] v sup_{r<=t} psi_r , inf_{u<=t} [ phi_u v sup_{r in [u,t]} psi_r ] ).
/// Reference oracle for solve_forward_sp.
inline SkorokhodSolution solve_forward_sp_naive(std::span<const double> s, const BoundaryFn& g,
                                                const BoundaryFn& h, const SkorokhodOptions& opt = {}) {
    const double eps = detail::pick_eps(opt, g, h);
    auto rooms = detail::boundary_rooms(s, g, h, eps);
    const std::size_t n = s.size();
    const double head = -negative_part(rooms.phi[0]);
    SkorokhodSolution sol;
    sol.k.resize(n);
    sol.x.resize(n);
    double sup_psi = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
        sup_psi = std::max(sup_psi, rooms.psi[t]);
        double inner = std::numeric_limits<double>::infinity();
        double window_sup = -std::numeric_limits<double>::infinity();
        for (std::size_t u = t + 1; u-- > 0;) {
            window_sup = std::max(window_sup, rooms.psi[u]);
            inner = std::min(inner, std::max(rooms.phi[u], window_sup));
        }
        sol.k[t] = std::min(std::max(head, sup_psi), inner);
        sol.x[t] = s[t] + sol.k[t];
    }
    auto jp = jordan_decompose(sol.k);
    for (std::size_t i = 0; i < n; ++i) {
        jp.up[i] += positive_part(sol.k[0]);
        jp.down[i] += negative_part(sol.k[0]);
    }
    sol.k_up = std::move(jp.up);
    sol.k_down = std::move(jp.down);
    sol.phi = std::move(rooms.phi);
    sol.psi = std::move(rooms.psi);
    return sol;
}

/// Backward Skorokhod problem x_t = a + s_T - s_t + k_T - k_t with upper boundary l
/// and lower boundary r, solved by time reversal onto the forward map.
/// k[0] = 0; x is written through the defining identity.
inline SkorokhodSolution solve_backward_sp(std::span<const double> s, double a, const BoundaryFn& l,
                                           const BoundaryFn& r, const SkorokhodOptions& opt = {}) {
    if (s.size() < 2) throw ConfigError("backward Skorokhod problem needs at least two grid points");
    require_finite(s, "Skorokhod input");
    const std::size_t N = s.size() - 1;
    const double eps = detail::pick_eps(opt, l, r);
    const double ttol = std::isnan(opt.terminal_tol) ? eps : opt.terminal_tol;
    const double lT = l(N, a);
    const double rT = r(N, a);
    if (!(lT <= ttol) || !(rT >= -ttol))
        throw TerminalConditionError("terminal anchor inadmissible: l(T,a)=" + std::to_string(lT) +
                                     ", r(T,a)=" + std::to_string(rT) + ", tolerance " +
                                     std::to_string(ttol));

    std::vector<double> sbar(N + 1);
    for (std::size_t j = 0; j <= N; ++j) sbar[j] = a + s[N] - s[N - j];
    const BoundaryFn lbar = l.reversed(N);
    const BoundaryFn rbar = r.reversed(N);
    auto fwd = detail::forward_from_rooms(sbar, detail::boundary_rooms(sbar, lbar, rbar, eps), true);

    SkorokhodSolution sol;
    sol.k.resize(N + 1);
    sol.x.resize(N + 1);
    sol.k_up.resize(N + 1);
    sol.k_down.resize(N + 1);
    sol.phi.resize(N + 1);
    sol.psi.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
        sol.k[k] = fwd.k[N] - fwd.k[N - k];
        sol.k_up[k] = fwd.k_up[N] - fwd.k_up[N - k];
        sol.k_down[k] = fwd.k_down[N] - fwd.k_down[N - k];
        sol.phi[k] = fwd.phi[N - k];
        sol.psi[k] = fwd.psi[N - k];
    }
    for (std::size_t k = 0; k <= N; ++k) sol.x[k] = a + s[N] - s[k] + (sol.k[N] - sol.k[k]);
    return sol;
}

/// Discrete flat-off sums for a backward solution: sum_k |l(t_k,x_k)| dk_down[k]
/// and sum_k |r(t_k,x_k)| dk_up[k], increments taken over [k, k+1].
struct FlatOff {
    double upper = 0.0;  // against l (k_down)
    double lower = 0.0;  // against r (k_up)
};

inline FlatOff backward_flatoff(const SkorokhodSolution& sol, const BoundaryFn& l, const BoundaryFn& r) {
    FlatOff f;
    for (std::size_t k = 0; k + 1 < sol.x.size(); ++k) {
        f.upper += std::abs(l(k, sol.x[k])) * (sol.k_down[k + 1] - sol.k_down[k]);
        f.lower += std::abs(r(k, sol.x[k])) * (sol.k_up[k + 1] - sol.k_up[k]);
    }
    return f;
}

/// Forward counterpart: increments over [k-1, k] pair with the value at k.
inline FlatOff forward_flatoff(const SkorokhodSolution& sol, const BoundaryFn& g, const BoundaryFn& h) {
    FlatOff f;
    for (std::size_t k = 0; k < sol.x.size(); ++k) {
        const double dd = sol.k_down[k] - (k ? sol.k_down[k - 1] : 0.0);
        const double du = sol.k_up[k] - (k ? sol.k_up[k - 1] : 0.0);
        f.upper += std::abs(g(k, sol.x[k])) * dd;
        f.lower += std::abs(h(k, sol.x[k])) * du;
    }
    return f;
}

/// Discrete check of the backward definition: identity, feasibility, Jordan
/// structure and flat-off.
struct BackwardAudit {
    double identity_error = 0.0;    // max |x_k - (a + s_N - s_k + k_N - k_k)|
    double feasibility = 0.0;       // max(l(t,x)^+, r(t,x)^-)
    double jordan_error = 0.0;      // max |k - (k_up - k_down)|
    double monotone_defect = 0.0;   // largest decrease of k_up or k_down
    double start_defect = 0.0;      // |k_up[0]| + |k_down[0]| + |k[0]|
    FlatOff flatoff;
    double total_variation = 0.0;
};

inline BackwardAudit audit_backward(const SkorokhodSolution& sol, std::span<const double> s, double a,
                                    const BoundaryFn& l, const BoundaryFn& r) {
    BackwardAudit au;
    const std::size_t N = s.size() - 1;
    for (std::size_t k = 0; k <= N; ++k) {
        const double expect = a + s[N] - s[k] + (sol.k[N] - sol.k[k]);
        au.identity_error = std::max(au.identity_error, std::abs(sol.x[k] - expect));
        au.feasibility = std::max({au.feasibility, positive_part(l(k, sol.x[k])),
                                   negative_part(r(k, sol.x[k]))});
        au.jordan_error = std::max(au.jordan_error, std::abs(sol.k[k] - (sol.k_up[k] - sol.k_down[k])));
        if (k > 0) {
            au.monotone_defect = std::max({au.monotone_defect, sol.k_up[k - 1] - sol.k_up[k],
                                           sol.k_down[k - 1] - sol.k_down[k]});
        }
    }
    au.start_defect = std::abs(sol.k_up[0]) + std::abs(sol.k_down[0]) + std::abs(sol.k[0]);
    au.flatoff = backward_flatoff(sol, l, r);
    au.total_variation = total_variation(sol.k);
    return au;
}

/// Right-hand side of the compensator stability estimate for the backward problem:
/// 2(C/c)|da| + 4(C/c) sup|ds| + (2/c) max(sup|dl|, sup|dr|).
inline double backward_stability_bound(Band band, double da, double ds_sup, double dl_sup, double dr_sup) {
    return 2.0 * band.ratio() * std::abs(da) + 4.0 * band.ratio() * ds_sup +
           (2.0 / band.c) * std::max(dl_sup, dr_sup);
}

}  // namespace dmr
