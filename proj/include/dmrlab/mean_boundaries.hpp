#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"
#include "grid_paths.hpp"
#include "skorokhod.hpp"

namespace dmr {

/// Deterministic level t -> value: piecewise-linear through breakpoints
/// (flat outside them) or a polynomial in t.
class Obstacle {
public:
    enum class Kind { piecewise_linear, poly };

    static Obstacle constant(double v) { return poly({v}); }
    static Obstacle poly(std::vector<double> coeffs) {
        if (coeffs.empty()) throw ConfigError("poly obstacle needs at least one coefficient");
        Obstacle o;
        o.kind_ = Kind::poly;
        o.coeffs_ = std::move(coeffs);
        return o;
    }
    static Obstacle piecewise_linear(std::vector<std::pair<double, double>> points) {
        if (points.empty()) throw ConfigError("piecewise_linear obstacle needs breakpoints");
        for (std::size_t i = 1; i < points.size(); ++i)
            if (!(points[i].first > points[i - 1].first))
                throw ConfigError("piecewise_linear breakpoints must have increasing times");
        Obstacle o;
        o.kind_ = Kind::piecewise_linear;
        o.points_ = std::move(points);
        return o;
    }

    double operator()(double t) const {
        if (kind_ == Kind::poly) {
            double acc = 0.0;
            for (auto it = coeffs_.rbegin(); it != coeffs_.rend(); ++it) acc = acc * t + *it;
            return acc;
        }
        if (t <= points_.front().first) return points_.front().second;
        if (t >= points_.back().first) return points_.back().second;
        auto hi = std::upper_bound(points_.begin(), points_.end(), t,
                                   [](double v, const auto& p) { return v < p.first; });
        auto lo = hi - 1;
        const double w = (t - lo->first) / (hi->first - lo->first);
        return lo->second + w * (hi->second - lo->second);
    }

    Kind kind() const { return kind_; }
    const std::vector<double>& coeffs() const { return coeffs_; }
    const std::vector<std::pair<double, double>>& points() const { return points_; }

private:
    Kind kind_ = Kind::poly;
    std::vector<double> coeffs_{0.0};
    std::vector<std::pair<double, double>> points_;
};

enum class LossBase { affine, tanh_warp };
enum class PathFeature { none, brownian, abs_brownian };

/// Catalog loss (omega, t, y) -> y + alpha tanh(y) - obstacle(t) + kappa eta_t(omega),
/// with alpha = 0 for the affine entry and eta = B_t or |B_t|.
struct LossFn {
    LossBase base = LossBase::affine;
    double alpha = 0.0;
    Obstacle obstacle;
    PathFeature feature = PathFeature::none;
    double kappa = 0.0;

    static LossFn affine(Obstacle obs) { return LossFn{LossBase::affine, 0.0, std::move(obs)}; }
    static LossFn tanh_warp(double alpha, Obstacle obs) {
        if (!(std::abs(alpha) < 1.0)) throw ConfigError("tanh_warp needs |alpha| < 1");
        return LossFn{LossBase::tanh_warp, alpha, std::move(obs)};
    }
    LossFn with_shift(PathFeature f, double k) const {
        LossFn out = *this;
        out.feature = f;
        out.kappa = k;
        return out;
    }

    bool has_shift() const { return feature != PathFeature::none && kappa != 0.0; }
    bool is_linear() const { return base == LossBase::affine || alpha == 0.0; }
    double warp_alpha() const { return is_linear() ? 0.0 : alpha; }

    /// Slope band in y: derivative 1 + alpha sech^2(y) lies between 1 and 1 + alpha.
    Band band() const {
        if (is_linear()) return {1.0, 1.0};
        return alpha > 0.0 ? Band{1.0, 1.0 + alpha} : Band{1.0 + alpha, 1.0};
    }

    double warp(double y) const { return is_linear() ? y : y + alpha * std::tanh(y); }

    double feature_value(double w) const {
        switch (feature) {
            case PathFeature::brownian: return w;
            case PathFeature::abs_brownian: return std::abs(w);
            case PathFeature::none: break;
        }
        return 0.0;
    }
};

inline double eval_loss(const LossFn& loss, double eta, double t, double y) {
    return loss.warp(y) - loss.obstacle(t) + loss.kappa * eta;
}

/// Deterministic boundary (t, x) -> loss(eta = 0, t, x) for the Skorokhod tool.
inline BoundaryFn loss_boundary(const TimeGrid& grid, const LossFn& loss) {
    return analytic_boundary(grid, [loss](double t, double x) { return eval_loss(loss, 0.0, t, x); },
                             loss.band());
}

/// Per-path feature values eta(omega, t_k) on columns [k0, k0 + cols).
inline PathArray feature_paths(const LossFn& loss, const PathEnsemble& ens, std::size_t k0,
                               std::size_t cols) {
    PathArray eta(ens.M, cols, 0.0);
    if (!loss.has_shift()) return eta;
    for (std::size_t j = 0; j < cols; ++j) {
        auto w = ens.W.column(k0 + j);
        auto out = eta.column(j);
        for (std::size_t m = 0; m < ens.M; ++m) out[m] = loss.feature_value(w[m]);
    }
    return eta;
}

namespace detail {

struct InducedData {
    std::vector<double> times;
    std::vector<double> shift_mean;  // kappa * mean(eta) per column
    PathArray centered;              // S - mean(S), tanh case only
    PathArray eta;                   // tanh case with shift only
    LossFn loss;
};

}  // namespace detail

/// Boundary x -> mean over paths of loss(eta_k, t_k, x + S_k - mean(S_k)) on the
/// columns of S (column j sits at times[j]). For linear losses the centering
/// cancels and the map is evaluated in closed form, independent of S.
inline BoundaryFn induced_boundary(std::span<const double> times, const PathArray& S, const LossFn& loss,
                                   const PathArray* eta = nullptr) {
    if (S.paths() == 0) throw NumericError("induced boundary needs a nonempty ensemble");
    if (times.size() != S.times()) throw ConfigError("induced boundary: time/column mismatch");
    require_finite(S.raw(), "induced boundary input");

    auto data = std::make_shared<detail::InducedData>();
    data->times.assign(times.begin(), times.end());
    data->loss = loss;
    data->shift_mean.assign(times.size(), 0.0);
    const bool shifted = loss.has_shift() && eta != nullptr;
    if (shifted)
        for (std::size_t j = 0; j < times.size(); ++j)
            data->shift_mean[j] = loss.kappa * eta->column_mean(j);

    if (loss.is_linear()) {
        return BoundaryFn(
            [data](std::size_t k, double x) {
                return x - data->loss.obstacle(data->times[k]) + data->shift_mean[k];
            },
            loss.band(), BoundaryKind::induced);
    }

    data->centered = PathArray(S.paths(), S.times());
    for (std::size_t j = 0; j < S.times(); ++j) {
        auto src = S.column(j);
        auto dst = data->centered.column(j);
        const double mu = pairwise_mean(src);
        for (std::size_t m = 0; m < src.size(); ++m) dst[m] = src[m] - mu;
    }
    if (shifted) data->eta = *eta;
    return BoundaryFn(
        [data, shifted](std::size_t k, double x) {
            auto c = data->centered.column(k);
            const LossFn& L = data->loss;
            const double obs = L.obstacle(data->times[k]);
            if (shifted) {
                auto e = data->eta.column(k);
                return pairwise_mean(c.size(), [&](std::size_t m) {
                    return L.warp(x + c[m]) - obs + L.kappa * e[m];
                });
            }
            return pairwise_mean(c.size(), [&](std::size_t m) { return L.warp(x + c[m]); }) - obs;
        },
        loss.band(), BoundaryKind::induced);
}

/// Upper (L) and lower (R) losses with a declared separation R - L >= gap.
struct LossPair {
    LossFn L;
    LossFn R;
    double gap = 0.0;
};

/// Infimum over (omega, y) of R - L at time t. Infinite negative when the
/// shifts differ on an unbounded feature.
inline double pair_separation(const LossPair& p, double t) {
    double sep = p.L.obstacle(t) - p.R.obstacle(t) - std::abs(p.R.warp_alpha() - p.L.warp_alpha());
    const double kr = p.R.feature != PathFeature::none ? p.R.kappa : 0.0;
    const double kl = p.L.feature != PathFeature::none ? p.L.kappa : 0.0;
    if (kr != kl) {
        if (p.R.feature != p.L.feature && kr != 0.0 && kl != 0.0)
            return -std::numeric_limits<double>::infinity();
        const PathFeature f = kr != 0.0 ? p.R.feature : p.L.feature;
        if (f == PathFeature::brownian || kr - kl < 0.0) return -std::numeric_limits<double>::infinity();
    }
    return sep;
}

/// Minimum separation over the grid; throws if below the declared gap.
inline double check_separation(const LossPair& p, const TimeGrid& grid) {
    double worst = std::numeric_limits<double>::infinity();
    std::size_t at = 0;
    for (std::size_t k = 0; k <= grid.N; ++k) {
        const double s = pair_separation(p, grid.t(k));
        if (s < worst) {
            worst = s;
            at = k;
        }
    }
    if (!(worst >= p.gap) || !(worst > 0.0)) {
        std::ostringstream os;
        os << "loss separation inf(R - L) = " << worst << " at t = " << grid.t(at)
           << " is below the declared gap " << p.gap;
        throw InvariantViolation(os.str());
    }
    return worst;
}

struct BandSampling {
    std::size_t samples = 2000;
    double x_lo = -6.0;
    double x_hi = 6.0;
    std::size_t times = 0;  // number of grid indices; sampled uniformly in [0, times)
    std::uint64_t seed = 12345;
    double rel_tol = 1e-9;
};

struct BandReport {
    double min_slope = std::numeric_limits<double>::infinity();
    double max_slope = -std::numeric_limits<double>::infinity();
    double min_separation = std::numeric_limits<double>::infinity();
};

/// Samples (k, x, y) and checks c (y - x) <= b(k,y) - b(k,x) <= C (y - x).
inline BandReport verify_band(const BoundaryFn& b, const BandSampling& spec) {
    if (spec.times == 0) throw ConfigError("band sampling needs a positive time count");
    std::mt19937_64 eng(spec.seed);
    std::uniform_real_distribution<double> ux(spec.x_lo, spec.x_hi);
    std::uniform_int_distribution<std::size_t> uk(0, spec.times - 1);
    BandReport rep;
    const Band band = b.band();
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const std::size_t k = uk(eng);
        double x = ux(eng), y = ux(eng);
        if (x == y) continue;
        if (x > y) std::swap(x, y);
        const double slope = (b(k, y) - b(k, x)) / (y - x);
        rep.min_slope = std::min(rep.min_slope, slope);
        rep.max_slope = std::max(rep.max_slope, slope);
        if (slope < band.c * (1.0 - spec.rel_tol) - spec.rel_tol ||
            slope > band.C * (1.0 + spec.rel_tol) + spec.rel_tol) {
            std::ostringstream os;
            os << "band violation at index " << k << ", x=" << x << ", y=" << y << ": slope " << slope
               << " outside [" << band.c << ", " << band.C << "]";
            throw InvariantViolation(os.str());
        }
    }
    return rep;
}

/// Band check on both induced boundaries plus the separation lower(k,x) - upper(k,x) >= gap.
inline BandReport verify_band(const BoundaryFn& upper, const BoundaryFn& lower, double gap,
                              const BandSampling& spec) {
    BandReport a = verify_band(upper, spec);
    BandReport b = verify_band(lower, spec);
    BandReport rep{std::min(a.min_slope, b.min_slope), std::max(a.max_slope, b.max_slope)};
    std::mt19937_64 eng(spec.seed + 1);
    std::uniform_real_distribution<double> ux(spec.x_lo, spec.x_hi);
    std::uniform_int_distribution<std::size_t> uk(0, spec.times - 1);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const std::size_t k = uk(eng);
        const double x = ux(eng);
        const double sep = lower(k, x) - upper(k, x);
        rep.min_separation = std::min(rep.min_separation, sep);
        if (sep < gap * (1.0 - spec.rel_tol) - spec.rel_tol) {
            std::ostringstream os;
            os << "separation violation at index " << k << ", x=" << x << ": " << sep << " < gap " << gap;
            throw InvariantViolation(os.str());
        }
    }
    return rep;
}

}  // namespace dmr
