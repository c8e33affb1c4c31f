#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include <dmrlab/penalized_solver.hpp>

using namespace dmr;

namespace {

struct Forcing {
    PathEnsemble ens;
    std::vector<double> xi;
    LinearObstacles obs;
};

// xi = 0.5 + B_1 between -t and t: the upper obstacle binds on the whole horizon.
Forcing forcing_problem(std::size_t N = 100, std::size_t M = 4000) {
    Forcing f{sample_ensemble(make_grid(1.0, N), M, 7), {}, {}};
    f.xi = terminal_values(f.ens, TerminalSpec::affine(0.5, 1.0));
    f.obs = LinearObstacles::sample(f.ens.grid, Obstacle::poly({0.0, -1.0}), Obstacle::poly({0.0, 1.0}));
    return f;
}

}  // namespace

TEST_CASE("implicit penalty step: worked values") {
    CHECK(implicit_penalty_step(-0.1, 0.0, 1.0, 1.0) == Catch::Approx(-0.05));
    CHECK(implicit_penalty_step(1.2, 0.0, 1.0, 1.0) == Catch::Approx(1.1));
    CHECK(implicit_penalty_step(0.5, 0.0, 1.0, 1.0) == 0.5);
    CHECK(implicit_penalty_step(3.0, 0.0, 1.0, 0.0) == 3.0);
}

TEST_CASE("implicit penalty step solves its equation and is monotone") {
    std::mt19937_64 eng(3);
    std::uniform_real_distribution<double> u(-3.0, 3.0), w(0.0, 50.0);
    for (int i = 0; i < 5000; ++i) {
        double l = u(eng), r = u(eng);
        if (l > r) std::swap(l, r);
        const double ndt = w(eng);
        const double yt = u(eng);
        const double y = implicit_penalty_step(yt, l, r, ndt);
        const double residual = y - (yt + ndt * negative_part(y - l) - ndt * positive_part(y - r));
        REQUIRE(std::abs(residual) <= 1e-12 * (1.0 + ndt));
        // Lies between ytilde and its projection on [l, r].
        const double proj = std::clamp(yt, l, r);
        REQUIRE(y >= std::min(yt, proj) - 1e-15);
        REQUIRE(y <= std::max(yt, proj) + 1e-15);
        const double y2 = implicit_penalty_step(yt + 0.01, l, r, ndt);
        REQUIRE(y2 >= y);
    }
}

TEST_CASE("obstacle validation") {
    const auto g = make_grid(1.0, 10);
    CHECK_THROWS_AS(LinearObstacles::sample(g, Obstacle::constant(-1.0), Obstacle::constant(1.0)), ConfigError);
    CHECK_NOTHROW(LinearObstacles::sample(g, Obstacle::constant(-1.0), Obstacle::constant(1.0), true));
    CHECK_THROWS_AS(LinearObstacles::sample(g, Obstacle::poly({0.0, 1.0}), Obstacle::poly({0.0, -1.0})), ConfigError);
    LinearObstacles bad{{0.0, 1.0}, {0.0}, false};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("wide obstacles reproduce the unreflected scheme bit for bit") {
    const auto f = forcing_problem(50, 2000);
    const auto wide = LinearObstacles::sample(f.ens.grid, Obstacle::constant(-50.0), Obstacle::constant(50.0), true);
    const auto driver = DriverSpec::lipschitz(0.3, 0.2, {0.1});
    const auto pen = penalized_solve(f.ens, driver, f.xi, wide, 1000.0, RegressionSpec{});
    const auto ref = solve_unreflected(f.ens, driver, f.xi, RegressionSpec{});
    CHECK(pen.Y == ref.Y);
    CHECK(pen.Z == ref.Z);
    CHECK(pen.K_l.back() == 0.0);
    CHECK(pen.K_r.back() == 0.0);
    CHECK(pen.pen_l == 0.0);
    CHECK(pen.pen_r == 0.0);
}

TEST_CASE("a centred terminal value between -t and t needs no push") {
    const auto ens = sample_ensemble(make_grid(1.0, 50), 2000, 4, true);
    const auto xi = terminal_values(ens, TerminalSpec::affine(0.0, 1.0));
    const auto obs = LinearObstacles::sample(ens.grid, Obstacle::poly({0.0, -1.0}), Obstacle::poly({0.0, 1.0}));
    const auto sol = penalized_solve(ens, DriverSpec::zero(), xi, obs, 256.0, RegressionSpec{});
    CHECK(sol.K_l.back() <= 1e-12);
    CHECK(sol.K_r.back() <= 1e-12);
    for (double m : sol.meanY) CHECK(std::abs(m) <= 1e-12);
}

TEST_CASE("penalized compensators are nondecreasing and only the binding side pushes") {
    const auto f = forcing_problem();
    const auto sol = penalized_solve(f.ens, DriverSpec::zero(), f.xi, f.obs, 64.0, RegressionSpec{});
    for (std::size_t k = 1; k < sol.K_r.size(); ++k) {
        REQUIRE(sol.K_r[k] >= sol.K_r[k - 1]);
        REQUIRE(sol.K_l[k] >= sol.K_l[k - 1]);
    }
    CHECK(sol.K_r.back() > 0.1);
    CHECK(sol.K_l.back() == 0.0);
    CHECK(sol.pen_l == 0.0);
    CHECK(sol.pen_r > 0.0);
}

TEST_CASE("penetration decays like n^-2 and the mean converges to the reflected one") {
    const auto f = forcing_problem(200, 10000);
    const auto ref = picard_solve(f.ens, DriverSpec::zero(), f.xi,
                                  affine_losses(Obstacle::poly({0.0, -1.0}), Obstacle::poly({0.0, 1.0})),
                                  PicardConfig{}, RegressionSpec{});
    const std::vector<double> ns{4.0, 16.0, 64.0, 256.0};
    const auto sweep = convergence_sweep(f.ens, DriverSpec::zero(), f.xi, f.obs, ns, RegressionSpec{}, &ref.meanY);
    CHECK(sweep.slope_r >= -2.4);
    CHECK(sweep.slope_r <= -1.6);
    CHECK(std::isnan(sweep.slope_l));
    for (std::size_t i = 1; i < sweep.rows.size(); ++i) {
        CHECK(sweep.rows[i].dist_to_ref < sweep.rows[i - 1].dist_to_ref);
        CHECK(sweep.rows[i].pen_r < sweep.rows[i - 1].pen_r);
        CHECK(sweep.rows[i].supY2 <= 2.0 * sweep.rows[0].supY2);
        CHECK(sweep.rows[i].intZ2 <= 2.0 * sweep.rows[0].intZ2);
    }
    CHECK(sweep.rows.back().dist_to_ref <= 0.05);
    CHECK(std::isnan(sweep.rows[0].cauchy));
    CHECK(sweep.rows.back().cauchy < sweep.rows[1].cauchy);
}

TEST_CASE("penalized stability estimate has a moderate constant") {
    const auto f = forcing_problem(50, 4000);
    auto xi2 = f.xi;
    for (double& v : xi2) v += 0.1;
    const auto same = penalized_stability(f.ens, DriverSpec::zero(), f.xi, DriverSpec::zero(), f.xi, f.obs, 64.0,
                                          RegressionSpec{});
    CHECK(same.lhs == 0.0);
    CHECK(same.rhs == 0.0);
    const auto diff = penalized_stability(f.ens, DriverSpec::zero(), f.xi, DriverSpec::affine({0.0}, {0.0}, {0.2}),
                                          xi2, f.obs, 64.0, RegressionSpec{});
    CHECK(diff.lhs > 0.0);
    CHECK(diff.rhs == Catch::Approx(0.01 + 0.04).epsilon(1e-9));
    CHECK(diff.ratio <= 10.0);
}

TEST_CASE("log-log slope") {
    const std::vector<double> x{1.0, 2.0, 4.0, 8.0};
    std::vector<double> y;
    for (double v : x) y.push_back(3.0 / (v * v));
    CHECK(loglog_slope(x, y) == Catch::Approx(-2.0).epsilon(1e-12));
    y[2] = 0.0;
    CHECK(std::isnan(loglog_slope(x, y)));
    CHECK(std::isnan(loglog_slope(std::vector<double>{1.0}, std::vector<double>{1.0})));
}

TEST_CASE("penalized solver input validation") {
    const auto f = forcing_problem(20, 400);
    CHECK_THROWS_AS(penalized_solve(f.ens, DriverSpec::zero(), f.xi, f.obs, -1.0, RegressionSpec{}), ConfigError);
    const auto g = make_grid(1.0, 10);
    CHECK_THROWS_AS(penalized_solve(f.ens, DriverSpec::zero(), f.xi,
                                    LinearObstacles::sample(g, Obstacle::constant(0.0), Obstacle::constant(0.0)),
                                    4.0, RegressionSpec{}),
                    ConfigError);
    auto high = f.xi;
    for (double& v : high) v += 5.0;
    try {
        penalized_solve(f.ens, DriverSpec::zero(), high, f.obs, 4.0, RegressionSpec{});
        FAIL("expected a terminal admissibility failure");
    } catch (const TerminalConditionError& e) {
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("E[xi] <= r_T"));
    }
    const std::vector<double> one{4.0};
    CHECK_THROWS_AS(convergence_sweep(f.ens, DriverSpec::zero(), f.xi, f.obs, one, RegressionSpec{}), ConfigError);
    const std::vector<double> down{16.0, 4.0};
    CHECK_THROWS_AS(convergence_sweep(f.ens, DriverSpec::zero(), f.xi, f.obs, down, RegressionSpec{}), ConfigError);
}
