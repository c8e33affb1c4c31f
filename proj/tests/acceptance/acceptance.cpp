// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <dmrlab/diagnostics.hpp>

#include "support/problems.hpp"
#include "support/random_instances.hpp"

using namespace dmr;
using namespace dmr::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

BoundaryFn level_boundary(const TimeGrid& g, std::function<double(double)> level) {
    return analytic_boundary(g, [level](double t, double x) { return x - level(t); }, Band{1.0, 1.0});
}

double sup_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Outcome oracle_equivalence() {
    const auto t0 = Clock::now();
    std::mt19937_64 eng(500);
    std::uniform_int_distribution<std::size_t> size(10, 100);
    double worst = 0.0;
    for (int i = 0; i < 500; ++i) {
        const auto inst = random_forward_instance(eng, i % 2 == 1, size(eng));
        const auto fast = solve_forward_sp(inst.s, inst.upper, inst.lower);
        const auto naive = solve_forward_sp_naive(inst.s, inst.upper, inst.lower);
        worst = std::max(worst, sup_abs_diff(fast.k, naive.k));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-12 && secs < 10.0, fmt("500 instances, max|k_fast - k_naive| = %.3g, %.2f s", worst, secs)};
}

Outcome hand_examples() {
    const auto g = make_grid(1.0, 200);
    std::vector<double> s(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) s[k] = 2.0 * g.t(k);
    const auto fwd = solve_forward_sp(s, level_boundary(g, [](double) { return 1.0; }),
                                      level_boundary(g, [](double) { return -1.0; }));
    double ef = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k)
        ef = std::max(ef, std::abs(fwd.k[k] + std::max(0.0, 2.0 * g.t(k) - 1.0)));

    const std::vector<double> zero(g.size(), 0.0);
    const auto bwd = solve_backward_sp(zero, 0.0, level_boundary(g, [](double) { return 2.0; }),
                                       level_boundary(g, [](double t) { return 1.0 - 2.0 * t; }));
    double eb = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k)
        eb = std::max(eb, std::abs((bwd.k.back() - bwd.k[k]) - std::max(0.0, 1.0 - 2.0 * g.t(k))));
    return {ef <= 1e-12 && eb <= 1e-12, fmt("forward err %.3g, backward err %.3g", ef, eb)};
}

Outcome definitional_audit() {
    std::mt19937_64 eng(303);
    const double eps = 1e-10;
    bool ok = true;
    double worst_id = 0.0, worst_feas = 0.0, worst_flat_ratio = 0.0;
    for (int i = 0; i < 300; ++i) {
        const auto inst = random_backward_instance(eng, i % 2 == 0, 20 + (i % 81));
        const auto sol = solve_backward_sp(inst.s, inst.a, inst.l, inst.r);
        const auto au = audit_backward(sol, inst.s, inst.a, inst.l, inst.r);
        const double ratio = std::max(inst.l.band().ratio(), inst.r.band().ratio());
        const double eflat = 10.0 * eps * au.total_variation;
        ok = ok && au.identity_error == 0.0 && au.feasibility <= eps * (1.0 + ratio) &&
             au.flatoff.upper <= eflat && au.flatoff.lower <= eflat && au.jordan_error <= 1e-12 &&
             au.monotone_defect <= 0.0 && au.start_defect == 0.0;
        worst_id = std::max(worst_id, au.identity_error);
        worst_feas = std::max(worst_feas, au.feasibility / (eps * (1.0 + ratio)));
        if (eflat > 0.0)
            worst_flat_ratio = std::max(worst_flat_ratio, std::max(au.flatoff.upper, au.flatoff.lower) / eflat);
    }
    return {ok, fmt("300 instances, identity err %.3g, feasibility/tol %.3g, flat-off/eps_flat %.3g", worst_id,
                    worst_feas, worst_flat_ratio)};
}

Outcome stability_suite() {
    const auto t0 = Clock::now();
    std::mt19937_64 eng(404);
    double worst = std::numeric_limits<double>::infinity();
    std::size_t pairs = 0, skipped = 0;
    for (int i = 0; i < 20; ++i) {
        const auto inst = random_backward_instance(eng, i % 2 == 1, 100);
        const SkorokhodInstance base{inst.s, inst.a, inst.l, inst.r};
        const auto rep = stability_check(base, PerturbationSpec{}, 10, 1000 + i);
        worst = std::min(worst, rep.worst_slack);
        pairs += rep.trials;
        skipped += rep.skipped;
    }
    // Top up until 200 admissible pairs have been compared.
    for (int i = 0; pairs < 200; ++i) {
        const auto inst = random_backward_instance(eng, i % 2 == 1, 100);
        const SkorokhodInstance base{inst.s, inst.a, inst.l, inst.r};
        const auto rep = stability_check(base, PerturbationSpec{}, 200 - pairs, 5000 + i);
        worst = std::min(worst, rep.worst_slack);
        pairs += rep.trials;
        skipped += rep.skipped;
    }
    const double secs = seconds_since(t0);
    return {worst >= 0.0 && secs < 30.0,
            fmt("%zu pairs (%zu inadmissible draws skipped), min slack %.4g, %.2f s", pairs, skipped, worst, secs)};
}

Outcome bsde_hand() {
    const auto t0 = Clock::now();
    const auto p = hand_problem(200, 20000);
    const auto sol = picard_solve(p.ens, p.driver, p.xi, p.losses, PicardConfig{}, RegressionSpec{});
    const auto& g = p.ens.grid;
    double sup_err = 0.0;
    for (std::size_t k = 0; k <= g.N; ++k)
        sup_err = std::max(sup_err, std::abs(sol.meanY[k] - std::max(0.0, 1.0 - 2.0 * g.t(k))));
    const auto fo = flatoff_residual(sol, p.losses, p.ens);
    const double eflat = 1e-6 * (1.0 + total_variation(sol.K));
    double zdev = 0.0;
    for (std::size_t k = 0; k <= g.N; ++k)
        for (double z : sol.Z.column(k)) zdev += std::abs(z - 1.0);
    zdev /= static_cast<double>((g.N + 1) * p.ens.M);
    const double secs = seconds_since(t0);
    return {sup_err <= 0.02 && fo.R <= eflat && fo.L <= eflat && zdev <= 0.05 && secs < 60.0,
            fmt("sup|meanY - (1-2t)+| = %.4f, flat-off (%.3g, %.3g) vs %.3g, mean|Z - 1| = %.4f, %.2f s", sup_err,
                fo.R, fo.L, eflat, zdev, secs)};
}

Outcome picard_contraction() {
    const auto p = nonlinear_problem();
    PicardConfig cfg;
    cfg.max_iter = 40;
    cfg.tol = 1e-10;
    const auto sol = picard_solve(p.ens, p.driver, p.xi, p.losses, cfg, RegressionSpec{});
    const auto& tr = sol.traces.at(0);
    bool ratios_ok = tr.size() >= 4;
    double worst_ratio = 0.0;
    for (std::size_t i = 1; i < tr.size(); ++i) {
        if (tr[i - 1] == 0.0) break;
        const double r = tr[i] / tr[i - 1];
        worst_ratio = std::max(worst_ratio, r);
        ratios_ok = ratios_ok && r < 1.0;
    }
    return {sol.converged && ratios_ok && tr.back() <= 1e-6,
            fmt("%zu iterations, max ratio %.3f, terminal delta %.3g", tr.size(), worst_ratio, tr.back())};
}

struct SweepRun {
    SweepResult sweep;
    DmrSolution picard;
};

const SweepRun& forcing_sweep() {
    static const SweepRun run = [] {
        const auto f = forcing_problem(200, 10000);
        auto ref = picard_solve(f.ens, DriverSpec::zero(), f.xi, f.losses, PicardConfig{}, RegressionSpec{});
        const std::vector<double> ns{4.0, 16.0, 64.0, 256.0};
        auto sw = convergence_sweep(f.ens, DriverSpec::zero(), f.xi, f.obs, ns, RegressionSpec{}, &ref.meanY);
        return SweepRun{std::move(sw), std::move(ref)};
    }();
    return run;
}

Outcome penalization_decay() {
    const auto& sw = forcing_sweep().sweep;
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& row : sw.rows) {
        lo = std::min(lo, row.supY2);
        hi = std::max(hi, row.supY2);
    }
    const bool slope_ok = std::abs(sw.slope_r + 2.0) <= 0.4;
    return {slope_ok && hi <= 2.0 * lo, fmt("slope %.3f, sup mean(Y^2) in [%.4f, %.4f]", sw.slope_r, lo, hi)};
}

Outcome cross_method() {
    const auto& sw = forcing_sweep().sweep;
    bool monotone = true;
    std::ostringstream ds;
    for (std::size_t i = 0; i < sw.rows.size(); ++i) {
        ds << (i ? ", " : "") << fmt("%.4f", sw.rows[i].dist_to_ref);
        if (i) monotone = monotone && sw.rows[i].dist_to_ref <= 1.2 * sw.rows[i - 1].dist_to_ref;
    }
    const double last = sw.rows.back().dist_to_ref;
    return {last <= 0.05 && monotone, "sup|meanY^n - meanY^Picard| for n = 4, 16, 64, 256: " + ds.str()};
}

Outcome dynkin_game() {
    bool ok = true;
    std::ostringstream d;
    auto game = [&](const char* name, const Problem& p, PicardConfig cfg) {
        const auto sol = picard_solve(p.ens, p.driver, p.xi, p.losses, cfg, RegressionSpec{});
        for (std::size_t k : {std::size_t{0}, p.ens.N() / 2}) {
            const auto g = dynkin_value(sol, p.driver, p.xi, p.losses, p.ens, k, RegressionSpec{});
            const double gap = std::abs(g.supinf - g.infsup);
            const double dev = std::abs(g.supinf - g.meanY);
            ok = ok && gap <= 2.0 * g.tol_game && dev <= g.tol_game;
            d << fmt("%s t=%.1f: |supinf-infsup| %.2g, |supinf-meanY| %.2g (tol %.2g); ", name, p.ens.grid.t(k), gap,
                     dev, g.tol_game);
        }
    };
    game("hand", hand_problem(100, 10000), PicardConfig{});
    PicardConfig nl;
    nl.max_iter = 40;
    game("nonlinear", nonlinear_problem(), nl);

    const auto p = trivial_game_problem();
    const auto sol = picard_solve(p.ens, p.driver, p.xi, p.losses, PicardConfig{}, RegressionSpec{});
    const auto g = dynkin_value(sol, p.driver, p.xi, p.losses, p.ens, 0, RegressionSpec{});
    const double err = std::max({std::abs(g.supinf), std::abs(g.infsup)});
    ok = ok && err <= 1e-10;
    d << fmt("trivial value err %.2g", err);
    return {ok, d.str()};
}

Outcome sandwich() {
    bool ok = true;
    std::ostringstream d;
    for (const auto& [name, p] : {std::pair{"inactive", inactive_problem()}, std::pair{"hand", hand_problem(50, 4000)}}) {
        const auto rep = sandwich_check(p.ens, p.driver, p.xi, p.losses, PicardConfig{}, RegressionSpec{});
        double defect = 0.0;
        if (rep.lower.applicable) defect = std::max(defect, rep.lower.order_defect);
        if (rep.upper.applicable) defect = std::max(defect, rep.upper.order_defect);
        ok = ok && rep.status == SandwichStatus::holds && defect <= 1e-6;
        d << name << ": " << to_string(rep.status) << fmt(" (defect %.2g, ", defect) << rep.witness << "); ";
    }
    const auto neg = interlocked_problem();
    const auto rep = sandwich_check(neg.ens, neg.driver, neg.xi, neg.losses, PicardConfig{}, RegressionSpec{});
    ok = ok && rep.status == SandwichStatus::not_applicable;
    d << "interlocked: " << to_string(rep.status);
    return {ok, d.str()};
}

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream os;
        os << in.rdbuf();
        files[e.path().filename().string()] = os.str();
    }
    return files;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / ("dmrlab_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    const std::vector<std::pair<std::string, std::string>> runs{
        {"solve", "nonlinear_tanh.json"}, {"dynkin", "hand.json"}, {"compare", "forcing_linear.json"}};
    bool ok = true;
    std::size_t files = 0;
    for (const auto& [cmd, scenario] : runs) {
        std::map<std::string, std::string> first;
        for (int threads : {1, 4, 7}) {
            const fs::path out = root / (cmd + "_" + std::to_string(threads));
            const std::string line = std::string(DMRLAB_TOOL) + " " + cmd + " --config " + DMRLAB_SCENARIOS + "/" +
                                     scenario + " --out " + out.string() + " --threads " + std::to_string(threads) +
                                     " >/dev/null 2>&1";
            const int status = std::system(line.c_str());
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
                ok = false;
                continue;
            }
            const auto bytes = directory_bytes(out);
            if (first.empty()) {
                first = bytes;
                files += bytes.size();
            } else {
                ok = ok && bytes == first;
            }
        }
        ok = ok && !first.empty();
    }
    fs::remove_all(root);
    return {ok, fmt("%zu output files compared across --threads 1, 4, 7", files)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"Skorokhod oracle equivalence", oracle_equivalence},
        {"hand-solved Skorokhod examples", hand_examples},
        {"backward definitional audit", definitional_audit},
        {"compensator stability suite", stability_suite},
        {"BSDE hand scenario", bsde_hand},
        {"Picard contraction", picard_contraction},
        {"penalization decay", penalization_decay},
        {"cross-method agreement", cross_method},
        {"Dynkin game value", dynkin_game},
        {"sandwich ordering", sandwich},
        {"determinism across thread counts", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria failed\n", failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
