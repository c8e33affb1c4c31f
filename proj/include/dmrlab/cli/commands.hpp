#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "../diagnostics.hpp"
#include "../dmr_solver.hpp"
#include "../penalized_solver.hpp"
#include "../skorokhod.hpp"
#include "output.hpp"
#include "scenario.hpp"

namespace dmr::cli {

enum ExitCode : int { ok = 0, config_error = 1, convergence_error = 2, invariant_error = 3 };

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"skorokhod", "solve", "penalize", "sweep",
                                                "dynkin",    "validate", "compare"};
    return names;
}

namespace detail {

struct Run {
    const ScenarioConfig& cfg;
    std::string dir;
    std::ostream& log;

    bool csv() const { return has("csv"); }
    bool js() const { return has("json"); }
    bool has(const char* f) const {
        for (const auto& s : cfg.output.formats)
            if (s == f) return true;
        return false;
    }
    std::string path(const std::string& name) const { return (std::filesystem::path(dir) / name).string(); }

    nlohmann::json header(const std::string& command) const {
        nlohmann::json j;
        j["command"] = command;
        j["config_hash"] = config_hash(cfg);
        j["seed"] = cfg.seed;
        j["grid"] = {{"T", cfg.T}, {"N", cfg.N}};
        j["ensemble"] = {{"M", cfg.M}, {"antithetic", cfg.antithetic}};
        return j;
    }
    void emit(const std::string& name, const Table& t) const {
        if (csv()) write_csv(path(name), t);
    }
    /// Writes <command>_summary.json.
    void summary(const nlohmann::json& j) const {
        if (js()) write_json(path(j.at("command").get<std::string>() + "_summary.json"), j);
    }
};

inline std::vector<double> grid_times(const TimeGrid& g) { return g.times; }

inline LinearObstacles scenario_obstacles(const ScenarioConfig& cfg, const TimeGrid& grid) {
    if (cfg.mode != LossMode::linear)
        throw ConfigError("penalization needs losses.mode = \"linear\" (deterministic obstacles)");
    return LinearObstacles::sample(grid, cfg.lower, cfg.upper, cfg.penalization.relax_origin);
}

inline double flatoff_tolerance(const DmrSolution& sol) { return 1e-6 * (1.0 + total_variation(sol.K)); }

inline Table solution_table(const DmrSolution& sol, const TimeGrid& grid) {
    Table t;
    t.add("t", grid.times);
    t.add("meanY", sol.meanY);
    t.add("K", sol.K);
    t.add("K_R", sol.K_R);
    t.add("K_L", sol.K_L);
    t.add("EL", sol.EL);
    t.add("ER", sol.ER);
    return t;
}

inline Table plot_table(const DmrSolution& sol, const ScenarioConfig& cfg, const TimeGrid& grid) {
    std::vector<double> oL(grid.size()), oR(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        oL[k] = cfg.losses.L.obstacle(grid.t(k));
        oR[k] = cfg.losses.R.obstacle(grid.t(k));
    }
    Table t;
    t.add("t", grid.times);
    t.add("meanY", sol.meanY);
    t.add("obstacle_L", oL);
    t.add("obstacle_R", oR);
    t.add("K_R", sol.K_R);
    t.add("K_L", sol.K_L);
    return t;
}

inline nlohmann::json solve_record(const DmrSolution& sol) {
    nlohmann::json j;
    j["iterations"] = sol.iterations;
    j["converged"] = sol.converged;
    auto traces = nlohmann::json::array();
    for (const auto& tr : sol.traces) traces.push_back(num_array(tr));
    j["picard_traces"] = traces;
    return j;
}

inline nlohmann::json report_json(const DiagnosticsReport& r) {
    return {{"flatoff_R", num(r.flatoff_R)},
            {"flatoff_L", num(r.flatoff_L)},
            {"flatoff_tol", num(r.flatoff_tol)},
            {"violation_sup", num(r.violation_sup)},
            {"violation_tol", num(r.violation_tol)},
            {"game_value_supinf", num(r.game_value_supinf)},
            {"game_value_infsup", num(r.game_value_infsup)},
            {"meanY_at_t", num(r.meanY_at_t)},
            {"tol_game", num(r.tol_game)},
            {"sandwich_ok", to_string(r.sandwich_ok)},
            {"sandwich_witness", r.sandwich_witness},
            {"stability_margin", num(r.stability_margin)}};
}

inline DmrSolution solve_scenario(const ScenarioConfig& cfg, const PathEnsemble& ens, const std::vector<double>& xi) {
    return picard_solve(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression);
}

inline std::size_t time_index(const TimeGrid& grid, double t) {
    return static_cast<std::size_t>(std::llround(t / grid.dt));
}

inline int cmd_skorokhod(const Run& run) {
    const auto& cfg = run.cfg;
    const TimeGrid grid = scenario_grid(cfg);
    const BoundaryFn l = loss_boundary(grid, cfg.losses.L);
    const BoundaryFn r = loss_boundary(grid, cfg.losses.R);
    std::vector<double> s(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) s[k] = cfg.skorokhod.s(grid.t(k));

    auto j = run.header("skorokhod");
    SkorokhodSolution sol;
    if (cfg.skorokhod.backward) {
        sol = solve_backward_sp(s, cfg.skorokhod.a, l, r);
        const auto au = audit_backward(sol, s, cfg.skorokhod.a, l, r);
        j["direction"] = "backward";
        j["audit"] = {{"identity_error", num(au.identity_error)}, {"feasibility", num(au.feasibility)},
                      {"jordan_error", num(au.jordan_error)},     {"monotone_defect", num(au.monotone_defect)},
                      {"flatoff_upper", num(au.flatoff.upper)},   {"flatoff_lower", num(au.flatoff.lower)},
                      {"total_variation", num(au.total_variation)}};
    } else {
        sol = solve_forward_sp(s, l, r);
        const auto fo = forward_flatoff(sol, l, r);
        j["direction"] = "forward";
        j["audit"] = {{"flatoff_upper", num(fo.upper)}, {"flatoff_lower", num(fo.lower)},
                      {"total_variation", num(total_variation(sol.k))}};
    }
    Table t;
    t.add("t", grid.times);
    t.add("s", s);
    t.add("x", sol.x);
    t.add("k", sol.k);
    t.add("k_up", sol.k_up);
    t.add("k_down", sol.k_down);
    t.add("phi", sol.phi);
    t.add("psi", sol.psi);
    run.emit("skorokhod.csv", t);
    run.summary(j);
    return ok;
}

inline DiagnosticsReport basic_report(const DmrSolution& sol, const ScenarioConfig& cfg, const PathEnsemble& ens) {
    DiagnosticsReport r;
    const auto fo = flatoff_residual(sol, cfg.losses, ens);
    r.flatoff_R = fo.R;
    r.flatoff_L = fo.L;
    r.flatoff_tol = flatoff_tolerance(sol);
    r.violation_sup = constraint_violation(sol, cfg.losses, ens);
    r.violation_tol = constraint_tolerance(sol, cfg.losses, ens);
    return r;
}

inline int cmd_solve(const Run& run) {
    const auto& cfg = run.cfg;
    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const auto sol = solve_scenario(cfg, ens, xi);
    const auto rep = basic_report(sol, cfg, ens);
    run.emit("solution.csv", solution_table(sol, ens.grid));
    run.emit("plot.csv", plot_table(sol, cfg, ens.grid));
    auto j = run.header("solve");
    j["solve"] = solve_record(sol);
    j["tolerances"] = {{"eps_root", num(sol.eps_root)},
                       {"tol_T", num(sol.tol_T)},
                       {"constraint_tol", num(rep.violation_tol)},
                       {"flatoff_tol", num(rep.flatoff_tol)}};
    j["residuals"] = {{"mean_identity_error", num(sol.mean_identity_error)}};
    j["diagnostics"] = report_json(rep);
    run.summary(j);
    if (!sol.converged) run.log << "warning: Picard iteration stopped at max_iter while still decreasing\n";
    return ok;
}

inline int cmd_penalize(const Run& run) {
    const auto& cfg = run.cfg;
    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const auto obs = scenario_obstacles(cfg, ens.grid);
    const auto sol = penalized_solve(ens, cfg.driver, xi, obs, cfg.penalization.n, cfg.regression);
    Table t;
    t.add("t", ens.grid.times);
    t.add("meanY", sol.meanY);
    t.add("K_l", sol.K_l);
    t.add("K_r", sol.K_r);
    t.add("l", obs.l);
    t.add("r", obs.r);
    run.emit("penalized.csv", t);
    auto j = run.header("penalize");
    j["n"] = sol.n;
    j["pen_l"] = num(sol.pen_l);
    j["pen_r"] = num(sol.pen_r);
    j["relax_origin"] = obs.relax_origin;
    run.summary(j);
    return ok;
}

inline Table sweep_table(const SweepResult& sw) {
    Table t;
    std::vector<double> n, pl, pr, d, y2, z2, ca;
    for (const auto& r : sw.rows) {
        n.push_back(r.n);
        pl.push_back(r.pen_l);
        pr.push_back(r.pen_r);
        d.push_back(r.dist_to_ref);
        y2.push_back(r.supY2);
        z2.push_back(r.intZ2);
        ca.push_back(r.cauchy);
    }
    t.add("n", n);
    t.add("pen_l", pl);
    t.add("pen_r", pr);
    t.add("dist_to_ref", d);
    t.add("supY2", y2);
    t.add("intZ2", z2);
    t.add("cauchy", ca);
    return t;
}

inline int cmd_sweep(const Run& run) {
    const auto& cfg = run.cfg;
    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const auto obs = scenario_obstacles(cfg, ens.grid);
    const auto ref = solve_scenario(cfg, ens, xi);
    const auto sw = convergence_sweep(ens, cfg.driver, xi, obs, cfg.penalization.n_list, cfg.regression, &ref.meanY);
    run.emit("sweep.csv", sweep_table(sw));
    auto j = run.header("sweep");
    j["slope_r"] = num(sw.slope_r);
    j["slope_l"] = num(sw.slope_l);
    j["slope_total"] = num(sw.slope_total);
    j["n_list"] = cfg.penalization.n_list;
    j["reference"] = solve_record(ref);
    run.summary(j);
    return ok;
}

inline int cmd_compare(const Run& run) {
    const auto& cfg = run.cfg;
    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const auto obs = scenario_obstacles(cfg, ens.grid);
    const auto ref = solve_scenario(cfg, ens, xi);
    Table paths;
    paths.add("t", ens.grid.times);
    paths.add("meanY_dmr", ref.meanY);
    Table disc;
    std::vector<double> ns, dist, pl, pr;
    for (double n : cfg.penalization.n_list) {
        const auto p = penalized_solve(ens, cfg.driver, xi, obs, n, cfg.regression);
        double d = 0.0;
        for (std::size_t k = 0; k < p.meanY.size(); ++k) d = std::max(d, std::abs(p.meanY[k] - ref.meanY[k]));
        ns.push_back(n);
        dist.push_back(d);
        pl.push_back(p.pen_l);
        pr.push_back(p.pen_r);
        paths.add("meanY_n" + format_double(n), p.meanY);
    }
    disc.add("n", ns);
    disc.add("sup_dist", dist);
    disc.add("pen_l", pl);
    disc.add("pen_r", pr);
    run.emit("compare.csv", disc);
    run.emit("compare_paths.csv", paths);
    auto j = run.header("compare");
    j["reference"] = solve_record(ref);
    j["sup_dist"] = num_array(dist);
    run.summary(j);
    return ok;
}

inline int cmd_dynkin(const Run& run) {
    const auto& cfg = run.cfg;
    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const auto sol = solve_scenario(cfg, ens, xi);
    Table t;
    std::vector<double> ts, si, is, my, tg, od;
    for (double tt : cfg.dynkin_times) {
        const auto k = time_index(ens.grid, tt);
        const auto d = dynkin_value(sol, cfg.driver, xi, cfg.losses, ens, k, cfg.regression);
        ts.push_back(ens.grid.t(k));
        si.push_back(d.supinf);
        is.push_back(d.infsup);
        my.push_back(d.meanY);
        tg.push_back(d.tol_game);
        od.push_back(d.ordering_defect);
    }
    t.add("t", ts);
    t.add("supinf", si);
    t.add("infsup", is);
    t.add("meanY", my);
    t.add("tol_game", tg);
    t.add("ordering_defect", od);
    run.emit("dynkin.csv", t);
    auto j = run.header("dynkin");
    j["solve"] = solve_record(sol);
    run.summary(j);
    return ok;
}

/// Re-derives Y from a stored compensator and checks every invariant the
/// solution must satisfy. Fails with InvariantViolation on any breach.
inline int cmd_validate(const Run& run) {
    const auto& cfg = run.cfg;
    const std::string sol_path = run.path("solution.csv");
    const std::string sum_path = run.path("solve_summary.json");
    if (!std::filesystem::exists(sum_path)) throw ConfigError("validate needs '" + sum_path + "' from a solve run");
    nlohmann::json stored_summary;
    {
        std::ifstream in(sum_path);
        try {
            stored_summary = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(sum_path + ": " + e.what());
        }
    }
    const std::string hash = config_hash(cfg);
    if (!stored_summary.contains("config_hash") || stored_summary["config_hash"] != hash)
        throw ConfigError("config hash mismatch: solution was produced by " +
                          stored_summary.value("config_hash", std::string("<missing>")) + ", scenario hashes to " +
                          hash);
    const Table stored = read_csv(sol_path);

    const auto ens = scenario_ensemble(cfg);
    const auto xi = terminal_values(ens, cfg.xi);
    const std::size_t N = ens.N();
    if (stored.rows() != N + 1) throw InvariantViolation("stored solution has the wrong number of rows");
    const auto& K = stored.column("K");
    const auto& KR = stored.column("K_R");
    const auto& KL = stored.column("K_L");
    const auto& mY = stored.column("meanY");

    std::vector<std::string> failures;
    double scale = 1.0;
    for (std::size_t k = 0; k <= N; ++k) scale = std::max({scale, std::abs(KR[k]), std::abs(KL[k])});
    for (std::size_t k = 0; k <= N; ++k) {
        if (std::abs(K[k] - (KR[k] - KL[k])) > 1e-12 * scale) {
            failures.push_back("K != K_R - K_L at t=" + format_double(ens.grid.t(k)));
            break;
        }
    }
    if (KR[0] != 0.0 || KL[0] != 0.0) failures.push_back("K_R, K_L do not start at 0");
    for (std::size_t k = 1; k <= N; ++k)
        if (KR[k] < KR[k - 1] || KL[k] < KL[k - 1]) {
            failures.push_back("K_R or K_L decreases at t=" + format_double(ens.grid.t(k)));
            break;
        }

    DmrSolution sol = solve_scenario(cfg, ens, xi);
    for (std::size_t k = 0; k <= N; ++k) {
        const double shift = (K[N] - K[k]) - (sol.K[N] - sol.K[k]);
        for (double& y : sol.Y.column(k)) y += shift;
    }
    sol.K = K;
    sol.K_R = KR;
    sol.K_L = KL;
    sol.meanY = sol.Y.column_means();
    for (std::size_t k = 0; k <= N; ++k)
        if (std::abs(sol.meanY[k] - mY[k]) > 1e-9 * (1.0 + std::abs(mY[k]))) {
            failures.push_back("meanY column disagrees with the stored compensator at t=" +
                               format_double(ens.grid.t(k)));
            break;
        }

    DiagnosticsReport rep = basic_report(sol, cfg, ens);
    if (rep.violation_sup > rep.violation_tol)
        failures.push_back("constraint violation " + format_double(rep.violation_sup) + " exceeds " +
                           format_double(rep.violation_tol));
    if (std::max(rep.flatoff_R, rep.flatoff_L) > rep.flatoff_tol)
        failures.push_back("flat-off residual " + format_double(std::max(rep.flatoff_R, rep.flatoff_L)) +
                           " exceeds " + format_double(rep.flatoff_tol));

    const auto k0 = time_index(ens.grid, cfg.dynkin_times.front());
    const auto dy = dynkin_value(sol, cfg.driver, xi, cfg.losses, ens, k0, cfg.regression);
    rep.game_value_supinf = dy.supinf;
    rep.game_value_infsup = dy.infsup;
    rep.meanY_at_t = dy.meanY;
    rep.tol_game = dy.tol_game;
    if (std::abs(dy.supinf - dy.infsup) > 2.0 * dy.tol_game || std::abs(dy.supinf - dy.meanY) > dy.tol_game)
        failures.push_back("game value inconsistent: supinf=" + format_double(dy.supinf) +
                           " infsup=" + format_double(dy.infsup) + " meanY=" + format_double(dy.meanY));

    if (cfg.driver.affine_in_y()) {
        const auto sw = sandwich_check(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression);
        rep.sandwich_ok = sw.status;
        rep.sandwich_witness = sw.witness;
        if (sw.status == SandwichStatus::violated) failures.push_back("sandwich ordering violated: " + sw.witness);
    } else {
        rep.sandwich_witness = "driver is not affine in y";
    }

    if (!sol.s.empty()) {
        SkorokhodInstance inst{sol.s, sol.a, loss_boundary(ens.grid, cfg.losses.L),
                               loss_boundary(ens.grid, cfg.losses.R)};
        const auto st = stability_check(inst, PerturbationSpec{}, 50, cfg.seed);
        if (st.trials > 0) {
            rep.stability_margin = st.worst_slack;
            if (st.worst_slack < 0.0) failures.push_back("compensator stability bound violated");
        }
    }

    auto j = run.header("validate");
    j["diagnostics"] = report_json(rep);
    j["failures"] = failures;
    j["valid"] = failures.empty();
    run.summary(j);
    if (!failures.empty()) {
        std::string msg = "solution failed validation:";
        for (const auto& f : failures) msg += "\n  - " + f;
        throw InvariantViolation(msg);
    }
    return ok;
}

}  // namespace detail

/// Runs one subcommand and maps failures onto exit codes: 1 configuration or
/// I/O, 2 convergence or numerical failure, 3 invariant violation.
inline int run_command(const std::string& command, const ScenarioConfig& cfg, const std::string& out_dir,
                       std::ostream& log = std::cerr) {
    try {
        for (const auto& s : ignored_sections(cfg, command))
            log << "warning: section '" << s << "' is ignored by '" << command << "'\n";
        if (command != "skorokhod") check_admissibility(cfg);
        ensure_directory(out_dir);
        const detail::Run run{cfg, out_dir, log};
        if (command == "skorokhod") return detail::cmd_skorokhod(run);
        if (command == "solve") return detail::cmd_solve(run);
        if (command == "penalize") return detail::cmd_penalize(run);
        if (command == "sweep") return detail::cmd_sweep(run);
        if (command == "dynkin") return detail::cmd_dynkin(run);
        if (command == "validate") return detail::cmd_validate(run);
        if (command == "compare") return detail::cmd_compare(run);
        throw ConfigError("unknown subcommand '" + command + "'");
    } catch (const ConfigError& e) {
        log << "error: " << e.what() << "\n";
        return config_error;
    } catch (const InvariantViolation& e) {
        log << "invariant violation: " << e.what() << "\n";
        return invariant_error;
    } catch (const ConvergenceFailure& e) {
        log << "convergence failure: " << e.what() << "\n";
        return convergence_error;
    } catch (const Error& e) {
        log << "numerical failure: " << e.what() << "\n";
        return convergence_error;
    }
}

}  // namespace dmr::cli
