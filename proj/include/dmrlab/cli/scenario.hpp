#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "../bsde.hpp"
#include "../condexp.hpp"
#include "../core.hpp"
#include "../dmr_solver.hpp"
#include "../grid_paths.hpp"
#include "../mean_boundaries.hpp"
#include "../penalized_solver.hpp"

namespace dmr::cli {

using json = nlohmann::json;

enum class LossMode { nonlinear, linear };

struct SkorokhodSection {
    bool backward = true;
    Obstacle s = Obstacle::constant(0.0);  // input path s(t)
    double a = 0.0;                        // terminal anchor (backward only)
};

struct PenalizationSection {
    double n = 64.0;
    std::vector<double> n_list{4.0, 16.0, 64.0, 256.0};
    bool relax_origin = false;
};

struct OutputSection {
    std::string dir = "out";
    std::vector<std::string> formats{"csv", "json"};
};

struct ScenarioConfig {
    double T = 1.0;
    std::size_t N = 100;
    std::size_t M = 10000;
    std::uint64_t seed = 1;
    bool antithetic = false;
    TerminalSpec xi;
    DriverSpec driver;
    LossMode mode = LossMode::nonlinear;
    LossPair losses;                  // always populated; linear mode maps to affine losses
    Obstacle lower = Obstacle::constant(0.0);  // linear mode
    Obstacle upper = Obstacle::constant(0.0);  // linear mode
    RegressionSpec regression;
    PicardConfig picard;
    PenalizationSection penalization;
    SkorokhodSection skorokhod;
    std::vector<double> dynkin_times{0.0};
    OutputSection output;
    std::set<std::string> sections;   // top-level keys present in the file
    json source;                      // parsed document after overrides
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of the canonical (key-sorted, compact) rendering of the scenario.
inline std::string config_hash(const ScenarioConfig& cfg) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << fnv1a(cfg.source.dump());
    return os.str();
}

namespace detail {

/// Collects every schema violation before failing.
class Reader {
public:
    std::vector<std::string> errors;

    void fail(const std::string& where, const std::string& what) { errors.push_back(where + ": " + what); }

    void allow(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
        if (!obj.is_object()) {
            fail(where, "expected an object");
            return;
        }
        std::set<std::string> ok(keys.begin(), keys.end());
        for (auto it = obj.begin(); it != obj.end(); ++it) {
            if (!ok.count(it.key())) {
                std::string list;
                for (const auto& k : ok) list += (list.empty() ? "" : ", ") + k;
                fail(where, "unknown key '" + it.key() + "' (allowed: " + list + ")");
            }
        }
    }

    double number(const json& obj, const char* key, const std::string& where, double def) {
        if (!obj.is_object() || !obj.contains(key)) return def;
        const auto& v = obj.at(key);
        if (!v.is_number()) {
            fail(where + "." + key, "expected a number");
            return def;
        }
        return v.get<double>();
    }

    std::uint64_t count(const json& obj, const char* key, const std::string& where, std::uint64_t def) {
        if (!obj.is_object() || !obj.contains(key)) return def;
        const auto& v = obj.at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
            fail(where + "." + key, "expected a non-negative integer");
            return def;
        }
        return v.get<std::uint64_t>();
    }

    bool boolean(const json& obj, const char* key, const std::string& where, bool def) {
        if (!obj.is_object() || !obj.contains(key)) return def;
        const auto& v = obj.at(key);
        if (!v.is_boolean()) {
            fail(where + "." + key, "expected true or false");
            return def;
        }
        return v.get<bool>();
    }

    std::string text(const json& obj, const char* key, const std::string& where, std::string def) {
        if (!obj.is_object() || !obj.contains(key)) return def;
        const auto& v = obj.at(key);
        if (!v.is_string()) {
            fail(where + "." + key, "expected a string");
            return def;
        }
        return v.get<std::string>();
    }

    std::vector<double> numbers(const json& obj, const char* key, const std::string& where,
                                std::vector<double> def) {
        if (!obj.is_object() || !obj.contains(key)) return def;
        const auto& v = obj.at(key);
        if (!v.is_array() || v.empty()) {
            fail(where + "." + key, "expected a nonempty array of numbers");
            return def;
        }
        std::vector<double> out;
        for (const auto& e : v) {
            if (!e.is_number()) {
                fail(where + "." + key, "expected a nonempty array of numbers");
                return def;
            }
            out.push_back(e.get<double>());
        }
        return out;
    }

    Obstacle obstacle(const json& obj, const std::string& where) {
        if (obj.is_number()) return Obstacle::constant(obj.get<double>());
        allow(obj, where, {"kind", "value", "coeffs", "points"});
        if (!obj.is_object()) return Obstacle::constant(0.0);
        const std::string kind = text(obj, "kind", where, "constant");
        if (kind == "constant") return Obstacle::constant(number(obj, "value", where, 0.0));
        if (kind == "poly") return Obstacle::poly(numbers(obj, "coeffs", where, {0.0}));
        if (kind == "piecewise_linear") {
            std::vector<std::pair<double, double>> pts;
            if (!obj.contains("points") || !obj.at("points").is_array() || obj.at("points").empty()) {
                fail(where + ".points", "expected a nonempty array of [t, value] pairs");
                return Obstacle::constant(0.0);
            }
            for (const auto& p : obj.at("points")) {
                if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
                    fail(where + ".points", "expected [t, value] pairs");
                    return Obstacle::constant(0.0);
                }
                pts.emplace_back(p[0].get<double>(), p[1].get<double>());
            }
            try {
                return Obstacle::piecewise_linear(std::move(pts));
            } catch (const Error& e) {
                fail(where, e.what());
                return Obstacle::constant(0.0);
            }
        }
        fail(where + ".kind", "unknown obstacle kind '" + kind + "' (available: constant, poly, piecewise_linear)");
        return Obstacle::constant(0.0);
    }

    LossFn loss(const json& obj, const std::string& where) {
        allow(obj, where, {"kind", "alpha", "obstacle", "shift"});
        if (!obj.is_object()) return LossFn::affine(Obstacle::constant(0.0));
        const std::string kind = text(obj, "kind", where, "affine");
        const Obstacle obs = obj.contains("obstacle") ? obstacle(obj.at("obstacle"), where + ".obstacle")
                                                      : Obstacle::constant(0.0);
        LossFn out = LossFn::affine(obs);
        if (kind == "tanh_warp") {
            const double alpha = number(obj, "alpha", where, 0.0);
            if (!(std::abs(alpha) < 1.0)) fail(where + ".alpha", "tanh loss needs |alpha| < 1");
            else out = LossFn::tanh_warp(alpha, obs);
        } else if (kind != "affine") {
            fail(where + ".kind", "unknown loss kind '" + kind + "' (available: affine, tanh_warp)");
        }
        if (obj.contains("shift")) {
            const auto& sh = obj.at("shift");
            const std::string sw = where + ".shift";
            allow(sh, sw, {"feature", "kappa"});
            const std::string feat = text(sh, "feature", sw, "none");
            PathFeature f = PathFeature::none;
            if (feat == "brownian") f = PathFeature::brownian;
            else if (feat == "abs_brownian") f = PathFeature::abs_brownian;
            else if (feat != "none")
                fail(sw + ".feature", "unknown feature '" + feat + "' (available: none, brownian, abs_brownian)");
            out = out.with_shift(f, number(sh, "kappa", sw, 0.0));
        }
        return out;
    }
};

inline bool finite_positive(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace detail

/// Builds a validated scenario from a JSON document; `seed_override` replaces
/// ensemble.seed before hashing.
inline ScenarioConfig parse_scenario_json(json doc, std::optional<std::uint64_t> seed_override = {}) {
    detail::Reader rd;
    ScenarioConfig cfg;
    rd.allow(doc, "scenario",
             {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "penalization", "skorokhod",
              "dynkin", "output"});
    if (!doc.is_object()) throw ConfigError(rd.errors.front());
    if (seed_override) doc["ensemble"]["seed"] = *seed_override;
    for (auto it = doc.begin(); it != doc.end(); ++it) cfg.sections.insert(it.key());
    const json empty = json::object();
    auto section = [&](const char* key) -> const json& { return doc.contains(key) ? doc.at(key) : empty; };

    const json& grid = section("grid");
    rd.allow(grid, "grid", {"T", "N"});
    cfg.T = rd.number(grid, "T", "grid", cfg.T);
    cfg.N = rd.count(grid, "N", "grid", cfg.N);
    if (!detail::finite_positive(cfg.T)) rd.fail("grid.T", "must be positive");
    if (cfg.N < 2) rd.fail("grid.N", "must be at least 2");

    const json& ens = section("ensemble");
    rd.allow(ens, "ensemble", {"M", "seed", "antithetic"});
    cfg.M = rd.count(ens, "M", "ensemble", cfg.M);
    cfg.seed = rd.count(ens, "seed", "ensemble", cfg.seed);
    cfg.antithetic = rd.boolean(ens, "antithetic", "ensemble", cfg.antithetic);
    if (cfg.M < 2) rd.fail("ensemble.M", "must be at least 2");
    if (cfg.antithetic && cfg.M % 2) rd.fail("ensemble.M", "must be even with antithetic sampling");

    const json& xi = section("xi");
    rd.allow(xi, "xi", {"kind", "params"});
    {
        const std::string kind = rd.text(xi, "kind", "xi", "affine");
        const json& p = xi.contains("params") ? xi.at("params") : empty;
        if (kind == "affine") {
            rd.allow(p, "xi.params", {"a", "b"});
            cfg.xi = TerminalSpec::affine(rd.number(p, "a", "xi.params", 0.0), rd.number(p, "b", "xi.params", 1.0));
        } else if (kind == "poly") {
            rd.allow(p, "xi.params", {"coeffs"});
            cfg.xi = TerminalSpec::poly(rd.numbers(p, "coeffs", "xi.params", {0.0}));
        } else if (kind == "call") {
            rd.allow(p, "xi.params", {"strike", "scale"});
            cfg.xi = TerminalSpec::call(rd.number(p, "strike", "xi.params", 0.0),
                                        rd.number(p, "scale", "xi.params", 1.0));
        } else if (kind == "sin") {
            rd.allow(p, "xi.params", {"amplitude", "frequency", "phase"});
            cfg.xi = TerminalSpec::sine(rd.number(p, "amplitude", "xi.params", 1.0),
                                        rd.number(p, "frequency", "xi.params", 1.0),
                                        rd.number(p, "phase", "xi.params", 0.0));
        } else {
            rd.fail("xi.kind", "unknown terminal kind '" + kind + "' (available: affine, poly, call, sin)");
        }
    }

    const json& drv = section("driver");
    rd.allow(drv, "driver", {"kind", "a", "b", "c", "lambda1", "lambda2"});
    {
        const std::string kind = rd.text(drv, "kind", "driver", "zero");
        const auto c = rd.numbers(drv, "c", "driver", {0.0});
        if (kind == "zero") {
            cfg.driver = DriverSpec::zero();
        } else if (kind == "affine") {
            cfg.driver = DriverSpec::affine(rd.numbers(drv, "a", "driver", {0.0}), rd.numbers(drv, "b", "driver", {0.0}), c);
        } else if (kind == "lipschitz") {
            cfg.driver = DriverSpec::lipschitz(rd.number(drv, "lambda1", "driver", 0.0),
                                               rd.number(drv, "lambda2", "driver", 0.0), c);
        } else {
            rd.fail("driver.kind", "unknown driver kind '" + kind + "' (available: zero, affine, lipschitz)");
        }
    }

    const json& ls = section("losses");
    {
        const std::string mode = rd.text(ls, "mode", "losses", "nonlinear");
        if (mode == "linear") {
            cfg.mode = LossMode::linear;
            rd.allow(ls, "losses", {"mode", "lower", "upper"});
            cfg.lower = ls.contains("lower") ? rd.obstacle(ls.at("lower"), "losses.lower") : Obstacle::constant(0.0);
            cfg.upper = ls.contains("upper") ? rd.obstacle(ls.at("upper"), "losses.upper") : Obstacle::constant(0.0);
            cfg.losses = affine_losses(cfg.lower, cfg.upper);
        } else if (mode == "nonlinear") {
            cfg.mode = LossMode::nonlinear;
            rd.allow(ls, "losses", {"mode", "L", "R", "gap"});
            if (!ls.contains("L") || !ls.contains("R")) rd.fail("losses", "nonlinear mode needs both L and R");
            cfg.losses.L = ls.contains("L") ? rd.loss(ls.at("L"), "losses.L") : LossFn::affine(Obstacle::constant(0.0));
            cfg.losses.R = ls.contains("R") ? rd.loss(ls.at("R"), "losses.R") : LossFn::affine(Obstacle::constant(0.0));
            cfg.losses.gap = rd.number(ls, "gap", "losses", 0.0);
        } else {
            rd.fail("losses.mode", "unknown mode '" + mode + "' (available: nonlinear, linear)");
        }
    }

    const json& reg = section("regression");
    rd.allow(reg, "regression", {"degree", "ridge", "standardize"});
    cfg.regression.degree = static_cast<int>(rd.count(reg, "degree", "regression", 4));
    cfg.regression.ridge = rd.number(reg, "ridge", "regression", cfg.regression.ridge);
    cfg.regression.standardize = rd.boolean(reg, "standardize", "regression", true);
    if (cfg.regression.degree < 1 || cfg.regression.degree > 12) rd.fail("regression.degree", "must lie in 1..12");
    if (!(cfg.regression.ridge >= 0.0)) rd.fail("regression.ridge", "must be >= 0");

    const json& pic = section("picard");
    rd.allow(pic, "picard", {"max_iter", "tol", "subintervals"});
    cfg.picard.max_iter = static_cast<int>(rd.count(pic, "max_iter", "picard", 50));
    cfg.picard.tol = rd.number(pic, "tol", "picard", cfg.picard.tol);
    cfg.picard.subintervals = rd.count(pic, "subintervals", "picard", 1);
    if (cfg.picard.max_iter < 1) rd.fail("picard.max_iter", "must be at least 1");
    if (cfg.picard.subintervals < 1 || (cfg.N >= 2 && cfg.N % cfg.picard.subintervals))
        rd.fail("picard.subintervals", "must divide grid.N");

    const json& pen = section("penalization");
    rd.allow(pen, "penalization", {"n", "n_list", "relax_origin"});
    cfg.penalization.n = rd.number(pen, "n", "penalization", cfg.penalization.n);
    cfg.penalization.n_list = rd.numbers(pen, "n_list", "penalization", cfg.penalization.n_list);
    cfg.penalization.relax_origin = rd.boolean(pen, "relax_origin", "penalization", false);
    if (!(cfg.penalization.n >= 0.0)) rd.fail("penalization.n", "must be >= 0");
    for (std::size_t i = 1; i < cfg.penalization.n_list.size(); ++i)
        if (!(cfg.penalization.n_list[i] > cfg.penalization.n_list[i - 1]))
            rd.fail("penalization.n_list", "must be increasing");

    const json& sk = section("skorokhod");
    rd.allow(sk, "skorokhod", {"direction", "s", "a"});
    {
        const std::string dir = rd.text(sk, "direction", "skorokhod", "backward");
        if (dir != "backward" && dir != "forward")
            rd.fail("skorokhod.direction", "unknown direction '" + dir + "' (available: backward, forward)");
        cfg.skorokhod.backward = dir != "forward";
        if (sk.contains("s")) cfg.skorokhod.s = rd.obstacle(sk.at("s"), "skorokhod.s");
        cfg.skorokhod.a = rd.number(sk, "a", "skorokhod", 0.0);
    }

    const json& dy = section("dynkin");
    rd.allow(dy, "dynkin", {"times"});
    cfg.dynkin_times = rd.numbers(dy, "times", "dynkin", cfg.dynkin_times);
    for (double t : cfg.dynkin_times)
        if (!(t >= 0.0 && t <= cfg.T)) rd.fail("dynkin.times", "times must lie in [0, T]");

    const json& out = section("output");
    rd.allow(out, "output", {"dir", "formats"});
    cfg.output.dir = rd.text(out, "dir", "output", cfg.output.dir);
    if (out.contains("formats")) {
        cfg.output.formats.clear();
        if (!out.at("formats").is_array()) rd.fail("output.formats", "expected an array of strings");
        else
            for (const auto& f : out.at("formats")) {
                if (!f.is_string() || (f != "csv" && f != "json"))
                    rd.fail("output.formats", "entries must be \"csv\" or \"json\"");
                else cfg.output.formats.push_back(f.get<std::string>());
            }
    }

    if (!rd.errors.empty()) {
        std::string msg = "invalid scenario (" + std::to_string(rd.errors.size()) + " problem(s)):";
        for (const auto& e : rd.errors) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    cfg.source = std::move(doc);
    return cfg;
}

inline ScenarioConfig parse_scenario(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("scenario file '" + path + "': " + e.what());
    }
    return parse_scenario_json(std::move(doc), seed_override);
}

inline TimeGrid scenario_grid(const ScenarioConfig& cfg) { return make_grid(cfg.T, cfg.N); }

inline PathEnsemble scenario_ensemble(const ScenarioConfig& cfg) {
    return sample_ensemble(scenario_grid(cfg), cfg.M, cfg.seed, cfg.antithetic);
}

/// Exact-law terminal admissibility E[L(T, xi)] <= 0 <= E[R(T, xi)] with B_T ~ N(0, T).
inline void check_admissibility(const ScenarioConfig& cfg, double tol = 1e-9) {
    const double sd = std::sqrt(cfg.T);
    auto expect = [&](const LossFn& loss) {
        auto fn = [&](double b) { return eval_loss(loss, loss.feature_value(b), cfg.T, cfg.xi(b)); };
        if (cfg.xi.kind == TerminalSpec::Kind::call) {
            // Split at the kink so each side is smooth.
            const double cut = cfg.xi.strike / sd;
            const double hi = gaussian_tail_expectation(fn, 0.0, sd, cut);
            const double lo = gaussian_tail_expectation([&](double x) { return fn(-x); }, 0.0, sd, -cut);
            return hi + lo;
        }
        return gaussian_expectation(fn, 0.0, sd);
    };
    std::vector<std::string> errs;
    if (cfg.mode == LossMode::linear) {
        const double mxi = expect(LossFn::affine(Obstacle::constant(0.0)));
        const double lT = cfg.lower(cfg.T), rT = cfg.upper(cfg.T);
        std::ostringstream os;
        if (lT > mxi + tol) {
            os << "admissibility l_T <= E[xi] fails: l_T = " << lT << ", E[xi] = " << mxi;
            errs.push_back(os.str());
        }
        if (mxi > rT + tol) {
            std::ostringstream o2;
            o2 << "admissibility E[xi] <= r_T fails: E[xi] = " << mxi << ", r_T = " << rT;
            errs.push_back(o2.str());
        }
        for (std::size_t k = 0; k <= cfg.N; ++k) {
            const double t = cfg.T * static_cast<double>(k) / static_cast<double>(cfg.N);
            if (cfg.lower(t) > cfg.upper(t)) {
                std::ostringstream o3;
                o3 << "obstacles cross: l_t = " << cfg.lower(t) << " > r_t = " << cfg.upper(t) << " at t = " << t;
                errs.push_back(o3.str());
                break;
            }
        }
    } else {
        const double el = expect(cfg.losses.L);
        const double er = expect(cfg.losses.R);
        if (el > tol) {
            std::ostringstream os;
            os << "admissibility E[L(T,xi)] <= 0 fails: E[L(T,xi)] = " << el;
            errs.push_back(os.str());
        }
        if (er < -tol) {
            std::ostringstream os;
            os << "admissibility E[R(T,xi)] >= 0 fails: E[R(T,xi)] = " << er;
            errs.push_back(os.str());
        }
        try {
            check_separation(cfg.losses, scenario_grid(cfg));
        } catch (const InvariantViolation& e) {
            errs.emplace_back(e.what());
        }
    }
    if (!errs.empty()) {
        std::string msg = "inadmissible scenario:";
        for (const auto& e : errs) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
}

/// Top-level sections a subcommand does not read.
inline std::vector<std::string> ignored_sections(const ScenarioConfig& cfg, const std::string& command) {
    static const std::map<std::string, std::set<std::string>> used{
        {"skorokhod", {"grid", "losses", "skorokhod", "output"}},
        {"solve", {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "output"}},
        {"penalize", {"grid", "ensemble", "xi", "driver", "losses", "regression", "penalization", "output"}},
        {"sweep", {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "penalization", "output"}},
        {"dynkin", {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "dynkin", "output"}},
        {"validate", {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "dynkin", "output"}},
        {"compare", {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "penalization", "output"}},
    };
    std::vector<std::string> out;
    auto it = used.find(command);
    if (it == used.end()) return out;
    for (const auto& s : cfg.sections)
        if (!it->second.count(s)) out.push_back(s);
    return out;
}

}  // namespace dmr::cli
