#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <dmrlab/cli/commands.hpp>
#include <dmrlab/cli/output.hpp>
#include <dmrlab/cli/scenario.hpp>

using namespace dmr;
using namespace dmr::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dmrlab_cli_io_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

fs::path write_scenario(const fs::path& dir, const std::string& name, const json& doc) {
    const fs::path p = dir / name;
    std::ofstream(p) << doc.dump(2);
    return p;
}

int run_tool(const std::string& args) {
    const std::string cmd = std::string(DMRLAB_TOOL) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_hand() {
    return json::parse(R"({
      "grid": {"T": 1.0, "N": 40},
      "ensemble": {"M": 4000, "seed": 5},
      "xi": {"kind": "affine", "params": {"a": 0.0, "b": 1.0}},
      "driver": {"kind": "zero"},
      "losses": {"mode": "nonlinear",
                 "L": {"kind": "affine", "obstacle": 2.0},
                 "R": {"kind": "affine", "obstacle": {"kind": "poly", "coeffs": [1.0, -2.0]}}},
      "dynkin": {"times": [0.0, 0.5]}
    })");
}

json small_forcing() {
    return json::parse(R"({
      "grid": {"T": 1.0, "N": 100},
      "ensemble": {"M": 4000, "seed": 7},
      "xi": {"kind": "affine", "params": {"a": 0.5, "b": 1.0}},
      "losses": {"mode": "linear",
                 "lower": {"kind": "poly", "coeffs": [0.0, -1.0]},
                 "upper": {"kind": "poly", "coeffs": [0.0, 1.0]}},
      "penalization": {"n": 64, "n_list": [4, 16, 64, 256]}
    })");
}

std::string error_of(const json& doc) {
    try {
        parse_scenario_json(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

std::string admissibility_error_of(const json& doc) {
    try {
        check_admissibility(parse_scenario_json(doc));
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("a minimal scenario parses with defaults filled in") {
    const auto cfg = parse_scenario_json(json::parse(R"({"losses": {"mode": "linear"}})"));
    CHECK(cfg.T == 1.0);
    CHECK(cfg.N == 100);
    CHECK(cfg.M == 10000);
    CHECK(cfg.regression.degree == 4);
    CHECK(cfg.picard.max_iter == 50);
    CHECK(cfg.driver.kind == DriverSpec::Kind::zero);
    CHECK(cfg.mode == LossMode::linear);
    CHECK(cfg.output.formats == std::vector<std::string>{"csv", "json"});
    CHECK_NOTHROW(check_admissibility(cfg));
}

TEST_CASE("the shipped scenarios parse and are admissible") {
    for (const char* name : {"hand.json", "forcing_linear.json", "nonlinear_tanh.json"}) {
        INFO(name);
        const auto cfg = parse_scenario(std::string(DMRLAB_SCENARIOS) + "/" + name);
        CHECK_NOTHROW(check_admissibility(cfg));
    }
}

TEST_CASE("every schema violation is reported at once") {
    auto doc = small_hand();
    doc["grid"]["N"] = 1;
    doc["ensemble"]["M"] = 1;
    doc["driver"]["kind"] = "quadratic";
    doc["colour"] = "blue";
    const auto msg = error_of(doc);
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("4 problem(s)"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("grid.N"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("ensemble.M"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("unknown driver kind 'quadratic'"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("unknown key 'colour'"));
}

TEST_CASE("an unknown loss kind lists the catalog") {
    auto doc = small_hand();
    doc["losses"]["L"]["kind"] = "quadratic";
    const auto msg = error_of(doc);
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("unknown loss kind 'quadratic'"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("available: affine, tanh_warp"));
}

TEST_CASE("type errors and out-of-range values are rejected") {
    auto doc = small_hand();
    doc["grid"]["T"] = "one";
    doc["regression"] = {{"degree", 20}};
    doc["picard"] = {{"subintervals", 3}};
    doc["dynkin"]["times"] = {0.0, 2.0};
    const auto msg = error_of(doc);
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("grid.T: expected a number"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("regression.degree"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("picard.subintervals"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("dynkin.times"));
}

TEST_CASE("admissibility failures name the broken inequality") {
    auto lin = small_forcing();
    lin["losses"]["lower"] = {{"kind", "constant"}, {"value", 1.0}};
    lin["penalization"]["relax_origin"] = true;
    const auto msg = admissibility_error_of(lin);
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("l_T <= E[xi]"));
    CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("E[xi] = 0.5"));

    auto hi = small_forcing();
    hi["xi"]["params"]["a"] = 3.0;
    CHECK_THAT(admissibility_error_of(hi), Catch::Matchers::ContainsSubstring("E[xi] <= r_T"));

    auto nl = small_hand();
    nl["xi"]["params"]["a"] = 5.0;
    CHECK_THAT(admissibility_error_of(nl), Catch::Matchers::ContainsSubstring("E[L(T,xi)] <= 0"));

    auto sep = small_hand();
    sep["losses"]["L"]["obstacle"] = 0.5;
    CHECK_THAT(admissibility_error_of(sep), Catch::Matchers::ContainsSubstring("loss separation"));
}

TEST_CASE("admissibility of a call payoff uses its exact Gaussian mean") {
    // E[(B_1)^+] = 1 / sqrt(2 pi) = 0.398942...
    auto doc = small_hand();
    doc["xi"] = {{"kind", "call"}, {"params", {{"strike", 0.0}, {"scale", 1.0}}}};
    doc["losses"]["R"]["obstacle"] = -1.0;
    doc["losses"]["L"]["obstacle"] = 0.3989;
    CHECK_THAT(admissibility_error_of(doc), Catch::Matchers::ContainsSubstring("E[L(T,xi)] <= 0"));
    doc["losses"]["L"]["obstacle"] = 0.39895;
    CHECK(admissibility_error_of(doc).empty());
}

TEST_CASE("the config hash is canonical and tracks the seed") {
    const auto a = parse_scenario_json(small_hand());
    const auto b = parse_scenario_json(json::parse(small_hand().dump()));
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    const auto c = parse_scenario_json(small_hand(), 99);
    CHECK(c.seed == 99);
    CHECK(config_hash(a) != config_hash(c));
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("CSV rendering round-trips every double") {
    Table t;
    t.add("x", {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, std::nan("")});
    const auto dir = scratch("roundtrip");
    write_csv((dir / "t.csv").string(), t);
    const auto back = read_csv((dir / "t.csv").string());
    REQUIRE(back.rows() == 5);
    for (std::size_t i = 0; i < 4; ++i) CHECK(back.column("x")[i] == t.column("x")[i]);
    CHECK(std::isnan(back.column("x")[4]));
    CHECK(format_double(0.1) == "0.10000000000000001");
}

TEST_CASE("solve writes the documented schema and follows the hand solution") {
    const auto dir = scratch("solve");
    std::ostringstream log;
    const auto cfg = parse_scenario_json(small_hand());
    REQUIRE(run_command("solve", cfg, dir.string(), log) == ok);
    const auto t = read_csv((dir / "solution.csv").string());
    CHECK(t.header == std::vector<std::string>{"t", "meanY", "K", "K_R", "K_L", "EL", "ER"});
    for (std::size_t k = 0; k < t.rows(); ++k)
        CHECK(std::abs(t.column("meanY")[k] - std::max(0.0, 1.0 - 2.0 * t.column("t")[k])) <= 0.1);
    const auto summary = json::parse(slurp(dir / "solve_summary.json"));
    CHECK(summary["config_hash"] == config_hash(cfg));
    CHECK(summary["seed"] == 5);
    CHECK(summary.contains("tolerances"));
    CHECK(summary["solve"].contains("picard_traces"));
    CHECK(summary["diagnostics"].contains("flatoff_R"));
    CHECK(fs::exists(dir / "plot.csv"));
}

TEST_CASE("sections a subcommand does not read produce a warning") {
    const auto dir = scratch("warn");
    auto doc = small_hand();
    doc["penalization"] = {{"n", 8}};
    std::ostringstream log;
    REQUIRE(run_command("solve", parse_scenario_json(doc), dir.string(), log) == ok);
    CHECK_THAT(log.str(), Catch::Matchers::ContainsSubstring("section 'penalization' is ignored by 'solve'"));
}

TEST_CASE("validate accepts a fresh solution and rejects a corrupted one") {
    const auto dir = scratch("validate");
    const auto cfg = parse_scenario_json(small_hand());
    std::ostringstream log;
    REQUIRE(run_command("solve", cfg, dir.string(), log) == ok);
    CHECK(run_command("validate", cfg, dir.string(), log) == ok);
    CHECK(json::parse(slurp(dir / "validate_summary.json"))["valid"] == true);

    auto t = read_csv((dir / "solution.csv").string());
    // A compensator that pushes where the constraint is slack.
    for (std::size_t k = 30; k < t.rows(); ++k) {
        t.columns[2][k] += 0.3;
        t.columns[3][k] += 0.3;
    }
    write_csv((dir / "solution.csv").string(), t);
    std::ostringstream bad;
    CHECK(run_command("validate", cfg, dir.string(), bad) == invariant_error);
    CHECK_THAT(bad.str(), Catch::Matchers::ContainsSubstring("invariant violation"));
}

TEST_CASE("validate refuses a solution produced by another configuration") {
    const auto dir = scratch("mismatch");
    std::ostringstream log;
    REQUIRE(run_command("solve", parse_scenario_json(small_hand()), dir.string(), log) == ok);
    std::ostringstream err;
    CHECK(run_command("validate", parse_scenario_json(small_hand(), 6), dir.string(), err) == config_error);
    CHECK_THAT(err.str(), Catch::Matchers::ContainsSubstring("config hash mismatch"));
}

TEST_CASE("compare: discrepancy to the reflected solution decreases with n") {
    const auto dir = scratch("compare");
    std::ostringstream log;
    REQUIRE(run_command("compare", parse_scenario_json(small_forcing()), dir.string(), log) == ok);
    const auto t = read_csv((dir / "compare.csv").string());
    CHECK(t.header == std::vector<std::string>{"n", "sup_dist", "pen_l", "pen_r"});
    REQUIRE(t.rows() == 4);
    const auto& d = t.column("sup_dist");
    for (std::size_t i = 1; i < d.size(); ++i) CHECK(d[i] <= 1.2 * d[i - 1]);
    CHECK(d.back() <= 0.05);
    CHECK(read_csv((dir / "compare_paths.csv").string()).header.size() == 6);
}

TEST_CASE("sweep: one row per n and a slope summary") {
    const auto dir = scratch("sweep");
    std::ostringstream log;
    REQUIRE(run_command("sweep", parse_scenario_json(small_forcing()), dir.string(), log) == ok);
    const auto t = read_csv((dir / "sweep.csv").string());
    CHECK(t.rows() == 4);
    const auto j = json::parse(slurp(dir / "sweep_summary.json"));
    CHECK(j["slope_r"].get<double>() < -1.0);
    CHECK(j["slope_l"].is_null());
}

TEST_CASE("penalize needs deterministic obstacles") {
    const auto dir = scratch("penalize");
    std::ostringstream log;
    CHECK(run_command("penalize", parse_scenario_json(small_forcing()), dir.string(), log) == ok);
    CHECK(read_csv((dir / "penalized.csv").string()).header ==
          std::vector<std::string>{"t", "meanY", "K_l", "K_r", "l", "r"});
    std::ostringstream err;
    CHECK(run_command("penalize", parse_scenario_json(small_hand()), dir.string(), err) == config_error);
}

TEST_CASE("dynkin writes one row per requested time") {
    const auto dir = scratch("dynkin");
    std::ostringstream log;
    REQUIRE(run_command("dynkin", parse_scenario_json(small_hand()), dir.string(), log) == ok);
    const auto t = read_csv((dir / "dynkin.csv").string());
    CHECK(t.header == std::vector<std::string>{"t", "supinf", "infsup", "meanY", "tol_game", "ordering_defect"});
    REQUIRE(t.rows() == 2);
    for (std::size_t i = 0; i < 2; ++i)
        CHECK(std::abs(t.column("supinf")[i] - t.column("meanY")[i]) <= t.column("tol_game")[i]);
}

TEST_CASE("skorokhod subcommand solves the deterministic hand problem") {
    const auto dir = scratch("skorokhod");
    auto doc = small_hand();
    doc["skorokhod"] = {{"direction", "backward"}, {"s", 0.0}, {"a", 0.0}};
    std::ostringstream log;
    REQUIRE(run_command("skorokhod", parse_scenario_json(doc), dir.string(), log) == ok);
    const auto t = read_csv((dir / "skorokhod.csv").string());
    const auto& k = t.column("k");
    for (std::size_t i = 0; i < t.rows(); ++i)
        CHECK(std::abs((k.back() - k[i]) - std::max(0.0, 1.0 - 2.0 * t.column("t")[i])) <= 1e-12);
    const auto j = json::parse(slurp(dir / "skorokhod_summary.json"));
    CHECK(j["audit"]["identity_error"] == 0.0);
}

TEST_CASE("an unwritable output directory is a configuration error") {
    const auto dir = scratch("unwritable");
    std::ofstream(dir / "file") << "x";
    std::ostringstream log;
    CHECK(run_command("solve", parse_scenario_json(small_hand()), (dir / "file" / "sub").string(), log) ==
          config_error);
}

TEST_CASE("command-line tool: exit codes") {
    const auto dir = scratch("tool_codes");
    const auto good = write_scenario(dir, "hand.json", small_hand());
    std::ofstream(dir / "broken.json") << "{\"grid\": {\"T\": 1.0,, }";
    CHECK(run_tool("solve --config " + good.string() + " --out " + (dir / "o").string()) == 0);
    CHECK(run_tool("solve --config " + (dir / "broken.json").string()) == 1);
    CHECK(run_tool("solve --config " + (dir / "missing.json").string()) == 1);
    CHECK(run_tool("solve") == 1);
    CHECK(run_tool("frobnicate --config " + good.string()) == 1);
    CHECK(run_tool("solve --config " + good.string() + " --threads 0") == 1);

    auto t = read_csv((dir / "o" / "solution.csv").string());
    t.columns[3][5] = -1.0;  // K_R no longer nondecreasing
    write_csv((dir / "o" / "solution.csv").string(), t);
    CHECK(run_tool("validate --config " + good.string() + " --out " + (dir / "o").string()) == 3);
}

TEST_CASE("command-line tool: outputs are byte-identical across thread counts") {
    const auto dir = scratch("tool_threads");
    auto doc = json::parse(slurp(fs::path(DMRLAB_SCENARIOS) / "nonlinear_tanh.json"));
    doc["ensemble"]["M"] = 1000;
    doc["grid"]["N"] = 20;
    const auto cfg = write_scenario(dir, "nl.json", doc);
    for (const char* cmd : {"solve", "dynkin"}) {
        std::map<std::string, std::string> first;
        for (int threads : {1, 4, 3}) {
            const auto out = dir / (std::string(cmd) + std::to_string(threads));
            REQUIRE(run_tool(std::string(cmd) + " --config " + cfg.string() + " --out " + out.string() +
                             " --threads " + std::to_string(threads)) == 0);
            std::map<std::string, std::string> files;
            for (const auto& e : fs::directory_iterator(out)) files[e.path().filename().string()] = slurp(e.path());
            REQUIRE_FALSE(files.empty());
            if (first.empty()) first = files;
            CHECK(files == first);
        }
    }
}

TEST_CASE("command-line tool: --seed overrides the scenario seed") {
    const auto dir = scratch("tool_seed");
    const auto cfg = write_scenario(dir, "hand.json", small_hand());
    REQUIRE(run_tool("solve --config " + cfg.string() + " --out " + (dir / "a").string() + " --seed 77") == 0);
    const auto j = json::parse(slurp(dir / "a" / "solve_summary.json"));
    CHECK(j["seed"] == 77);
    CHECK(run_tool("validate --config " + cfg.string() + " --out " + (dir / "a").string()) == 1);
    CHECK(run_tool("validate --config " + cfg.string() + " --out " + (dir / "a").string() + " --seed 77") == 0);
}
