#include <CLI11.hpp>

#include <dmrlab/cli/commands.hpp>
#include <dmrlab/cli/scenario.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"dmrlab: doubly mean-reflected BSDE toolkit"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;

    for (const auto& name : dmr::cli::subcommands()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "Output directory (default: output.dir of the scenario)");
        sub->add_option("--seed", seed, "Override ensemble.seed");
        sub->add_option("--threads", threads, "Worker threads; outputs do not depend on it")
            ->check(CLI::Range(1u, 1024u));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : dmr::cli::config_error;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    dmr::set_thread_count(threads);

    dmr::cli::ScenarioConfig cfg;
    try {
        cfg = dmr::cli::parse_scenario(config_path, seed);
    } catch (const dmr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return dmr::cli::config_error;
    }
    return dmr::cli::run_command(command, cfg, out_dir.empty() ? cfg.output.dir : out_dir);
}
