#pragma once

#include "isac/scenario_io.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace isac {

struct CliInvocation {
    std::filesystem::path scenario_path;
    std::optional<std::uint64_t> seed;
    /// "--seed" or "ISAC_SEED" when seed is set.
    std::string seed_source;
    std::optional<int> runs;
    std::optional<std::filesystem::path> out_dir;
    std::optional<TrackerKind> tracker;
    std::optional<BeamMode> beam;
    std::optional<double> gamma;
    int verbosity = 0;
    int jobs = 1;
    std::vector<std::filesystem::path> compare_paths;
    bool compare = false;
    /// Set when --help was requested; the text is ready to print.
    std::optional<std::string> help;
};

inline int exit_status(ErrorCode code)
{
    if (code == ErrorCode::UsageError) {
        return 2;
    }
    return 10 + static_cast<int>(code);
}

/// Parses argv. `env_seed` stands in for ISAC_SEED so tests can inject it.
inline CliInvocation parse_and_validate(int argc, const char* const* argv,
                                        std::optional<std::string> env_seed = std::nullopt)
{
    CliInvocation inv;
    CLI::App app{"Road-aware beam tracking simulator", "isac_sim"};
    app.set_help_all_flag("--help-all");

    std::string scenario;
    std::uint64_t seed = 0;
    int runs = 0;
    std::string out;
    std::string tracker;
    std::string beam;
    double gamma = 0.0;
    auto* o_scenario = app.add_option("--scenario", scenario, "scenario JSON file");
    auto* o_seed = app.add_option("--seed", seed, "base seed (overrides ISAC_SEED and the file)");
    auto* o_runs = app.add_option("--runs", runs, "Monte-Carlo runs");
    auto* o_out = app.add_option("--out", out, "output directory");
    auto* o_tracker = app.add_option("--tracker", tracker, "tracker")
                          ->check(CLI::IsMember({"imm", "ekf-lk", "ekf-lc", "cartesian", "straight"}));
    auto* o_beam = app.add_option("--beam", beam, "beam mode")->check(CLI::IsMember({"constant", "dynamic", "oracle"}));
    auto* o_gamma = app.add_option("--gamma", gamma, "misalignment target in (0, 1)");
    app.add_flag("-v,--verbose", inv.verbosity, "more logging (repeatable)");
    app.add_option("--jobs", inv.jobs, "worker threads")->check(CLI::PositiveNumber);

    std::vector<std::string> compare_files;
    CLI::App* cmp = app.add_subcommand("compare", "tabulate two or more summary.json files");
    cmp->add_option("summaries", compare_files, "summary files")->required()->expected(2, -1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        inv.help = app.help();
        return inv;
    } catch (const CLI::CallForAllHelp&) {
        inv.help = app.help("", CLI::AppFormatMode::All);
        return inv;
    } catch (const CLI::ParseError& e) {
        throw Error(ErrorCode::UsageError, e.what());
    }

    if (cmp->parsed()) {
        inv.compare = true;
        for (const auto& f : compare_files) {
            inv.compare_paths.emplace_back(f);
        }
        return inv;
    }
    if (o_scenario->count() == 0) {
        throw Error(ErrorCode::UsageError, "--scenario is required");
    }
    inv.scenario_path = scenario;
    if (o_seed->count() > 0) {
        inv.seed = seed;
        inv.seed_source = "--seed";
    } else if (env_seed && !env_seed->empty()) {
        try {
            std::size_t used = 0;
            inv.seed = std::stoull(*env_seed, &used);
            inv.seed_source = "ISAC_SEED";
            if (used != env_seed->size()) {
                throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw Error(ErrorCode::UsageError, "ISAC_SEED is not an unsigned integer");
        }
    }
    if (o_runs->count() > 0) {
        if (runs < 1) {
            throw Error(ErrorCode::UsageError, "--runs must be at least 1");
        }
        inv.runs = runs;
    }
    if (o_out->count() > 0) {
        inv.out_dir = out;
    }
    if (o_tracker->count() > 0) {
        inv.tracker = tracker_from_string(tracker);
    }
    if (o_beam->count() > 0) {
        inv.beam = beam_mode_from_string(beam);
    }
    if (o_gamma->count() > 0) {
        if (!(gamma > 0.0 && gamma < 1.0)) {
            throw Error(ErrorCode::UsageError, "--gamma must lie in (0, 1)");
        }
        inv.gamma = gamma;
    }
    return inv;
}

/// Applies command-line overrides and returns them as the summary echo.
inline Json apply_overrides(const CliInvocation& inv, Scenario& sc)
{
    Json o = Json::object();
    if (inv.seed) {
        sc.seed = *inv.seed;
        o["seed"] = {{"value", *inv.seed}, {"source", inv.seed_source}};
    }
    if (inv.runs) {
        sc.mc_runs = *inv.runs;
        o["runs"] = *inv.runs;
    }
    if (inv.tracker) {
        sc.tracker = *inv.tracker;
        o["tracker"] = to_string(*inv.tracker);
    }
    if (inv.beam) {
        sc.beam_mode = *inv.beam;
        o["beam"] = to_string(*inv.beam);
    }
    if (inv.gamma) {
        sc.gamma = *inv.gamma;
        o["gamma"] = *inv.gamma;
    }
    if (inv.out_dir) {
        o["out"] = inv.out_dir->string();
    }
    return o;
}

inline std::string run_file_name(int run)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "run_%04d.csv", run);
    return buf;
}

/// Loads, runs and writes one batch: runs/run_NNNN.csv, summary.json and
/// curves/. Returns the process exit status.
inline int run_batch(const CliInvocation& inv, std::ostream& log)
{
    ScenarioFile file = load_scenario_file(inv.scenario_path);
    Scenario& sc = file.scenario;
    const Json overrides = apply_overrides(inv, sc);
    const std::filesystem::path out = inv.out_dir ? *inv.out_dir : std::filesystem::path(file.output_dir);

    if (inv.verbosity > 0) {
        log << "scenario " << sc.name << ": " << sc.mc_runs << " runs x " << sc.epochs << " epochs, tracker "
            << to_string(sc.tracker) << ", beam " << to_string(sc.beam_mode) << ", seed " << sc.seed << "\n";
    }
    const std::vector<RunResult> runs = run_batch_runs(sc, inv.jobs);
    const MetricsSummary m = aggregate(runs);

    std::error_code ec;
    std::filesystem::create_directories(out / "runs", ec);
    if (ec) {
        throw Error(ErrorCode::IoError, "cannot create " + (out / "runs").string() + ": " + ec.message());
    }
    if (file.write_runs) {
        for (const auto& r : runs) {
            write_text(out / "runs" / run_file_name(r.run), records_to_csv(r.records));
        }
    }
    write_text(out / "summary.json", summary_json(sc, overrides, m, runs).dump(2) + "\n");
    write_curves(out / "curves", m);

    if (inv.verbosity > 0) {
        log << "mean rate " << m.mean_rate << " bps/Hz, misalignment " << m.misalignment << ", mean position RMSE "
            << m.mean_rmse_pos << " m, diverged " << m.diverged << "/" << m.runs << "\n";
        for (const auto& r : runs) {
            if (!r.failure.empty() && inv.verbosity > 1) {
                log << "run " << r.run << " stopped: " << r.failure << "\n";
            }
        }
        log << "wrote " << out.string() << "\n";
    }
    return 0;
}

/// Whole-program entry: never throws, maps errors to exit statuses.
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    const char* env = std::getenv("ISAC_SEED");
    const std::optional<std::string> env_seed = env ? std::optional<std::string>(env) : std::nullopt;
    try {
        const CliInvocation inv = parse_and_validate(argc, argv, env_seed);
        if (inv.help) {
            out << *inv.help;
            return 0;
        }
        if (inv.compare) {
            out << compare_summaries(inv.compare_paths);
            return 0;
        }
        return run_batch(inv, err);
    } catch (const Error& e) {
        err << "isac_sim: " << e.what() << "\n";
        return exit_status(e.code());
    } catch (const std::exception& e) {
        err << "isac_sim: " << e.what() << "\n";
        return exit_status(ErrorCode::IoError);
    }
}

} // namespace isac
