// ccmsim: scenario runner and asset server for the register-bus feeder
// simulation. See README.md for the file formats involved.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "ccm/bus.hpp"
#include "ccm/common.hpp"
#include "ccm/sim.hpp"

namespace {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };
LogLevel g_log = LogLevel::info;

void log_info(const std::string& msg) {
    if (g_log >= LogLevel::info) std::fprintf(stderr, "ccmsim: %s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
    if (g_log >= LogLevel::debug) std::fprintf(stderr, "ccmsim[debug]: %s\n", msg.c_str());
}

void init_log_level() {
    const char* env = std::getenv("CCMSIM_LOG");
    if (!env) return;
    const std::string v(env);
    if (v == "quiet") g_log = LogLevel::quiet;
    else if (v == "debug") g_log = LogLevel::debug;
    else if (v == "info") g_log = LogLevel::info;
    else std::fprintf(stderr, "ccmsim: ignoring unknown CCMSIM_LOG value '%s'\n", env);
}

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop = true; }

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void print_metrics_summary(const ccm::sim::MetricsReport& rep) {
    std::printf("scenario %s: %d samples at %.0fs\n", rep.scenario.c_str(),
                rep.samples, rep.cycle_s);
    auto row = [](const ccm::sim::MetricEntry& e, const char* kind) {
        std::printf("  %-8s %-22s N %3.0f -> %3.0f   A %10.4f -> %10.4f\n", kind,
                    e.element.c_str(), e.n.reference, e.n.controlled,
                    e.a_excess.reference, e.a_excess.controlled);
    };
    for (const auto& e : rep.voltage) row(e, "voltage");
    for (const auto& e : rep.flow) row(e, "flow");
    row(rep.voltage_total, "voltage");
    row(rep.flow_total, "flow");
}

struct RunArgs {
    std::string scenario;
    std::string out_dir = ".";
    std::string mode = "controlled";
    std::string transport = "in_process";
    std::optional<unsigned> seed;
    std::optional<double> noise_scale;
};

int cmd_run(const RunArgs& args) {
    ccm::sim::Scenario sc = ccm::sim::load_scenario_json(args.scenario);
    if (args.seed) sc.seed = *args.seed;
    if (args.noise_scale) sc.noise_scale = *args.noise_scale;

    std::filesystem::create_directories(args.out_dir);

    ccm::sim::RunOptions opts;
    opts.transport = args.transport == "bus" ? ccm::sim::Transport::bus
                                             : ccm::sim::Transport::in_process;

    std::optional<ccm::sim::RunTrace> controlled, reference;
    if (args.mode == "controlled" || args.mode == "both") {
        opts.mode = ccm::sim::RunMode::controlled;
        log_info("running controlled mode (" + args.transport + ")");
        controlled = ccm::sim::run(sc, opts);
        const std::string trace_path = join_path(args.out_dir, "trace_controlled.csv");
        ccm::sim::write_trace_csv(trace_path, *controlled, sc.network);
        ccm::sim::write_cycle_log_jsonl(
            join_path(args.out_dir, "cycles_controlled.jsonl"), *controlled);
        log_info("wrote " + trace_path);
    }
    if (args.mode == "reference" || args.mode == "both") {
        opts.mode = ccm::sim::RunMode::reference;
        log_info("running reference mode");
        reference = ccm::sim::run(sc, opts);
        const std::string trace_path = join_path(args.out_dir, "trace_reference.csv");
        ccm::sim::write_trace_csv(trace_path, *reference, sc.network);
        log_info("wrote " + trace_path);
    }
    if (controlled && reference) {
        const ccm::sim::MetricsReport rep =
            ccm::sim::compute_metrics(*controlled, *reference, sc);
        ccm::sim::write_metrics_json(join_path(args.out_dir, "metrics.json"), rep);
        ccm::sim::write_comparison_csv(join_path(args.out_dir, "comparison.csv"),
                                       *controlled, *reference, sc);
        log_info("wrote " + join_path(args.out_dir, "metrics.json"));
        print_metrics_summary(rep);
    }
    return 0;
}

int cmd_validate(const std::string& path) {
    const ccm::sim::Scenario sc = ccm::sim::load_scenario_json(path);
    const int n = static_cast<int>(sc.network.buses.size());
    std::printf("scenario %s: ok\n", sc.name.c_str());
    std::printf("  network: %d buses, %zu branches (slack %s)\n", n,
                sc.network.branches.size(),
                sc.network.buses[static_cast<std::size_t>(sc.network.slack_index())]
                    .id.c_str());
    std::printf("  horizon: t = %.0f..%.0f s, %d samples, %d control cycles\n",
                sc.t0_s, sc.t_end_s, sc.steps(), sc.steps() - 1);
    std::printf("  measurements: %zu (state needs %d)\n", sc.measurements.size(),
                2 * n - 1);
    std::printf("  flow limits on %zu branches, %zu events\n",
                sc.schedule.entries().size(), sc.events.size());
    return 0;
}

int cmd_serve(const std::string& path, std::string host, int port, double rate) {
    ccm::sim::Scenario sc = ccm::sim::load_scenario_json(path);
    if (host.empty()) host = sc.bus_host;
    if (port < 0) port = sc.bus_port;

    ccm::sim::Plant plant(sc, ccm::sim::RunMode::controlled);
    for (const auto& [id, block] : plant.units()) {
        block->set_write_hook([label = block->label()](const ccm::bus::RegisterSpec& spec) {
            log_info("write " + label + "." + spec.name);
        });
    }

    ccm::bus::BusServer server;
    for (const auto& [id, block] : plant.units()) server.add_unit(id, block);
    server.start(host, static_cast<std::uint16_t>(port));
    log_info("serving " + std::to_string(plant.units().size()) + " units on " + host +
             ":" + std::to_string(server.port()));

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);

    const auto cycle = std::chrono::duration<double>(
        rate > 0.0 ? sc.cycle_s / rate : 0.0);
    const int n_steps = sc.steps();
    auto next = std::chrono::steady_clock::now();
    for (int k = 0; k < n_steps && !g_stop; ++k) {
        const double t = sc.time_at(k);
        plant.step(t);
        log_debug("t=" + std::to_string(t) + "s tap=" +
                  std::to_string(plant.last().tap_position));
        next += std::chrono::duration_cast<std::chrono::steady_clock::duration>(cycle);
        while (!g_stop && std::chrono::steady_clock::now() < next)
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (!g_stop) log_info("horizon complete; holding final state (ctrl-c to exit)");
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));

    log_info("shutting down");
    server.stop();
    return 0;
}

int cmd_metrics(const std::string& scenario_path, const std::string& controlled_path,
                const std::string& reference_path, const std::string& out_path,
                const std::string& comparison_path) {
    const ccm::sim::Scenario sc = ccm::sim::load_scenario_json(scenario_path);
    const ccm::sim::RunTrace controlled =
        ccm::sim::load_trace_csv(controlled_path, sc.network);
    const ccm::sim::RunTrace reference =
        ccm::sim::load_trace_csv(reference_path, sc.network);
    const ccm::sim::MetricsReport rep =
        ccm::sim::compute_metrics(controlled, reference, sc);
    if (!out_path.empty()) {
        ccm::sim::write_metrics_json(out_path, rep);
        log_info("wrote " + out_path);
    }
    if (!comparison_path.empty()) {
        ccm::sim::write_comparison_csv(comparison_path, controlled, reference, sc);
        log_info("wrote " + comparison_path);
    }
    print_metrics_summary(rep);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    init_log_level();

    CLI::App app{"feeder simulation with a register-bus controlled asset fleet"};
    app.require_subcommand(1);

    RunArgs run_args;
    CLI::App* run = app.add_subcommand("run", "simulate a scenario and write traces");
    run->add_option("--scenario", run_args.scenario, "scenario JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    run->add_option("--out", run_args.out_dir, "output directory (default .)");
    run->add_option("--mode", run_args.mode, "controlled, reference, or both")
        ->check(CLI::IsMember({"controlled", "reference", "both"}));
    run->add_option("--transport", run_args.transport,
                    "controller link: in_process or bus (TCP loopback)")
        ->check(CLI::IsMember({"in_process", "bus"}));
    unsigned seed_opt = 0;
    CLI::Option* seed_flag = run->add_option("--seed", seed_opt, "override scenario seed");
    double noise_opt = 0.0;
    CLI::Option* noise_flag =
        run->add_option("--noise-scale", noise_opt, "override measurement noise scale");

    std::string validate_path;
    CLI::App* validate =
        app.add_subcommand("validate", "check a scenario file and report its shape");
    validate->add_option("--scenario", validate_path, "scenario JSON file")
        ->required()
        ->check(CLI::ExistingFile);

    std::string serve_path, serve_host;
    int serve_port = -1;
    double serve_rate = 1.0;
    CLI::App* serve = app.add_subcommand(
        "serve-assets", "serve the simulated assets over TCP in wall-clock time");
    serve->add_option("--scenario", serve_path, "scenario JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    serve->add_option("--host", serve_host, "bind address (default from scenario)");
    serve->add_option("--port", serve_port, "TCP port (default from scenario; 0 = pick)");
    serve->add_option("--rate", serve_rate,
                      "time acceleration factor (0 = no pacing)");

    std::string m_scenario, m_controlled, m_reference, m_out = "metrics.json",
                                                       m_comparison;
    CLI::App* metrics =
        app.add_subcommand("metrics", "recompute metrics from stored traces");
    metrics->add_option("--scenario", m_scenario, "scenario JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    metrics->add_option("--controlled", m_controlled, "controlled trace CSV")
        ->required()
        ->check(CLI::ExistingFile);
    metrics->add_option("--reference", m_reference, "reference trace CSV")
        ->required()
        ->check(CLI::ExistingFile);
    metrics->add_option("--out", m_out, "metrics JSON output path ('' to skip)");
    metrics->add_option("--comparison", m_comparison, "comparison CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            if (*seed_flag) run_args.seed = seed_opt;
            if (*noise_flag) run_args.noise_scale = noise_opt;
            return cmd_run(run_args);
        }
        if (validate->parsed()) return cmd_validate(validate_path);
        if (serve->parsed())
            return cmd_serve(serve_path, serve_host, serve_port, serve_rate);
        if (metrics->parsed())
            return cmd_metrics(m_scenario, m_controlled, m_reference, m_out,
                               m_comparison);
    } catch (const ccm::ConfigError& e) {
        std::fprintf(stderr, "ccmsim: config error: %s\n", e.what());
        return 2;
    } catch (const ccm::TopologyError& e) {
        std::fprintf(stderr, "ccmsim: network error: %s\n", e.what());
        return 2;
    } catch (const ccm::ProtocolError& e) {
        std::fprintf(stderr, "ccmsim: bus error: %s\n", e.what());
        return 4;
    } catch (const ccm::LimitError& e) {
        std::fprintf(stderr, "ccmsim: limit error: %s\n", e.what());
        return 3;
    } catch (const ccm::Error& e) {
        std::fprintf(stderr, "ccmsim: solver error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ccmsim: unexpected error: %s\n", e.what());
        return 1;
    }
    return 0;
}
