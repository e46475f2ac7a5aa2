// cpmsim-vehicle: reference external vehicle. Runs the on-board controllers of
// one vehicle and exchanges bus traffic with a runner over UDP.

#include "cpmsim/runner.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>

using namespace cpmsim;

int main(int argc, char **argv)
{
    spdlog::set_default_logger(spdlog::stderr_color_mt("vehicle"));
    spdlog::set_level(spdlog::level::warn);
    if (const char *env = std::getenv("CPMSIM_LOG"))
        spdlog::set_level(spdlog::level::from_str(env));

    CLI::App app{"External vehicle client"};
    std::string scenario, runner;
    int id = 0, connect_ms = 10000, idle_ms = 10000;
    app.add_option("scenario", scenario, "Fixture name or scenario file")->required();
    app.add_option("--id", id, "Vehicle id")->required();
    app.add_option("--runner", runner, "Runner endpoint a.b.c.d:port")->required();
    app.add_option("--connect-timeout", connect_ms, "Milliseconds to wait for the runner");
    app.add_option("--idle-timeout", idle_ms, "Milliseconds of silence before giving up");
    CLI11_PARSE(app, argc, argv);

    try
    {
        ClientOptions opt;
        opt.connect_timeout = std::chrono::milliseconds(connect_ms);
        opt.idle_timeout = std::chrono::milliseconds(idle_ms);
        const auto report = run_external_vehicle(resolve_scenario(scenario), id, let::Endpoint::parse(runner), opt);
        spdlog::info("vehicle {} finished after {} steps", id, report.steps);
        return report.clean_exit ? 0 : 1;
    }
    catch (const std::exception &e)
    {
        spdlog::error("vehicle {}: {}", id, e.what());
        return 2;
    }
}
