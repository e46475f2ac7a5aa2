// cpmsim: run experiments, compare and inspect traces, manage scenario files.

#include "cpmsim/runner.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace cpmsim;

namespace
{
    void setup_logging()
    {
        auto logger = spdlog::stderr_color_mt("cpmsim");
        spdlog::set_default_logger(logger);
        spdlog::set_level(spdlog::level::info);
        if (const char *env = std::getenv("CPMSIM_LOG"))
            spdlog::set_level(spdlog::level::from_str(env));
    }

    nlohmann::json metrics_json(const Metrics &m, const std::vector<Criterion> &criteria)
    {
        nlohmann::json j;
        j["periods"] = m.periods;
        j["simulated_seconds"] = m.simulated_seconds;
        j["min_distance"] = m.min_distance;
        auto &col = j["collisions"] = nlohmann::json::array();
        for (const auto &c : m.collisions)
            col.push_back({{"period", c.period}, {"a", c.a}, {"b", c.b}});
        auto &vs = j["vehicles"] = nlohmann::json::array();
        for (const auto &v : m.vehicles)
            vs.push_back({{"id", v.vehicle_id},
                          {"external", v.external},
                          {"samples", v.samples},
                          {"tracking_rms", v.tracking_rms},
                          {"lateral_rms", v.lateral_rms},
                          {"max_tracking_error", v.max_tracking_error},
                          {"starved_periods", v.starved_periods}});
        if (m.gap_samples)
            j["platoon"] = {{"gap_reference", m.gap_reference},
                            {"gap_mean", m.gap_mean},
                            {"gap_max_deviation", m.gap_max_deviation},
                            {"samples", m.gap_samples}};
        j["deadline_misses"] = m.deadline_misses;
        j["max_period_wall"] = m.max_period_wall;
        j["max_hlc_wall"] = m.max_hlc_wall;
        j["max_mlc_wall"] = m.max_mlc_wall;
        j["published"] = m.published;
        j["lost"] = m.lost;
        auto &cr = j["criteria"] = nlohmann::json::array();
        for (const auto &c : criteria)
            cr.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
        return j;
    }

    void print_metrics(const Metrics &m, const std::vector<Criterion> &criteria)
    {
        fmt::print("simulated  {:.2f} s ({} periods)\n", m.simulated_seconds, m.periods);
        fmt::print("messages   {} published, {} lost\n", m.published, m.lost);
        fmt::print("timing     {} deadline misses, busiest period {:.2f} ms, planner step {:.2f} ms, "
                   "controller step {:.3f} ms\n",
                   m.deadline_misses, 1e3 * m.max_period_wall, 1e3 * m.max_hlc_wall, 1e3 * m.max_mlc_wall);
        for (const auto &v : m.vehicles)
            fmt::print("vehicle {:2} {} tracking RMS {:.4f} m, lateral RMS {:.4f} m, max {:.4f} m\n", v.vehicle_id,
                       v.external ? "ext" : "int", v.tracking_rms, v.lateral_rms, v.max_tracking_error);
        for (const auto &c : criteria)
            fmt::print("[{}] {}: {}\n", c.passed ? "PASS" : "FAIL", c.name, c.detail);
    }

    let::ExecutionMode parse_mode(const std::string &s)
    {
        if (s == "sequential")
            return let::ExecutionMode::Sequential;
        if (s == "shuffled")
            return let::ExecutionMode::Shuffled;
        return let::ExecutionMode::Parallel;
    }
} // namespace

int main(int argc, char **argv)
{
    setup_logging();
    CLI::App app{"Deterministic mixed-traffic lab simulator"};
    app.require_subcommand(1);

    // run
    auto *run = app.add_subcommand("run", "Run a scenario (fixture name or file)");
    std::string scenario, trace_out, jsonl_out, metrics_out, mode = "sequential", listen = "127.0.0.1:0";
    std::optional<std::uint64_t> seed;
    std::optional<double> duration;
    int threads = 2, join_timeout_ms = 10000, step_timeout_ms = 200;
    bool check = false;
    run->add_option("scenario", scenario, "Fixture name or scenario file")->required();
    run->add_option("--seed", seed, "Override the scenario seed");
    run->add_option("--duration", duration, "Override the duration in seconds")->check(CLI::PositiveNumber);
    run->add_option("--trace", trace_out, "Write the binary trace here");
    run->add_option("--jsonl", jsonl_out, "Write the trace as JSON lines here");
    run->add_option("--metrics-json", metrics_out, "Write metrics and criteria as JSON here");
    run->add_option("--exec", mode, "Step execution order")
        ->check(CLI::IsMember({"sequential", "shuffled", "parallel"}));
    run->add_option("--threads", threads, "Worker threads for parallel execution")->check(CLI::Range(1, 64));
    run->add_option("--listen", listen, "Endpoint for external vehicles");
    run->add_option("--join-timeout", join_timeout_ms, "Milliseconds to wait for external vehicles");
    run->add_option("--step-timeout", step_timeout_ms, "Milliseconds an external vehicle has per step");
    run->add_flag("--check", check, "Exit with status 1 when a criterion fails");

    // compare
    auto *compare = app.add_subcommand("compare", "Compare two traces bit for bit");
    std::string trace_a, trace_b;
    compare->add_option("a", trace_a)->required()->check(CLI::ExistingFile);
    compare->add_option("b", trace_b)->required()->check(CLI::ExistingFile);

    // metrics
    auto *metrics = app.add_subcommand("metrics", "Recompute metrics from a trace");
    std::string metrics_trace;
    bool as_json = false;
    metrics->add_option("trace", metrics_trace)->required()->check(CLI::ExistingFile);
    metrics->add_flag("--json", as_json, "Print JSON");

    // export
    auto *exp = app.add_subcommand("export", "Convert a trace to JSON lines");
    std::string export_trace, export_out;
    exp->add_option("trace", export_trace)->required()->check(CLI::ExistingFile);
    exp->add_option("-o,--out", export_out, "Output file (default stdout)");

    // fixtures
    auto *fixtures = app.add_subcommand("fixtures", "Built-in scenarios");
    fixtures->require_subcommand(1);
    auto *fx_list = fixtures->add_subcommand("list", "List fixture names");
    auto *fx_show = fixtures->add_subcommand("show", "Print a scenario in file format");
    std::string show_name;
    fx_show->add_option("scenario", show_name)->required();
    auto *fx_write = fixtures->add_subcommand("write", "Write every fixture into a directory");
    std::string fx_dir;
    fx_write->add_option("dir", fx_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try
    {
        if (*run)
        {
            RunOptions opt;
            opt.seed = seed;
            opt.duration = duration;
            opt.execution.mode = parse_mode(mode);
            opt.execution.threads = static_cast<unsigned>(threads);
            opt.listen = let::Endpoint::parse(listen);
            opt.join_timeout = std::chrono::milliseconds(join_timeout_ms);
            opt.step_timeout = std::chrono::milliseconds(step_timeout_ms);
            opt.progress = [](std::int64_t done, std::int64_t total) {
                spdlog::debug("period {}/{}", done, total);
            };
            const auto spec = resolve_scenario(scenario);
            spdlog::info("running '{}' seed {} for {} s", spec.name, seed.value_or(spec.seed),
                         duration.value_or(spec.duration));
            const auto r = run_experiment(spec, opt);
            if (!trace_out.empty())
                write_trace(r.trace, trace_out);
            if (!jsonl_out.empty())
            {
                std::ofstream f(jsonl_out);
                export_jsonl(r.trace, f);
            }
            if (!metrics_out.empty())
                std::ofstream(metrics_out) << metrics_json(r.metrics, r.criteria).dump(2) << '\n';
            fmt::print("scenario   {} (seed {})\n", r.spec.name, r.spec.seed);
            fmt::print("wall       {:.2f} s\n", r.wall_seconds);
            fmt::print("planner    {} plans, {} yielding, {} emergency stops, {} rejected\n", r.hlc.plans,
                       r.hlc.yielding, r.hlc.emergencies, r.hlc.verification_failures);
            fmt::print("ips        {} frames, {} observations, {} dropped\n", r.ips.frames, r.ips.observations,
                       r.ips.dropped);
            if (r.spec.has_external())
                fmt::print("external   {} joined, {} steps, {} timeouts, {} late datagrams\n", r.external.joined,
                           r.external.steps, r.external.timeouts, r.external.late);
            print_metrics(r.metrics, r.criteria);
            return check && !r.passed ? 1 : 0;
        }
        if (*compare)
        {
            const auto diff = compare_traces(read_trace(trace_a), read_trace(trace_b));
            fmt::print("{}\n", diff.equal ? "equal" : diff.describe());
            return diff.equal ? 0 : 1;
        }
        if (*metrics)
        {
            const auto trace = read_trace(metrics_trace);
            const auto spec = parse_scenario(trace.header.scenario_text);
            const auto m = compute_metrics(trace, spec);
            const auto c = evaluate(spec, m);
            if (as_json)
                fmt::print("{}\n", metrics_json(m, c).dump(2));
            else
                print_metrics(m, c);
            return 0;
        }
        if (*exp)
        {
            const auto trace = read_trace(export_trace);
            if (export_out.empty())
                export_jsonl(trace, std::cout);
            else
            {
                std::ofstream f(export_out);
                export_jsonl(trace, f);
            }
            return 0;
        }
        if (*fx_list)
        {
            for (const auto &n : fixture_names())
                fmt::print("{}\n", n);
            return 0;
        }
        if (*fx_show)
        {
            fmt::print("{}", format_scenario(resolve_scenario(show_name)));
            return 0;
        }
        if (*fx_write)
        {
            std::filesystem::create_directories(fx_dir);
            for (const auto &n : fixture_names())
                save_scenario(fixture(n), std::filesystem::path(fx_dir) / (n + ".cpmscenario"));
            return 0;
        }
    }
    catch (const ScenarioError &e)
    {
        spdlog::error("scenario: {}", e.what());
        return 2;
    }
    catch (const std::exception &e)
    {
        spdlog::error("{}", e.what());
        return 2;
    }
    return 0;
}
