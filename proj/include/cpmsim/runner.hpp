#pragma once

// Experiment runner: wires the vehicle, IPS and planner cores onto the LET bus,
// records a trace and derives the evaluation metrics.

#include "cpmsim/hlc.hpp"
#include "cpmsim/ips.hpp"
#include "cpmsim/let/scheduler.hpp"
#include "cpmsim/let/udp.hpp"
#include "cpmsim/scenario.hpp"
#include "cpmsim/trace.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cpmsim
{
    namespace participant
    {
        inline constexpr let::ParticipantId kIps = 10;
        inline constexpr let::ParticipantId kCentralHlc = 1000;
        constexpr let::ParticipantId hlc(int vehicle_id) { return 1000 + static_cast<let::ParticipantId>(vehicle_id); }
        constexpr let::ParticipantId mlc(int vehicle_id) { return 2000 + static_cast<let::ParticipantId>(vehicle_id); }
        constexpr let::ParticipantId llc(int vehicle_id) { return 3000 + static_cast<let::ParticipantId>(vehicle_id); }
    } // namespace participant

    /// State the plant starts from.
    VehicleState initial_state(const VehicleSpec &v, const VehicleParams &params = {});
    LlcConfig llc_config(const ScenarioSpec &spec, const VehicleSpec &v);
    MlcConfig mlc_config(const ScenarioSpec &spec, const VehicleSpec &v);
    IpsConfig ips_config(const ScenarioSpec &spec);

    /// On-board controllers of one vehicle, configured identically wherever they run.
    struct VehicleStack
    {
        LowLevelController llc;
        MidLevelController mlc;
    };
    VehicleStack make_vehicle_stack(const ScenarioSpec &spec, int vehicle_id);

    struct CollisionEvent
    {
        std::int64_t period = 0;
        int a = 0;
        int b = 0;
    };

    struct VehicleMetrics
    {
        int vehicle_id = 0;
        bool external = false;
        std::uint64_t samples = 0; // steady-state periods with a reference
        double tracking_rms = 0.0; // position error to the reference
        double lateral_rms = 0.0;  // error component across the heading
        double max_tracking_error = 0.0;
        std::uint64_t starved_periods = 0;
    };

    struct Metrics
    {
        std::int64_t periods = 0;
        double simulated_seconds = 0.0;
        std::vector<CollisionEvent> collisions; // onsets only
        double min_distance = 0.0;              // between footprints
        std::vector<VehicleMetrics> vehicles;

        // Platoon, over the steady-state window.
        double gap_reference = 0.0;
        double gap_mean = 0.0;
        double gap_max_deviation = 0.0; // relative to the reference
        std::uint64_t gap_samples = 0;

        std::uint64_t deadline_misses = 0;
        double max_period_wall = 0.0; // s, summed step time of the busiest period
        double max_hlc_wall = 0.0;
        double max_mlc_wall = 0.0;
        std::uint64_t published = 0;
        std::uint64_t lost = 0;

        const VehicleMetrics &vehicle(int id) const;
        /// Mean tracking RMS over internal (or external) vehicles.
        double mean_tracking_rms(bool external) const;
    };

    Metrics compute_metrics(const Trace &trace, const ScenarioSpec &spec);

    struct Criterion
    {
        std::string name;
        bool passed = false;
        std::string detail;
    };

    /// Pass/fail checks that apply to the scenario kind.
    std::vector<Criterion> evaluate(const ScenarioSpec &spec, const Metrics &m);

    struct ExternalStats
    {
        int joined = 0;
        int left = 0;
        std::uint64_t steps = 0;
        std::uint64_t timeouts = 0; // steps whose completion did not arrive in time
        std::uint64_t late = 0;     // datagrams for an already closed step
    };

    struct RunOptions
    {
        std::optional<std::uint64_t> seed;
        std::optional<double> duration;
        let::ExecutionPolicy execution;
        /// Where external vehicles connect; port 0 picks a free one.
        let::Endpoint listen{0x7F000001, 0};
        std::chrono::milliseconds step_timeout{200};
        std::chrono::milliseconds join_timeout{10000};
        /// Called once the external endpoint is bound, before waiting for clients.
        std::function<void(const let::Endpoint &)> on_listening;
        /// Keep every trajectory payload per vehicle.
        bool keep_trajectories = false;
        /// Progress callback, every `progress_every` periods.
        std::function<void(std::int64_t done, std::int64_t total)> progress;
        std::int64_t progress_every = 500;
    };

    struct RunResult
    {
        ScenarioSpec spec; // after overrides
        Trace trace;
        Metrics metrics;
        std::vector<Criterion> criteria;
        bool passed = false;
        HlcDiagnostics hlc;
        MlcDiagnostics mlc; // summed over internal vehicles
        IpsStats ips;
        ExternalStats external;
        let::TickReport ticks;
        std::map<int, std::vector<Bytes>> trajectories;
        double wall_seconds = 0.0;
    };

    class RunError : public Error
    {
    public:
        using Error::Error;
    };

    RunResult run_experiment(ScenarioSpec spec, const RunOptions &options = {});

    struct ClientOptions
    {
        std::chrono::milliseconds hello_interval{200};
        std::chrono::milliseconds connect_timeout{10000};
        std::chrono::milliseconds idle_timeout{10000};
    };

    struct ClientReport
    {
        std::uint64_t steps = 0;
        bool clean_exit = false; // runner said goodbye
    };

    /// Reference external vehicle: runs the vehicle stack against a runner over UDP.
    ClientReport run_external_vehicle(const ScenarioSpec &spec, int vehicle_id, const let::Endpoint &runner,
                                      const ClientOptions &options = {});
} // namespace cpmsim
