#pragma once

// Experiment description: map, vehicles, timing and noise settings, plus the
// text format used for scenario files.

#include "cpmsim/map.hpp"
#include "cpmsim/mlc.hpp"
#include "cpmsim/plant.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cpmsim
{
    class ScenarioError : public Error
    {
    public:
        ScenarioError(const std::string &what, int line = 0);
        int line() const noexcept { return line_; }

    private:
        int line_;
    };

    enum class ScenarioKind : std::uint8_t
    {
        Platoon,      // leader plus time-shifted followers
        Intersection, // random routes, static priorities
        Follow,       // every vehicle drives its path at the reference speed
        Direct,       // constant direct commands
    };

    enum class Topology : std::uint8_t
    {
        Centralized, // one planner for all vehicles
        Distributed, // one planner per vehicle
    };

    struct VehicleSpec
    {
        int id = 1;
        bool external = false;
        std::string path; // empty: `pose` is given explicitly
        double s = 0.0;
        double offset = 0.0; // lateral offset from the path, left positive
        Pose pose;           // derived from path/s/offset when a path is set
        double speed = 0.0;  // initial speed
        ControlMode mode = ControlMode::Trajectory;
        ActuatorCommand direct; // Direct mode command

        friend bool operator==(const VehicleSpec &, const VehicleSpec &) = default;
    };

    struct IpsSettings
    {
        double noise_sigma = 0.001;
        double dropout = 0.0;
        int latency_frames = 1;

        friend bool operator==(const IpsSettings &, const IpsSettings &) = default;
    };

    struct SensorSettings
    {
        double odometer_sigma = 0.01;
        double accel_sigma = 0.1;
        double gyro_sigma = 0.005;
        double tick = 0.005;

        NoiseConfig noise() const;
        friend bool operator==(const SensorSettings &, const SensorSettings &) = default;
    };

    struct ScenarioSpec
    {
        std::string name = "unnamed";
        std::string map = "platoon_loop";
        ScenarioKind kind = ScenarioKind::Follow;
        Topology topology = Topology::Centralized;
        std::uint64_t seed = 1;
        double duration = 60.0;   // s
        int base_period_ms = 20;  // MLC, LLC and IPS rate
        int hlc_multiple = 5;     // planner period in base periods
        double ref_speed = 1.0;   // m/s
        double gap_time = 0.5;    // s, platoon
        double horizon = 2.0;     // s, planning horizon
        double max_accel = 1.5;   // m/s^2, planner
        double settle_time = 20.0; // s, start of the steady-state window for metrics
        IpsSettings ips;
        SensorSettings sensors;
        double network_loss = 0.0;
        int network_delay = 0; // extra periods, uniform 0..n
        std::vector<VehicleSpec> vehicles;

        Duration base_period() const noexcept { return milliseconds(base_period_ms); }
        Duration hlc_period() const noexcept { return base_period() * hlc_multiple; }
        std::int64_t periods() const;
        const VehicleSpec &vehicle(int id) const;
        bool has_external() const noexcept;

        friend bool operator==(const ScenarioSpec &, const ScenarioSpec &) = default;
    };

    /// Resolves derived poses, then checks every invariant. Throws ScenarioError.
    void finalize(ScenarioSpec &spec);

    ScenarioSpec parse_scenario(const std::string &text);
    std::string format_scenario(const ScenarioSpec &spec);
    ScenarioSpec load_scenario(const std::filesystem::path &file);
    void save_scenario(const ScenarioSpec &spec, const std::filesystem::path &file);

    /// Built-in experiments.
    std::vector<std::string> fixture_names();
    ScenarioSpec fixture(std::string_view name);
    /// A fixture name or a path to a scenario file.
    ScenarioSpec resolve_scenario(const std::string &name_or_path);

    const char *to_string(ScenarioKind k) noexcept;
    const char *to_string(Topology t) noexcept;
} // namespace cpmsim
