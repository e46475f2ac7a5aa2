#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cpmsim
{
    /// Logical time in integer nanoseconds since experiment start.
    using Time = std::int64_t;
    /// Duration in integer nanoseconds.
    using Duration = std::int64_t;

    inline constexpr Duration kNanosPerMilli = 1'000'000;
    inline constexpr Duration kNanosPerSecond = 1'000'000'000;

    constexpr Duration milliseconds(std::int64_t ms) noexcept { return ms * kNanosPerMilli; }
    constexpr Duration seconds(std::int64_t s) noexcept { return s * kNanosPerSecond; }
    inline Duration seconds_to_nanos(double s) { return static_cast<Duration>(std::llround(s * 1e9)); }
    constexpr double to_seconds(Duration d) noexcept { return static_cast<double>(d) * 1e-9; }

    inline constexpr double kPi = std::numbers::pi;

    /// Base class for all errors raised by this library.
    class Error : public std::runtime_error
    {
    public:
        using std::runtime_error::runtime_error;
    };

    /// Timed waypoint exchanged between planning and trajectory following.
    struct TrajectoryNode
    {
        Time t = 0;
        double x = 0.0;
        double y = 0.0;
        double vx = 0.0;
        double vy = 0.0;

        double speed() const noexcept { return std::hypot(vx, vy); }
        friend bool operator==(const TrajectoryNode &, const TrajectoryNode &) = default;
    };

    /// Planar pose; yaw normalized to (-pi, pi].
    struct Pose
    {
        double x = 0.0;
        double y = 0.0;
        double yaw = 0.0;

        friend bool operator==(const Pose &, const Pose &) = default;
    };

    struct VehicleState
    {
        Pose pose;
        double speed = 0.0; // signed, along body x
        double yaw_rate = 0.0;
        double steering_angle = 0.0;

        friend bool operator==(const VehicleState &, const VehicleState &) = default;
    };

    struct VehicleParams
    {
        double length = 0.220;
        double width = 0.107;
        double height = 0.070;
        double max_speed = 3.7;
        double wheelbase = 0.150;
        double max_steering = 0.44;
        int vehicle_id = 1;

        /// tan(max_steering) / wheelbase.
        double max_curvature() const { return std::tan(max_steering) / wheelbase; }
        /// Throws Error if any invariant is violated.
        void validate() const;
    };

    struct ActuatorCommand
    {
        double motor_input = 0.0; // normalized duty in [-1, 1]
        double steering_angle = 0.0;

        friend bool operator==(const ActuatorCommand &, const ActuatorCommand &) = default;
    };

    enum class NodeViolation : std::uint8_t
    {
        None = 0,
        NonFinite,
        NegativeTime,
        SpeedLimit,
    };

    struct NodeValidation
    {
        NodeViolation violation = NodeViolation::None;
        double value = 0.0; // offending value, when meaningful
        std::string message;

        bool ok() const noexcept { return violation == NodeViolation::None; }
        explicit operator bool() const noexcept { return ok(); }
    };

    /// Checks a node against finiteness, time sign and the speed limit, in that order.
    NodeValidation validate_node(const TrajectoryNode &node, const VehicleParams &params);

    /// Maps a finite angle onto (-pi, pi]. Throws Error on non-finite input.
    double normalize_yaw(double angle);

    /// Shortest signed angular difference a - b, in (-pi, pi].
    double angle_diff(double a, double b);

    const char *to_string(NodeViolation v) noexcept;
} // namespace cpmsim
