#pragma once

// Topic names and payload encodings exchanged over the bus.

#include "cpmsim/codec.hpp"
#include "cpmsim/trajectory.hpp"
#include "cpmsim/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cpmsim
{
    namespace topics
    {
        std::string sensors(int vehicle_id);    // vehicle/<id>/sensors
        std::string command(int vehicle_id);    // vehicle/<id>/command
        std::string fused(int vehicle_id);      // vehicle/<id>/fused
        std::string truth(int vehicle_id);      // vehicle/<id>/truth
        std::string trajectory(int vehicle_id); // hlc/<id>/trajectory
        std::string direct(int vehicle_id);     // hlc/<id>/direct
        std::string committed(int vehicle_id);  // hlc/committed/<id>
        inline constexpr const char *kIpsPoses = "ips/poses";
        inline constexpr const char *kAllFused = "vehicle/*/fused";
        inline constexpr const char *kAllCommitted = "hlc/committed/*";

        /// Vehicle id embedded as the second path segment, or -1.
        int vehicle_of(std::string_view topic);
    } // namespace topics

    struct SensorSample
    {
        double odometer_speed = 0.0;
        double imu_accel = 0.0;
        double imu_yaw_rate = 0.0;
        Time sample_time = 0;

        friend bool operator==(const SensorSample &, const SensorSample &) = default;
    };

    struct PoseObservation
    {
        int vehicle_id = 0;
        Pose pose;
        std::int64_t frame_index = 0;
        Time frame_time = 0;

        friend bool operator==(const PoseObservation &, const PoseObservation &) = default;
    };

    enum FusedFlags : std::uint32_t
    {
        kFlagStarved = 1u << 0,       // trajectory did not cover the control horizon
        kFlagNoTrajectory = 1u << 1,  // nothing received yet
        kFlagModeMismatch = 1u << 2,  // input for the inactive mode arrived this step
        kFlagRejectedNodes = 1u << 3, // an incoming node list failed validation
    };

    /// MLC output: fused estimate plus what the controller tracked this step.
    struct FusedState
    {
        int vehicle_id = 0;
        Pose pose;
        double speed = 0.0;
        std::int64_t confidence_age = 0; // periods since the last IPS correction
        bool has_reference = false;
        double ref_x = 0.0;
        double ref_y = 0.0;
        std::uint64_t trajectory_id = 0; // sequence number of the last accepted trajectory message
        std::uint32_t flags = 0;
        std::uint64_t mode_mismatches = 0;

        friend bool operator==(const FusedState &, const FusedState &) = default;
    };

    struct TrajectoryMessage
    {
        int vehicle_id = 0;
        std::vector<TrajectoryNode> nodes;

        friend bool operator==(const TrajectoryMessage &, const TrajectoryMessage &) = default;
    };

    struct CommittedMessage
    {
        int vehicle_id = 0;
        int priority = 0;
        std::vector<TrajectoryNode> nodes;

        friend bool operator==(const CommittedMessage &, const CommittedMessage &) = default;
    };

    Bytes encode(const SensorSample &m);
    Bytes encode(const ActuatorCommand &m);
    Bytes encode(const VehicleState &m);
    Bytes encode(const FusedState &m);
    Bytes encode(const TrajectoryMessage &m);
    Bytes encode(const CommittedMessage &m);
    Bytes encode(const std::vector<PoseObservation> &m);

    SensorSample decode_sensor_sample(std::span<const std::uint8_t> b);
    ActuatorCommand decode_command(std::span<const std::uint8_t> b);
    VehicleState decode_vehicle_state(std::span<const std::uint8_t> b);
    FusedState decode_fused_state(std::span<const std::uint8_t> b);
    TrajectoryMessage decode_trajectory_message(std::span<const std::uint8_t> b);
    CommittedMessage decode_committed_message(std::span<const std::uint8_t> b);
    std::vector<PoseObservation> decode_observations(std::span<const std::uint8_t> b);

    void write_pose(ByteWriter &w, const Pose &p);
    Pose read_pose(ByteReader &r);
    void write_state(ByteWriter &w, const VehicleState &s);
    VehicleState read_state(ByteReader &r);
} // namespace cpmsim
