#pragma once

// Mid-level controller: odometry/IPS fusion and trajectory following.

#include "cpmsim/messages.hpp"
#include "cpmsim/plant.hpp"
#include "cpmsim/trajectory.hpp"

#include <deque>
#include <optional>
#include <vector>

namespace cpmsim
{
    /// Position advanced along the midpoint heading by odometer speed; yaw by the gyro.
    FusedState dead_reckon(const FusedState &prev, const SensorSample &sample, double dt);

    /// Blends the observation into the state with gain alpha in (0, 1]. Throws Error on identity mismatch.
    FusedState fuse_ips(const FusedState &state, const PoseObservation &obs, double alpha);

    struct MpcConfig
    {
        int horizon = 8;
        Duration control_period = milliseconds(20);
        double w_pos = 60.0;
        double w_yaw = 0.6;
        double w_vel = 4.0; // speed tracking; keeps the longitudinal loop damped
        double w_input = 0.002;
        double w_input_rate = 0.05;
        int iterations = 3;
        int input_delay_steps = 1; // commands act one control period after they are computed
        int model_substeps = 4;
        MotorModel motor;

        void validate() const;
    };

    class StarvedTrajectory : public Error
    {
    public:
        using Error::Error;
    };

    struct MpcResult
    {
        ActuatorCommand command;
        double cost = 0.0;      // predicted cost of the returned sequence
        double hold_cost = 0.0; // holding the previous command for the whole horizon
        double zero_cost = 0.0; // zero input for the whole horizon
        int iterations_used = 0;
        std::vector<ActuatorCommand> sequence;
    };

    /// Time span the reference has to cover for a solve at `now`.
    Time mpc_horizon_end(Time now, const MpcConfig &cfg);

    /// Iterative LQR over the plant model. Throws StarvedTrajectory when the
    /// reference does not cover the horizon.
    MpcResult mpc_solve(const FusedState &state, const ActuatorCommand &previous, const Trajectory &traj, Time now,
                        const MpcConfig &cfg, const VehicleParams &params,
                        const std::vector<ActuatorCommand> *warm_start = nullptr);

    /// Predicted cost of a fixed input sequence, as used by mpc_solve.
    double mpc_cost(const FusedState &state, const ActuatorCommand &previous, std::span<const ActuatorCommand> inputs,
                    const Trajectory &traj, Time now, const MpcConfig &cfg, const VehicleParams &params);

    ActuatorCommand mpc_follow(const FusedState &state, const ActuatorCommand &previous, const Trajectory &traj,
                               Time now, const MpcConfig &cfg, const VehicleParams &params);

    ActuatorCommand direct_control(const ActuatorCommand &cmd, const VehicleParams &params);

    enum class ControlMode : std::uint8_t
    {
        Trajectory,
        Direct,
    };

    struct MlcConfig
    {
        VehicleParams params;
        MpcConfig mpc;
        double ips_gain = 0.3;
        double ips_gate = 0.1;      // m, observations further from the estimate are rejected
        double ips_yaw_gate = 0.35; // rad
        int ips_relock = 50;        // accept again after this many consecutive rejections
        ControlMode mode = ControlMode::Trajectory;
        ActuatorCommand initial_command;
        std::size_t pose_history = 64; // steps kept for latency compensation
        Duration keep_past = seconds(1);
    };

    struct MlcDiagnostics
    {
        std::uint64_t starved_steps = 0;
        std::uint64_t mode_mismatches = 0;
        std::uint64_t rejected_trajectories = 0;
        std::uint64_t ips_corrections = 0;
        std::uint64_t stale_observations = 0;
        std::uint64_t rejected_observations = 0;
        std::uint64_t descent_violations = 0;
    };

    class MidLevelController
    {
    public:
        MidLevelController(const Pose &initial_pose, double initial_speed, MlcConfig config);

        std::vector<Outgoing> step(const std::vector<let::Envelope> &inputs, Time now, Duration dt);

        const FusedState &fused() const noexcept { return fused_; }
        const ActuatorCommand &last_command() const noexcept { return command_; }
        const Trajectory &trajectory() const noexcept { return trajectory_; }
        const MlcDiagnostics &diagnostics() const noexcept { return diag_; }
        int vehicle_id() const noexcept { return config_.params.vehicle_id; }
        std::vector<std::string> subscriptions() const;

    private:
        void apply_observation(const PoseObservation &obs);

        MlcConfig config_;
        FusedState fused_;
        Time fused_time_ = 0;
        double last_yaw_rate_ = 0.0;
        std::deque<std::pair<Time, Pose>> history_;
        ActuatorCommand command_;
        Trajectory trajectory_;
        std::vector<ActuatorCommand> warm_;
        MlcDiagnostics diag_;
        int rejected_streak_ = 0;
    };
} // namespace cpmsim
