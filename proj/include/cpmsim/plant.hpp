#pragma once

// Vehicle plant and low-level controller (LLC): kinematic bicycle with a
// first-order motor lag, actuator clamping and sensor synthesis.

#include "cpmsim/let/scheduler.hpp"
#include "cpmsim/messages.hpp"
#include "cpmsim/rng.hpp"
#include "cpmsim/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace cpmsim
{
    /// Motor gains: speed' = k_m * motor_input - k_d * speed.
    /// Full throttle settles at k_m / k_d = 3.7 m/s.
    struct MotorModel
    {
        double k_m = 7.4;
        double k_d = 2.0;

        /// Motor input that holds `speed` in steady state.
        double steady_state_input(double speed) const noexcept { return k_d * speed / k_m; }
    };

    struct NoiseConfig
    {
        double odometer_sigma = 0.01;     // m/s
        double imu_accel_sigma = 0.1;     // m/s^2
        double imu_yaw_rate_sigma = 0.005; // rad/s
        double odometer_tick = 0.005;     // m/s
        std::string stream = "sensors";

        static NoiseConfig noiseless() noexcept
        {
            NoiseConfig n;
            n.odometer_sigma = n.imu_accel_sigma = n.imu_yaw_rate_sigma = 0.0;
            n.odometer_tick = 1e-6;
            return n;
        }
        void validate() const;
    };

    /// One explicit Euler step of length dt (seconds).
    VehicleState step_dynamics(const VehicleState &state, const ActuatorCommand &cmd, double dt,
                               const VehicleParams &params, const MotorModel &motor = {});

    /// Integrates `span` in sub-steps of at most `substep`.
    VehicleState integrate(const VehicleState &state, const ActuatorCommand &cmd, Duration span, Duration substep,
                           const VehicleParams &params, const MotorModel &motor = {});

    /// Clips motor input to [-1, 1] and steering to +-max_steering. Throws Error on non-finite fields.
    ActuatorCommand apply_limits(const ActuatorCommand &cmd, const VehicleParams &params);

    double quantize(double value, double tick) noexcept;

    /// `prev_speed` is the true speed one sample interval `dt` (seconds) earlier.
    SensorSample sample_sensors(const VehicleState &state, double prev_speed, double dt, Time sample_time,
                                const NoiseConfig &noise, RngStream &rng);

    struct LlcConfig
    {
        VehicleParams params;
        MotorModel motor;
        NoiseConfig noise;
        Duration substep = milliseconds(1);
        ActuatorCommand initial_command; // held until the first command arrives
    };

    struct Outgoing
    {
        std::string topic;
        Bytes payload;
    };

    /// Plant owner. Each step applies the newest command among its inputs (else
    /// holds the previous one), advances the plant over the step, then emits
    /// sensors and the ground-truth state at the end of the step.
    class LowLevelController
    {
    public:
        LowLevelController(VehicleState initial, LlcConfig config, std::uint64_t seed);

        std::vector<Outgoing> step(const std::vector<let::Envelope> &inputs, Time now, Duration dt);

        const VehicleState &state() const noexcept { return state_; }
        const ActuatorCommand &applied_command() const noexcept { return command_; }
        int vehicle_id() const noexcept { return config_.params.vehicle_id; }
        std::vector<std::string> subscriptions() const;

    private:
        LlcConfig config_;
        VehicleState state_;
        ActuatorCommand command_;
        double mean_speed_ = 0.0;
        RngStream rng_;
    };
} // namespace cpmsim
