#include "cpmsim/plant.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace cpmsim
{
    void NoiseConfig::validate() const
    {
        if (!(odometer_sigma >= 0) || !(imu_accel_sigma >= 0) || !(imu_yaw_rate_sigma >= 0))
            throw Error("noise sigmas must be >= 0");
        if (!(odometer_tick > 0))
            throw Error("odometer tick must be > 0");
    }

    VehicleState step_dynamics(const VehicleState &s, const ActuatorCommand &cmd, double dt,
                               const VehicleParams &params, const MotorModel &motor)
    {
        const double v = s.speed;
        const double curvature = std::tan(cmd.steering_angle) / params.wheelbase;
        VehicleState n;
        n.pose.x = s.pose.x + dt * v * std::cos(s.pose.yaw);
        n.pose.y = s.pose.y + dt * v * std::sin(s.pose.yaw);
        n.pose.yaw = normalize_yaw(s.pose.yaw + dt * v * curvature);
        n.speed = std::clamp(v + dt * (motor.k_m * cmd.motor_input - motor.k_d * v), -params.max_speed,
                             params.max_speed);
        n.yaw_rate = v * curvature;
        n.steering_angle = cmd.steering_angle;
        return n;
    }

    VehicleState integrate(const VehicleState &state, const ActuatorCommand &cmd, Duration span, Duration substep,
                           const VehicleParams &params, const MotorModel &motor)
    {
        VehicleState s = state;
        Duration left = span;
        while (left > 0)
        {
            const Duration h = std::min(left, substep);
            s = step_dynamics(s, cmd, to_seconds(h), params, motor);
            left -= h;
        }
        return s;
    }

    ActuatorCommand apply_limits(const ActuatorCommand &cmd, const VehicleParams &params)
    {
        if (!std::isfinite(cmd.motor_input) || !std::isfinite(cmd.steering_angle))
            throw Error(fmt::format("non-finite actuator command ({}, {})", cmd.motor_input, cmd.steering_angle));
        return {std::clamp(cmd.motor_input, -1.0, 1.0),
                std::clamp(cmd.steering_angle, -params.max_steering, params.max_steering)};
    }

    double quantize(double value, double tick) noexcept { return std::round(value / tick) * tick; }

    SensorSample sample_sensors(const VehicleState &state, double prev_speed, double dt, Time sample_time,
                                const NoiseConfig &noise, RngStream &rng)
    {
        // Fixed draw order keeps the stream aligned whatever the sigmas are.
        const double n_odo = rng.gaussian(noise.odometer_sigma);
        const double n_acc = rng.gaussian(noise.imu_accel_sigma);
        const double n_gyro = rng.gaussian(noise.imu_yaw_rate_sigma);
        SensorSample out;
        out.odometer_speed = quantize(state.speed + n_odo, noise.odometer_tick);
        out.imu_accel = (state.speed - prev_speed) / dt + n_acc;
        out.imu_yaw_rate = state.yaw_rate + n_gyro;
        out.sample_time = sample_time;
        return out;
    }

    LowLevelController::LowLevelController(VehicleState initial, LlcConfig config, std::uint64_t seed)
        : config_(std::move(config)), state_(initial),
          rng_(seed, static_cast<std::uint64_t>(config_.params.vehicle_id), config_.noise.stream)
    {
        config_.params.validate();
        config_.noise.validate();
        command_ = apply_limits(config_.initial_command, config_.params);
        mean_speed_ = initial.speed;
    }

    std::vector<std::string> LowLevelController::subscriptions() const { return {topics::command(vehicle_id())}; }

    std::vector<Outgoing> LowLevelController::step(const std::vector<let::Envelope> &inputs, Time now, Duration dt)
    {
        const auto cmd_topic = topics::command(vehicle_id());
        for (const auto &e : inputs)
            if (e.topic == cmd_topic)
                command_ = apply_limits(decode_command(e.payload), config_.params);

        // Odometer and gyro report the mean over the step, as a tick counter
        // and a filtered gyro would.
        double distance = 0.0, turned = 0.0;
        Duration left = dt;
        while (left > 0)
        {
            const Duration h = std::min(left, config_.substep);
            const double hs = to_seconds(h);
            distance += hs * state_.speed;
            turned += hs * state_.speed * std::tan(command_.steering_angle) / config_.params.wheelbase;
            state_ = step_dynamics(state_, command_, hs, config_.params, config_.motor);
            left -= h;
        }
        VehicleState measured = state_;
        measured.speed = distance / to_seconds(dt);
        measured.yaw_rate = turned / to_seconds(dt);
        const auto sample = sample_sensors(measured, mean_speed_, to_seconds(dt), now + dt, config_.noise, rng_);
        mean_speed_ = measured.speed;

        std::vector<Outgoing> out;
        out.push_back({topics::sensors(vehicle_id()), encode(sample)});
        out.push_back({topics::truth(vehicle_id()), encode(state_)});
        return out;
    }
} // namespace cpmsim
