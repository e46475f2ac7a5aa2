#include "cpmsim/mlc.hpp"

#include "cpmsim/geometry.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>

namespace cpmsim
{
    FusedState dead_reckon(const FusedState &prev, const SensorSample &sample, double dt)
    {
        FusedState s = prev;
        const double dyaw = sample.imu_yaw_rate * dt;
        const double mid = prev.pose.yaw + 0.5 * dyaw;
        s.pose.x += sample.odometer_speed * dt * std::cos(mid);
        s.pose.y += sample.odometer_speed * dt * std::sin(mid);
        s.pose.yaw = normalize_yaw(prev.pose.yaw + dyaw);
        s.speed = sample.odometer_speed;
        s.confidence_age = prev.confidence_age + 1;
        return s;
    }

    FusedState fuse_ips(const FusedState &state, const PoseObservation &obs, double alpha)
    {
        if (obs.vehicle_id != state.vehicle_id)
            throw Error(fmt::format("IPS observation for vehicle {} fused into vehicle {}", obs.vehicle_id,
                                    state.vehicle_id));
        if (!(alpha > 0.0 && alpha <= 1.0))
            throw Error(fmt::format("fusion gain {} outside (0, 1]", alpha));
        FusedState s = state;
        if (alpha == 1.0)
        {
            s.pose = obs.pose;
            s.pose.yaw = normalize_yaw(obs.pose.yaw);
        }
        else
        {
            s.pose.x = (1 - alpha) * state.pose.x + alpha * obs.pose.x;
            s.pose.y = (1 - alpha) * state.pose.y + alpha * obs.pose.y;
            s.pose.yaw = normalize_yaw(state.pose.yaw + alpha * angle_diff(obs.pose.yaw, state.pose.yaw));
        }
        s.confidence_age = 0;
        return s;
    }

    void MpcConfig::validate() const
    {
        if (horizon < 1)
            throw Error("mpc horizon must be >= 1");
        if (control_period <= 0)
            throw Error("mpc control period must be > 0");
        if (w_pos < 0 || w_yaw < 0 || w_vel < 0 || w_input < 0 || w_input_rate < 0)
            throw Error("mpc weights must be >= 0");
        if (w_pos == 0 && w_yaw == 0 && w_vel == 0)
            throw Error("mpc needs at least one tracking weight > 0");
        if (iterations < 0 || input_delay_steps < 0 || model_substeps < 1)
            throw Error("mpc iteration budget, delay and substeps must be non-negative");
    }

    ActuatorCommand direct_control(const ActuatorCommand &cmd, const VehicleParams &params)
    {
        return apply_limits(cmd, params);
    }

    namespace
    {
        using State = Eigen::Matrix<double, 6, 1>; // x y yaw v prev_motor prev_steer
        using Input = Eigen::Vector2d;
        using MatA = Eigen::Matrix<double, 6, 6>;
        using MatB = Eigen::Matrix<double, 6, 2>;

        struct RefSample
        {
            double x, y, yaw, v, yaw_weight;
        };

        struct Problem
        {
            const MpcConfig &cfg;
            const VehicleParams &params;
            double dt;
            State z0;
            std::vector<RefSample> ref; // ref[k] applies to z_{k+1}
        };

        State model_step(const State &z, const Input &u, const Problem &p)
        {
            const int S = p.cfg.model_substeps;
            const double h = p.dt / S;
            const double curv = std::tan(u[1]) / p.params.wheelbase;
            double x = z[0], y = z[1], yaw = z[2], v = z[3];
            for (int i = 0; i < S; ++i)
            {
                const double nx = x + h * v * std::cos(yaw);
                const double ny = y + h * v * std::sin(yaw);
                const double nyaw = yaw + h * v * curv;
                const double nv = std::clamp(v + h * (p.cfg.motor.k_m * u[0] - p.cfg.motor.k_d * v),
                                             -p.params.max_speed, p.params.max_speed);
                x = nx, y = ny, yaw = nyaw, v = nv;
            }
            State out;
            out << x, y, yaw, v, u[0], u[1];
            return out;
        }

        void linearize(const State &z, const Input &u, const Problem &p, MatA &A, MatB &B)
        {
            const int S = p.cfg.model_substeps;
            const double h = p.dt / S;
            const double L = p.params.wheelbase;
            const double tan_d = std::tan(u[1]);
            const double cos_d = std::cos(u[1]);
            const double dcurv = 1.0 / (L * cos_d * cos_d);
            Eigen::Matrix4d Ac = Eigen::Matrix4d::Identity();
            Eigen::Matrix<double, 4, 2> Bc = Eigen::Matrix<double, 4, 2>::Zero();
            double yaw = z[2], v = z[3];
            for (int i = 0; i < S; ++i)
            {
                Eigen::Matrix4d As = Eigen::Matrix4d::Identity();
                As(0, 2) = -h * v * std::sin(yaw);
                As(0, 3) = h * std::cos(yaw);
                As(1, 2) = h * v * std::cos(yaw);
                As(1, 3) = h * std::sin(yaw);
                As(2, 3) = h * tan_d / L;
                As(3, 3) = 1 - h * p.cfg.motor.k_d;
                Eigen::Matrix<double, 4, 2> Bs = Eigen::Matrix<double, 4, 2>::Zero();
                Bs(2, 1) = h * v * dcurv;
                Bs(3, 0) = h * p.cfg.motor.k_m;
                Ac = As * Ac;
                Bc = As * Bc + Bs;
                const double nyaw = yaw + h * v * tan_d / L;
                const double nv = v + h * (p.cfg.motor.k_m * u[0] - p.cfg.motor.k_d * v);
                yaw = nyaw;
                v = nv;
            }
            A.setZero();
            B.setZero();
            A.topLeftCorner<4, 4>() = Ac;
            B.topRows<4>() = Bc;
            B(4, 0) = 1;
            B(5, 1) = 1;
        }

        double state_cost(const State &z, const RefSample &r, const MpcConfig &c)
        {
            const double ex = z[0] - r.x, ey = z[1] - r.y;
            const double eyaw = angle_diff(z[2], r.yaw);
            const double ev = z[3] - r.v;
            return c.w_pos * (ex * ex + ey * ey) + c.w_yaw * r.yaw_weight * eyaw * eyaw + c.w_vel * ev * ev;
        }

        double input_cost(const State &z, const Input &u, const MpcConfig &c)
        {
            const double dm = u[0] - z[4], ds = u[1] - z[5];
            return c.w_input * u.squaredNorm() + c.w_input_rate * (dm * dm + ds * ds);
        }

        double rollout(const Problem &p, const std::vector<Input> &us, std::vector<State> *zs = nullptr)
        {
            State z = p.z0;
            if (zs)
            {
                zs->clear();
                zs->push_back(z);
            }
            double cost = 0;
            for (std::size_t k = 0; k < us.size(); ++k)
            {
                cost += input_cost(z, us[k], p.cfg);
                z = model_step(z, us[k], p);
                cost += state_cost(z, p.ref[k], p.cfg);
                if (zs)
                    zs->push_back(z);
            }
            return cost;
        }

        void add_state_terms(const State &z, const RefSample &r, const MpcConfig &c, State &vx, MatA &vxx)
        {
            vx[0] += 2 * c.w_pos * (z[0] - r.x);
            vx[1] += 2 * c.w_pos * (z[1] - r.y);
            vx[2] += 2 * c.w_yaw * r.yaw_weight * angle_diff(z[2], r.yaw);
            vx[3] += 2 * c.w_vel * (z[3] - r.v);
            vxx(0, 0) += 2 * c.w_pos;
            vxx(1, 1) += 2 * c.w_pos;
            vxx(2, 2) += 2 * c.w_yaw * r.yaw_weight;
            vxx(3, 3) += 2 * c.w_vel;
        }

        Input clamp_input(const Input &u, const VehicleParams &params)
        {
            return {std::clamp(u[0], -1.0, 1.0), std::clamp(u[1], -params.max_steering, params.max_steering)};
        }

        Problem make_problem(const FusedState &state, const ActuatorCommand &previous, const Trajectory &traj,
                             Time now, const MpcConfig &cfg, const VehicleParams &params)
        {
            const Time end = mpc_horizon_end(now, cfg);
            if (!traj.covers(now, end))
                throw StarvedTrajectory(fmt::format("reference does not cover [{}, {}] ns", now, end));
            Problem p{cfg, params, to_seconds(cfg.control_period), State::Zero(), {}};
            State z;
            z << state.pose.x, state.pose.y, state.pose.yaw, state.speed, previous.motor_input,
                previous.steering_angle;
            const Input prev{previous.motor_input, previous.steering_angle};
            for (int i = 0; i < cfg.input_delay_steps; ++i)
                z = model_step(z, prev, p);
            p.z0 = z;
            for (int k = 1; k <= cfg.horizon; ++k)
            {
                const Time t = now + (cfg.input_delay_steps + k) * cfg.control_period;
                const auto r = traj.interpolate(t);
                const double v = std::hypot(r.vx, r.vy);
                RefSample s{r.x, r.y, 0.0, v, 0.0};
                if (v > 0.05)
                {
                    s.yaw = std::atan2(r.vy, r.vx);
                    s.yaw_weight = 1.0;
                }
                p.ref.push_back(s);
            }
            return p;
        }

        std::vector<Input> to_inputs(std::span<const ActuatorCommand> cmds)
        {
            std::vector<Input> out;
            out.reserve(cmds.size());
            for (const auto &c : cmds)
                out.emplace_back(c.motor_input, c.steering_angle);
            return out;
        }
    } // namespace

    Time mpc_horizon_end(Time now, const MpcConfig &cfg)
    {
        return now + (cfg.input_delay_steps + cfg.horizon) * cfg.control_period;
    }

    double mpc_cost(const FusedState &state, const ActuatorCommand &previous, std::span<const ActuatorCommand> inputs,
                    const Trajectory &traj, Time now, const MpcConfig &cfg, const VehicleParams &params)
    {
        const auto p = make_problem(state, previous, traj, now, cfg, params);
        if (inputs.size() != static_cast<std::size_t>(cfg.horizon))
            throw Error("mpc_cost: input sequence length must equal the horizon");
        return rollout(p, to_inputs(inputs));
    }

    MpcResult mpc_solve(const FusedState &state, const ActuatorCommand &previous, const Trajectory &traj, Time now,
                        const MpcConfig &cfg, const VehicleParams &params,
                        const std::vector<ActuatorCommand> *warm_start)
    {
        cfg.validate();
        const auto p = make_problem(state, previous, traj, now, cfg, params);
        const auto N = static_cast<std::size_t>(cfg.horizon);
        const Input prev = clamp_input({previous.motor_input, previous.steering_angle}, params);

        const std::vector<Input> hold(N, prev);
        const std::vector<Input> zero(N, Input::Zero());
        const double hold_cost = rollout(p, hold);
        const double zero_cost = rollout(p, zero);

        std::vector<Input> us = hold;
        double cost = hold_cost;
        if (warm_start && warm_start->size() == N)
        {
            std::vector<Input> w;
            for (const auto &c : *warm_start)
                w.push_back(clamp_input({c.motor_input, c.steering_angle}, params));
            const double wc = rollout(p, w);
            if (wc < cost)
            {
                us = std::move(w);
                cost = wc;
            }
        }

        std::vector<State> zs;
        std::vector<Eigen::Matrix<double, 2, 6>> K(N);
        std::vector<Input> d(N);
        int used = 0;
        for (int it = 0; it < cfg.iterations; ++it)
        {
            rollout(p, us, &zs);
            State vx = State::Zero();
            MatA vxx = MatA::Zero();
            add_state_terms(zs[N], p.ref[N - 1], cfg, vx, vxx);
            for (std::size_t kk = N; kk-- > 0;)
            {
                MatA A;
                MatB B;
                linearize(zs[kk], us[kk], p, A, B);
                const State &z = zs[kk];
                const Input &u = us[kk];
                // Input cost terms, including the coupling to the stored previous input.
                State lx = State::Zero();
                MatA lxx = MatA::Zero();
                const Input du{u[0] - z[4], u[1] - z[5]};
                lx[4] = -2 * cfg.w_input_rate * du[0];
                lx[5] = -2 * cfg.w_input_rate * du[1];
                lxx(4, 4) = lxx(5, 5) = 2 * cfg.w_input_rate;
                const Input lu = 2 * cfg.w_input * u + 2 * cfg.w_input_rate * du;
                const Eigen::Matrix2d luu = Eigen::Matrix2d::Identity() * (2 * (cfg.w_input + cfg.w_input_rate));
                Eigen::Matrix<double, 2, 6> lux = Eigen::Matrix<double, 2, 6>::Zero();
                lux(0, 4) = lux(1, 5) = -2 * cfg.w_input_rate;

                const State qx = lx + A.transpose() * vx;
                const Input qu = lu + B.transpose() * vx;
                const MatA qxx = lxx + A.transpose() * vxx * A;
                Eigen::Matrix2d quu = luu + B.transpose() * vxx * B;
                const Eigen::Matrix<double, 2, 6> qux = lux + B.transpose() * vxx * A;
                quu += Eigen::Matrix2d::Identity() * 1e-9;
                const Eigen::LDLT<Eigen::Matrix2d> ldlt(quu);
                K[kk] = -ldlt.solve(qux);
                d[kk] = -ldlt.solve(qu);

                vx = qx + K[kk].transpose() * quu * d[kk] + K[kk].transpose() * qu + qux.transpose() * d[kk];
                vxx = qxx + K[kk].transpose() * quu * K[kk] + K[kk].transpose() * qux + qux.transpose() * K[kk];
                vxx = 0.5 * (vxx + vxx.transpose()).eval();
                if (kk >= 1)
                    add_state_terms(zs[kk], p.ref[kk - 1], cfg, vx, vxx);
            }

            bool accepted = false;
            for (const double alpha : {1.0, 0.5, 0.25, 0.1, 0.03})
            {
                std::vector<Input> cand(N);
                State z = p.z0;
                for (std::size_t k = 0; k < N; ++k)
                {
                    cand[k] = clamp_input(us[k] + alpha * d[k] + K[k] * (z - zs[k]), params);
                    z = model_step(z, cand[k], p);
                }
                const double c = rollout(p, cand);
                if (c < cost)
                {
                    us = std::move(cand);
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            ++used;
            if (!accepted)
                break;
        }

        // Descent contract: never worse than the two trivial sequences.
        if (zero_cost < cost)
        {
            us = zero;
            cost = zero_cost;
        }
        if (hold_cost <= cost)
        {
            us = hold;
            cost = hold_cost;
        }

        MpcResult r;
        r.cost = cost;
        r.hold_cost = hold_cost;
        r.zero_cost = zero_cost;
        r.iterations_used = used;
        for (const auto &u : us)
            r.sequence.push_back({u[0], u[1]});
        r.command = r.sequence.front();
        return r;
    }

    ActuatorCommand mpc_follow(const FusedState &state, const ActuatorCommand &previous, const Trajectory &traj,
                               Time now, const MpcConfig &cfg, const VehicleParams &params)
    {
        return mpc_solve(state, previous, traj, now, cfg, params).command;
    }

    MidLevelController::MidLevelController(const Pose &initial_pose, double initial_speed, MlcConfig config)
        : config_(std::move(config))
    {
        config_.params.validate();
        config_.mpc.validate();
        fused_.vehicle_id = config_.params.vehicle_id;
        fused_.pose = initial_pose;
        fused_.speed = initial_speed;
        fused_.flags = kFlagNoTrajectory;
        command_ = apply_limits(config_.initial_command, config_.params);
    }

    std::vector<std::string> MidLevelController::subscriptions() const
    {
        const int id = vehicle_id();
        return {topics::sensors(id), topics::kIpsPoses, topics::trajectory(id), topics::direct(id)};
    }

    void MidLevelController::apply_observation(const PoseObservation &obs)
    {
        // The observation shows the pose at frame_time; move it forward by the
        // dead-reckoned motion since then.
        auto it = std::find_if(history_.begin(), history_.end(),
                               [&](const auto &h) { return h.first == obs.frame_time; });
        if (it == history_.end())
        {
            ++diag_.stale_observations;
            return;
        }
        const Pose &then = it->second;
        const Vec2 body = rotate(Vec2{fused_.pose.x - then.x, fused_.pose.y - then.y}, -then.yaw);
        const Vec2 moved = to_world(obs.pose, body);
        PoseObservation shifted = obs;
        shifted.pose = {moved.x, moved.y, normalize_yaw(obs.pose.yaw + angle_diff(fused_.pose.yaw, then.yaw))};
        const bool implausible =
            std::hypot(shifted.pose.x - fused_.pose.x, shifted.pose.y - fused_.pose.y) > config_.ips_gate ||
            std::abs(angle_diff(shifted.pose.yaw, fused_.pose.yaw)) > config_.ips_yaw_gate;
        if (implausible && rejected_streak_ < config_.ips_relock)
        {
            ++rejected_streak_;
            ++diag_.rejected_observations;
            return;
        }
        rejected_streak_ = 0;
        fused_ = fuse_ips(fused_, shifted, config_.ips_gain);
        ++diag_.ips_corrections;
    }

    std::vector<Outgoing> MidLevelController::step(const std::vector<let::Envelope> &inputs, Time now, Duration dt)
    {
        const int id = vehicle_id();
        const auto sensor_topic = topics::sensors(id);
        const auto traj_topic = topics::trajectory(id);
        const auto direct_topic = topics::direct(id);

        std::optional<SensorSample> sample;
        std::optional<PoseObservation> obs;
        std::optional<ActuatorCommand> direct;
        std::uint32_t flags = 0;

        for (const auto &e : inputs)
        {
            if (e.topic == sensor_topic)
                sample = decode_sensor_sample(e.payload);
            else if (e.topic == topics::kIpsPoses)
            {
                for (const auto &o : decode_observations(e.payload))
                    if (o.vehicle_id == id && (!obs || o.frame_time > obs->frame_time))
                        obs = o;
            }
            else if (e.topic == traj_topic)
            {
                if (config_.mode != ControlMode::Trajectory)
                {
                    ++diag_.mode_mismatches;
                    flags |= kFlagModeMismatch;
                    continue;
                }
                try
                {
                    const auto msg = decode_trajectory_message(e.payload);
                    trajectory_ = trajectory_.merged_with(msg.nodes, config_.params);
                    fused_.trajectory_id = e.sequence;
                }
                catch (const Error &)
                {
                    ++diag_.rejected_trajectories;
                    flags |= kFlagRejectedNodes;
                }
            }
            else if (e.topic == direct_topic)
            {
                if (config_.mode != ControlMode::Direct)
                {
                    ++diag_.mode_mismatches;
                    flags |= kFlagModeMismatch;
                    continue;
                }
                direct = decode_command(e.payload);
            }
        }

        // Prediction up to `now`.
        if (sample && sample->sample_time > fused_time_)
        {
            fused_ = dead_reckon(fused_, *sample, to_seconds(sample->sample_time - fused_time_));
            fused_time_ = sample->sample_time;
            last_yaw_rate_ = sample->imu_yaw_rate;
        }
        if (fused_time_ < now)
        {
            SensorSample predicted{fused_.speed, 0.0, last_yaw_rate_, now};
            fused_ = dead_reckon(fused_, predicted, to_seconds(now - fused_time_));
            fused_time_ = now;
        }
        history_.emplace_back(now, fused_.pose);
        while (history_.size() > config_.pose_history)
            history_.pop_front();
        if (obs)
        {
            apply_observation(*obs);
            history_.back().second = fused_.pose;
        }

        fused_.has_reference = false;
        if (config_.mode == ControlMode::Direct)
        {
            if (direct)
                command_ = direct_control(*direct, config_.params);
        }
        else
        {
            if (!trajectory_.empty())
                trajectory_ = trajectory_.prune_before(now - config_.keep_past);
            if (trajectory_.size() < 2)
                flags |= kFlagNoTrajectory;
            if (trajectory_.covers(now, now))
            {
                const auto r = trajectory_.interpolate(now);
                fused_.has_reference = true;
                fused_.ref_x = r.x;
                fused_.ref_y = r.y;
            }
            MpcConfig mpc = config_.mpc;
            mpc.control_period = dt;
            try
            {
                const auto res = mpc_solve(fused_, command_, trajectory_, now, mpc, config_.params, &warm_);
                if (res.cost > res.hold_cost || res.cost > res.zero_cost)
                    ++diag_.descent_violations;
                command_ = apply_limits(res.command, config_.params);
                warm_.assign(res.sequence.begin() + 1, res.sequence.end());
                warm_.push_back(res.sequence.back());
            }
            catch (const StarvedTrajectory &)
            {
                ++diag_.starved_steps;
                flags |= kFlagStarved;
                warm_.clear();
            }
        }

        fused_.flags = flags;
        fused_.mode_mismatches = diag_.mode_mismatches;
        std::vector<Outgoing> out;
        out.push_back({topics::command(id), encode(command_)});
        out.push_back({topics::fused(id), encode(fused_)});
        return out;
    }
} // namespace cpmsim
