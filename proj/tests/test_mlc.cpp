#include <doctest.h>

#include "cpmsim/mlc.hpp"

#include <cmath>

using namespace cpmsim;

namespace
{
    let::Envelope env(std::string topic, Bytes payload, std::uint64_t seq = 0)
    {
        let::Envelope e;
        e.topic = std::move(topic);
        e.payload = std::move(payload);
        e.sequence = seq;
        return e;
    }

    std::vector<TrajectoryNode> straight(double y0, double speed, double seconds_long)
    {
        std::vector<TrajectoryNode> out;
        for (int i = 0; i * 0.1 <= seconds_long + 1e-9; ++i)
            out.push_back({milliseconds(100) * i, speed * 0.1 * i, y0, speed, 0});
        return out;
    }

    // Two-stage pipeline with the same one-period hand-over the bus applies.
    struct Loop
    {
        LowLevelController llc;
        MidLevelController mlc;
        std::vector<let::Envelope> to_mlc, to_llc;
        std::vector<VehicleState> truth; // state at the start of each step
        std::vector<FusedState> fused;

        Loop(VehicleState init, const LlcConfig &lc, const MlcConfig &mc)
            : llc(init, lc, 1), mlc(init.pose, init.speed, mc)
        {
        }

        void run(int steps, const std::vector<TrajectoryNode> &nodes)
        {
            const Duration dt = milliseconds(20);
            for (int k = 0; k < steps; ++k)
            {
                const Time now = k * dt;
                auto in_mlc = to_mlc;
                if (k == 0)
                    in_mlc.push_back(env(topics::trajectory(1), encode(TrajectoryMessage{1, nodes})));
                truth.push_back(llc.state());
                const auto mo = mlc.step(in_mlc, now, dt);
                const auto lo = llc.step(to_llc, now, dt);
                fused.push_back(mlc.fused());
                to_mlc.clear();
                to_llc.clear();
                for (const auto &o : lo)
                    to_mlc.push_back(env(o.topic, o.payload));
                for (const auto &o : mo)
                    to_llc.push_back(env(o.topic, o.payload));
            }
        }
    };

    MlcConfig rolling_mlc(double speed)
    {
        MlcConfig mc;
        mc.initial_command.motor_input = MotorModel{}.steady_state_input(speed);
        return mc;
    }

    LlcConfig rolling_llc(double speed)
    {
        LlcConfig lc;
        lc.noise = NoiseConfig::noiseless();
        lc.initial_command.motor_input = MotorModel{}.steady_state_input(speed);
        return lc;
    }
} // namespace

TEST_CASE("dead_reckon")
{
    FusedState s;
    s.vehicle_id = 1;
    const auto same = dead_reckon(s, {}, 0.02);
    CHECK(same.pose == s.pose);
    CHECK(same.confidence_age == 1);

    const auto moved = dead_reckon(s, {1.0, 0.0, 0.0, 0}, 0.02);
    CHECK(moved.pose.x == doctest::Approx(0.02));
    CHECK(moved.pose.y == 0.0);

    // Constant turn: the centroid-to-point distance should be v / w.
    const double v = 1.0, w = 2.0;
    FusedState c;
    double sx = 0, sy = 0;
    std::vector<Pose> pts;
    const int n = 315; // one full turn at dt = 0.01 s
    for (int i = 0; i < n; ++i)
    {
        c = dead_reckon(c, {v, 0, w, 0}, 0.01);
        pts.push_back(c.pose);
        sx += c.pose.x;
        sy += c.pose.y;
    }
    const double cx = sx / n, cy = sy / n;
    for (const auto &p : pts)
        CHECK(std::hypot(p.x - cx, p.y - cy) == doctest::Approx(v / w).epsilon(0.01));
}

TEST_CASE("fuse_ips")
{
    FusedState s;
    s.vehicle_id = 2;
    s.pose = {1.0, 0.0, 0.0};
    s.confidence_age = 7;
    PoseObservation o{2, {1.1, 0.2, 0.4}, 0, 0};
    const auto full = fuse_ips(s, o, 1.0);
    CHECK(full.pose == o.pose);
    CHECK(full.confidence_age == 0);
    CHECK(fuse_ips(full, o, 1.0) == full);

    const auto half = fuse_ips(s, o, 0.5);
    CHECK(half.pose.x == doctest::Approx(1.05));

    s.pose.yaw = kPi * 179 / 180;
    o.pose.yaw = -kPi * 179 / 180;
    const auto wrapped = fuse_ips(s, o, 0.5);
    CHECK(std::abs(wrapped.pose.yaw) == doctest::Approx(kPi));

    o.vehicle_id = 3;
    CHECK_THROWS_AS(fuse_ips(s, o, 0.5), Error);
}

TEST_CASE("direct_control")
{
    VehicleParams p;
    CHECK(direct_control({0.5, 0.1}, p) == ActuatorCommand{0.5, 0.1});
    CHECK(direct_control({1.5, 0.1}, p) == ActuatorCommand{1.0, 0.1});
}

TEST_CASE("mpc at rest on a constant reference returns zero")
{
    VehicleParams p;
    MpcConfig cfg;
    FusedState s;
    s.vehicle_id = 1;
    s.pose = {0.5, 0.5, 0.0};
    Trajectory tr({{0, 0.5, 0.5, 0, 0}, {seconds(2), 0.5, 0.5, 0, 0}});
    const auto r = mpc_solve(s, {}, tr, 0, cfg, p);
    CHECK(std::hypot(r.command.motor_input, r.command.steering_angle) < 1e-6);
}

TEST_CASE("mpc descent contract and limits")
{
    VehicleParams p;
    MpcConfig cfg;
    RngStream rng(77, 0, "mpc");
    Trajectory tr(straight(0.0, 1.0, 5.0));
    for (int i = 0; i < 300; ++i)
    {
        FusedState s;
        s.vehicle_id = 1;
        s.pose = {rng.uniform() * 2, rng.uniform() * 0.4 - 0.2, rng.uniform() * 1.2 - 0.6};
        s.speed = rng.uniform() * 2;
        const ActuatorCommand prev{rng.uniform() * 2 - 1, rng.uniform() * 0.8 - 0.4};
        const Time now = milliseconds(20) * static_cast<Time>(rng.below(100));
        const auto r = mpc_solve(s, prev, tr, now, cfg, p);
        CHECK(r.cost <= r.hold_cost);
        CHECK(r.cost <= r.zero_cost);
        CHECK(std::abs(r.command.motor_input) <= 1.0);
        CHECK(std::abs(r.command.steering_angle) <= p.max_steering);
        CHECK(mpc_cost(s, prev, r.sequence, tr, now, cfg, p) == doctest::Approx(r.cost).epsilon(1e-12));
        const auto again = mpc_solve(s, prev, tr, now, cfg, p);
        CHECK(again.command == r.command);
    }
}

TEST_CASE("mpc reports a starved reference")
{
    VehicleParams p;
    Trajectory tr({{0, 0, 0, 1, 0}, {milliseconds(100), 0.1, 0, 1, 0}});
    CHECK_THROWS_AS(mpc_solve({}, {}, tr, 0, MpcConfig{}, p), StarvedTrajectory);
}

TEST_CASE("closed loop: straight line from a matched state")
{
    VehicleState init;
    init.speed = 1.0;
    Loop loop(init, rolling_llc(1.0), rolling_mlc(1.0));
    loop.run(500, straight(0.0, 1.0, 12.0));
    double worst = 0, sq = 0;
    for (std::size_t k = 0; k < loop.truth.size(); ++k)
    {
        worst = std::max(worst, std::abs(loop.truth[k].pose.y));
        sq += loop.truth[k].pose.y * loop.truth[k].pose.y;
    }
    CHECK(worst < 0.03);
    CHECK(std::sqrt(sq / loop.truth.size()) < 0.03);
    CHECK(loop.mlc.diagnostics().descent_violations == 0);
    CHECK(std::abs(loop.truth.back().pose.x - 0.02 * 499) < 0.05);
}

TEST_CASE("closed loop: lateral step settles")
{
    VehicleState init;
    init.speed = 1.0;
    Loop loop(init, rolling_llc(1.0), rolling_mlc(1.0));
    loop.run(400, straight(0.1, 1.0, 10.0));
    std::vector<double> err;
    for (const auto &s : loop.truth)
        err.push_back(std::abs(s.pose.y - 0.1));
    // Monotone decrease of the 100 ms envelope after the first second.
    double prev_peak = 1e9;
    for (std::size_t w = 50; w + 5 <= err.size(); w += 5)
    {
        const double peak = *std::max_element(err.begin() + static_cast<long>(w), err.begin() + static_cast<long>(w + 5));
        CHECK(peak <= prev_peak + 1e-4);
        prev_peak = peak;
    }
    CHECK(err.back() < 0.01);
    CHECK(*std::max_element(err.begin() + 200, err.end()) < 0.01);
}

TEST_CASE("no trajectory: vehicle holds rest and flags it")
{
    LlcConfig lc;
    lc.noise = NoiseConfig::noiseless();
    Loop loop({}, lc, MlcConfig{});
    loop.run(50, {});
    CHECK(loop.truth.back().speed == 0.0);
    CHECK((loop.fused.back().flags & kFlagNoTrajectory) != 0);
    CHECK((loop.fused.back().flags & kFlagStarved) != 0);
}

TEST_CASE("confidence age counts missing IPS frames")
{
    MlcConfig mc;
    MidLevelController mlc({}, 0.0, mc);
    for (int k = 0; k <= 100; ++k)
        mlc.step({}, k * milliseconds(20), milliseconds(20));
    CHECK(mlc.fused().confidence_age == 100);
    let::Envelope e;
    e.topic = topics::kIpsPoses;
    e.payload = encode(std::vector<PoseObservation>{{1, {0, 0, 0}, 99, 99 * milliseconds(20)}});
    mlc.step({e}, 101 * milliseconds(20), milliseconds(20));
    CHECK(mlc.fused().confidence_age == 0);
}

TEST_CASE("mode gating counts mismatches")
{
    MlcConfig mc;
    mc.mode = ControlMode::Direct;
    MidLevelController mlc({}, 0.0, mc);
    let::Envelope t;
    t.topic = topics::trajectory(1);
    t.payload = encode(TrajectoryMessage{1, straight(0, 1, 2)});
    let::Envelope d;
    d.topic = topics::direct(1);
    d.payload = encode(ActuatorCommand{1.5, 0.1});
    const auto out = mlc.step({t, d}, 0, milliseconds(20));
    CHECK(mlc.diagnostics().mode_mismatches == 1);
    CHECK(decode_command(out[0].payload) == ActuatorCommand{1.0, 0.1});
}

TEST_CASE("implausible IPS poses are rejected until relock")
{
    MlcConfig mc;
    mc.ips_relock = 5;
    MidLevelController mlc({}, 0.0, mc);
    const Duration dt = milliseconds(20);
    auto observe = [&](std::int64_t k, Pose p) {
        let::Envelope e;
        e.topic = topics::kIpsPoses;
        e.payload = encode(std::vector<PoseObservation>{{1, p, k - 1, (k - 1) * dt}});
        mlc.step({e}, k * dt, dt);
    };
    for (std::int64_t k = 0; k < 10; ++k)
        mlc.step({}, k * dt, dt);

    // Within the gate: accepted.
    observe(10, {0.02, 0.0, 0.0});
    CHECK(mlc.diagnostics().rejected_observations == 0);
    CHECK(mlc.fused().pose.x > 0.0);
    const double x = mlc.fused().pose.x;

    // A jump of half a metre or a flipped heading is ignored.
    observe(11, {0.5, 0.0, 0.0});
    observe(12, {0.0, 0.0, 1.0});
    CHECK(mlc.diagnostics().rejected_observations == 2);
    CHECK(mlc.fused().pose.x == doctest::Approx(x));

    // A persistent jump is taken after `ips_relock` rejections in a row.
    for (std::int64_t k = 13; k < 16; ++k)
        observe(k, {0.5, 0.0, 0.0});
    CHECK(mlc.diagnostics().rejected_observations == 5);
    observe(16, {0.5, 0.0, 0.0});
    CHECK(mlc.diagnostics().rejected_observations == 5);
    CHECK(mlc.fused().pose.x > x + 0.05);
}
