#include <doctest.h>

#include "cpmsim/plant.hpp"

#include <Eigen/Dense>

#include <cmath>

using namespace cpmsim;

TEST_CASE("zero command at rest is a fixed point")
{
    VehicleParams p;
    VehicleState s;
    s.pose = {1, 2, 0.5};
    const auto n = step_dynamics(s, {}, 0.001, p);
    CHECK(n == s);
}

TEST_CASE("constant steering traces the bicycle circle")
{
    VehicleParams p;
    const double delta = 0.3;
    MotorModel m;
    VehicleState s;
    s.speed = 1.0;
    const ActuatorCommand cmd{m.steady_state_input(1.0), delta};
    std::vector<Eigen::Vector2d> pts;
    for (int i = 0; i < 10000; ++i)
    {
        s = step_dynamics(s, cmd, 0.0005, p);
        pts.emplace_back(s.pose.x, s.pose.y);
    }
    // Algebraic least-squares circle fit: x^2 + y^2 + D x + E y + F = 0.
    Eigen::MatrixXd A(pts.size(), 3);
    Eigen::VectorXd b(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
    {
        A(i, 0) = pts[i].x();
        A(i, 1) = pts[i].y();
        A(i, 2) = 1;
        b(i) = -pts[i].squaredNorm();
    }
    const Eigen::Vector3d c = A.colPivHouseholderQr().solve(b);
    const double r = std::sqrt(c[0] * c[0] / 4 + c[1] * c[1] / 4 - c[2]);
    CHECK(r == doctest::Approx(p.wheelbase / std::tan(delta)).epsilon(1e-3));
}

TEST_CASE("full throttle saturates at the top speed")
{
    VehicleParams p;
    VehicleState s;
    for (int i = 0; i < 20000; ++i)
        s = step_dynamics(s, {1.0, 0.0}, 0.001, p);
    CHECK(s.speed == doctest::Approx(3.7).epsilon(1e-6));
    CHECK(s.speed <= p.max_speed);
}

TEST_CASE("first-order convergence in dt")
{
    VehicleParams p;
    VehicleState s0;
    s0.speed = 0.5;
    const ActuatorCommand cmd{0.6, 0.25};
    auto run = [&](int n) {
        VehicleState s = s0;
        for (int i = 0; i < n; ++i)
            s = step_dynamics(s, cmd, 1.0 / n, p);
        return s;
    };
    const auto a = run(1000), b = run(2000), c = run(4000), ref = run(256000);
    const double e1 = std::hypot(a.pose.x - ref.pose.x, a.pose.y - ref.pose.y);
    const double e2 = std::hypot(b.pose.x - ref.pose.x, b.pose.y - ref.pose.y);
    const double e3 = std::hypot(c.pose.x - ref.pose.x, c.pose.y - ref.pose.y);
    CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.1));
    CHECK(e2 / e3 == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("coasting never speeds up")
{
    VehicleParams p;
    VehicleState s;
    s.speed = -2.0;
    double prev = std::abs(s.speed);
    for (int i = 0; i < 3000; ++i)
    {
        s = step_dynamics(s, {0.0, 0.2}, 0.001, p);
        CHECK(std::abs(s.speed) <= prev);
        prev = std::abs(s.speed);
    }
}

TEST_CASE("displacement rotates with the initial pose")
{
    VehicleParams p;
    const ActuatorCommand cmd{0.5, -0.2};
    VehicleState a, b;
    a.speed = b.speed = 0.8;
    const double th = 1.1;
    b.pose.yaw = th;
    for (int i = 0; i < 500; ++i)
    {
        a = step_dynamics(a, cmd, 0.001, p);
        b = step_dynamics(b, cmd, 0.001, p);
    }
    CHECK(b.pose.x == doctest::Approx(a.pose.x * std::cos(th) - a.pose.y * std::sin(th)).epsilon(1e-9));
    CHECK(b.pose.y == doctest::Approx(a.pose.x * std::sin(th) + a.pose.y * std::cos(th)).epsilon(1e-9));
}

TEST_CASE("apply_limits")
{
    VehicleParams p;
    CHECK(apply_limits({0.3, 0.1}, p) == ActuatorCommand{0.3, 0.1});
    CHECK(apply_limits({2.0, 0.0}, p).motor_input == 1.0);
    CHECK(apply_limits({0.0, 1.0}, p).steering_angle == 0.44);
    CHECK(apply_limits({0.0, -1.0}, p).steering_angle == -0.44);
    CHECK_THROWS_AS(apply_limits({NAN, 0.0}, p), Error);
}

TEST_CASE("sensor synthesis")
{
    VehicleState s;
    s.speed = 1.2345;
    s.yaw_rate = 0.3;
    RngStream rng(1, 1, "sensors");
    const auto clean = sample_sensors(s, 1.2, 0.02, 0, NoiseConfig::noiseless(), rng);
    CHECK(clean.odometer_speed == doctest::Approx(1.2345).epsilon(1e-6));
    CHECK(clean.imu_yaw_rate == 0.3);
    CHECK(clean.imu_accel == doctest::Approx(0.0345 / 0.02));

    VehicleState rest;
    NoiseConfig n;
    n.odometer_sigma = 0.0;
    n.imu_yaw_rate_sigma = 0.0;
    CHECK(sample_sensors(rest, 0, 0.02, 0, n, rng).odometer_speed == 0.0);

    NoiseConfig noisy;
    noisy.odometer_sigma = 0.05;
    noisy.odometer_tick = 1e-4;
    RngStream r2(9, 1, "sensors");
    double sum = 0, sq = 0;
    const int N = 100000;
    for (int i = 0; i < N; ++i)
    {
        const double v = sample_sensors(rest, 0, 0.02, 0, noisy, r2).odometer_speed;
        sum += v;
        sq += v * v;
    }
    const double mean = sum / N;
    const double sd = std::sqrt(sq / N - mean * mean);
    CHECK(sd == doctest::Approx(0.05).epsilon(0.05));

    RngStream x(3, 2, "sensors"), y(3, 2, "sensors");
    for (int i = 0; i < 100; ++i)
        CHECK(sample_sensors(s, 1, 0.02, i, noisy, x) == sample_sensors(s, 1, 0.02, i, noisy, y));
}

TEST_CASE("llc holds zero without commands and follows a forward stream")
{
    LlcConfig cfg;
    cfg.noise = NoiseConfig::noiseless();
    LowLevelController idle({}, cfg, 1);
    for (int k = 0; k < 50; ++k)
        idle.step({}, k * milliseconds(20), milliseconds(20));
    CHECK(idle.state().speed == 0.0);
    CHECK(idle.state().pose == Pose{});

    LowLevelController llc({}, cfg, 1);
    let::Envelope e;
    e.topic = topics::command(1);
    e.payload = encode(ActuatorCommand{0.5, 0.0});
    double prev = 0;
    for (int k = 0; k < 300; ++k)
    {
        const auto out = llc.step({e}, k * milliseconds(20), milliseconds(20));
        REQUIRE(out.size() == 2);
        CHECK(llc.state().speed >= prev);
        prev = llc.state().speed;
    }
    CHECK(prev == doctest::Approx(0.5 * 3.7).epsilon(1e-3));
}
