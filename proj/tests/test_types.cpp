#include <doctest.h>

#include "cpmsim/rng.hpp"
#include "cpmsim/types.hpp"

#include <cmath>

using namespace cpmsim;

TEST_CASE("validate_node")
{
    VehicleParams p;
    CHECK(validate_node({0, 0, 0, 0, 0}, p).ok());

    const auto fast = validate_node({0, 0, 0, 3.0, 2.5}, p);
    CHECK(fast.violation == NodeViolation::SpeedLimit);
    // 3.0^2 + 2.5^2 = 15.25
    CHECK(fast.value == doctest::Approx(3.905124837953327).epsilon(1e-12));

    CHECK(validate_node({-1, 0, 0, 0, 0}, p).violation == NodeViolation::NegativeTime);
    CHECK(validate_node({0, NAN, 0, 0, 0}, p).violation == NodeViolation::NonFinite);
    CHECK(validate_node({-1, INFINITY, 0, 0, 0}, p).violation == NodeViolation::NonFinite);
}

TEST_CASE("validate_node is rotation invariant")
{
    VehicleParams p;
    RngStream rng(7, 0, "rot");
    for (int i = 0; i < 2000; ++i)
    {
        const double vx = rng.uniform() * 5 - 2.5, vy = rng.uniform() * 5 - 2.5;
        const double th = rng.uniform() * 2 * kPi;
        const TrajectoryNode n{0, 1.0, 2.0, vx, vy};
        const TrajectoryNode r{0, 1.0 * std::cos(th) - 2.0 * std::sin(th), 1.0 * std::sin(th) + 2.0 * std::cos(th),
                               vx * std::cos(th) - vy * std::sin(th), vx * std::sin(th) + vy * std::cos(th)};
        // Skip nodes sitting on the limit where rotation round-off can flip the verdict.
        if (std::abs(n.speed() - p.max_speed) < 1e-9)
            continue;
        CHECK(validate_node(n, p).ok() == validate_node(r, p).ok());
    }
}

TEST_CASE("normalize_yaw")
{
    CHECK(normalize_yaw(0.0) == 0.0);
    CHECK(normalize_yaw(3 * kPi) == doctest::Approx(kPi));
    CHECK(normalize_yaw(-kPi) == kPi);
    CHECK(normalize_yaw(kPi) == kPi);
    CHECK_THROWS_AS(normalize_yaw(NAN), Error);
    CHECK_THROWS_AS(normalize_yaw(INFINITY), Error);

    RngStream rng(1, 0, "yaw");
    for (int i = 0; i < 10000; ++i)
    {
        const double a = (rng.uniform() - 0.5) * 200.0;
        const double n = normalize_yaw(a);
        CHECK(n > -kPi);
        CHECK(n <= kPi);
        CHECK(normalize_yaw(n) == n);
        CHECK(std::abs(std::remainder(a - n, 2 * kPi)) < 1e-9);
    }
}

TEST_CASE("angle_diff takes the short way round")
{
    const double d = angle_diff(kPi * 179 / 180, -kPi * 179 / 180);
    CHECK(d == doctest::Approx(-kPi * 2 / 180));
}

TEST_CASE("params validation")
{
    VehicleParams p;
    CHECK_NOTHROW(p.validate());
    CHECK(p.max_curvature() == doctest::Approx(std::tan(0.44) / 0.15));
    p.wheelbase = 0.3;
    CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("rng streams are keyed")
{
    RngStream a(42, 1, "x"), b(42, 1, "x"), c(42, 2, "x"), d(42, 1, "y");
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
    CHECK(va != d.next_u64());
}
