#include <doctest.h>

#include "cpmsim/geometry.hpp"
#include "cpmsim/rng.hpp"

using namespace cpmsim;

namespace
{
    // Oracle: dense point sampling of a's area tested against b's half-planes.
    bool brute_overlap(const OrientedRect &a, const OrientedRect &b)
    {
        auto inside = [](const OrientedRect &r, Vec2 p) {
            const Vec2 d = rotate(p - r.center, -r.yaw);
            return std::abs(d.x) <= r.half_length + 1e-12 && std::abs(d.y) <= r.half_width + 1e-12;
        };
        const int n = 40;
        for (int i = 0; i <= n; ++i)
            for (int j = 0; j <= n; ++j)
            {
                const Vec2 local{a.half_length * (2.0 * i / n - 1), a.half_width * (2.0 * j / n - 1)};
                if (inside(b, a.center + rotate(local, a.yaw)))
                    return true;
                const Vec2 lb{b.half_length * (2.0 * i / n - 1), b.half_width * (2.0 * j / n - 1)};
                if (inside(a, b.center + rotate(lb, b.yaw)))
                    return true;
            }
        return false;
    }
} // namespace

TEST_CASE("rectangles")
{
    const OrientedRect a{{0, 0}, 0, 0.11, 0.0535};
    CHECK(overlaps(a, a));
    CHECK_FALSE(overlaps(a, OrientedRect{{0, 0.5}, 0, 0.11, 0.0535}));
    CHECK(distance(a, OrientedRect{{0, 0.5}, 0, 0.11, 0.0535}) == doctest::Approx(0.5 - 0.107));
    CHECK(overlaps(a, OrientedRect{{0.22, 0}, 0, 0.11, 0.0535})); // touching
    CHECK(distance(a, OrientedRect{{0.3, 0}, 0, 0.11, 0.0535}) == doctest::Approx(0.08));
}

TEST_CASE("separating-axis test agrees with sampling away from the boundary")
{
    RngStream rng(5, 0, "sat");
    int checked = 0;
    for (int i = 0; i < 3000; ++i)
    {
        const OrientedRect a{{0, 0}, rng.uniform() * 6, 0.11, 0.0535};
        const OrientedRect b{{rng.uniform() * 0.6 - 0.3, rng.uniform() * 0.6 - 0.3}, rng.uniform() * 6, 0.11, 0.0535};
        const double d = distance(a, b);
        // Sampling resolution is ~5 mm; skip near-touching pairs.
        if (d > 0 && d < 0.006)
            continue;
        const bool o = overlaps(a, b);
        if (o)
        {
            // Penetration may be thinner than the sample grid; shrink the check.
            const OrientedRect grown{b.center, b.yaw, b.half_length + 0.006, b.half_width + 0.006};
            CHECK(brute_overlap(a, grown));
        }
        else
            CHECK_FALSE(brute_overlap(a, b));
        ++checked;
    }
    CHECK(checked > 2000);
}

TEST_CASE("footprint inflation")
{
    VehicleParams p;
    const auto f = footprint({1, 2, 0.3}, p, 0.02);
    CHECK(f.half_length == doctest::Approx(0.13));
    CHECK(f.half_width == doctest::Approx(0.0735));
    CHECK(f.yaw == 0.3);
}
