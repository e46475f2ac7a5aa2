#include "cpmsim/geometry.hpp"

#include <algorithm>
#include <limits>

namespace cpmsim
{
    std::array<Vec2, 4> OrientedRect::corners() const noexcept
    {
        const Vec2 ax = rotate({half_length, 0.0}, yaw);
        const Vec2 ay = rotate({0.0, half_width}, yaw);
        return {center + ax + ay, center - ax + ay, center - ax - ay, center + ax - ay};
    }

    namespace
    {
        void project(const std::array<Vec2, 4> &pts, Vec2 axis, double &lo, double &hi) noexcept
        {
            lo = hi = pts[0].dot(axis);
            for (std::size_t i = 1; i < 4; ++i)
            {
                const double p = pts[i].dot(axis);
                lo = std::min(lo, p);
                hi = std::max(hi, p);
            }
        }

        double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) noexcept
        {
            const Vec2 ab = b - a;
            const double len2 = ab.dot(ab);
            double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            return (p - (a + ab * t)).norm();
        }
    } // namespace

    bool overlaps(const OrientedRect &a, const OrientedRect &b) noexcept
    {
        const Vec2 d = b.center - a.center;
        const double reach = a.circumradius() + b.circumradius();
        if (d.dot(d) > reach * reach)
            return false;

        const auto ca = a.corners();
        const auto cb = b.corners();
        const std::array<Vec2, 4> axes{rotate({1, 0}, a.yaw), rotate({0, 1}, a.yaw), rotate({1, 0}, b.yaw),
                                       rotate({0, 1}, b.yaw)};
        for (const auto &axis : axes)
        {
            double alo, ahi, blo, bhi;
            project(ca, axis, alo, ahi);
            project(cb, axis, blo, bhi);
            if (ahi < blo || bhi < alo)
                return false;
        }
        return true;
    }

    double distance(const OrientedRect &a, const OrientedRect &b) noexcept
    {
        if (overlaps(a, b))
            return 0.0;
        const auto ca = a.corners();
        const auto cb = b.corners();
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < 4; ++i)
        {
            for (std::size_t j = 0; j < 4; ++j)
            {
                best = std::min(best, point_segment_distance(ca[i], cb[j], cb[(j + 1) % 4]));
                best = std::min(best, point_segment_distance(cb[i], ca[j], ca[(j + 1) % 4]));
            }
        }
        return best;
    }

    OrientedRect footprint(const Pose &pose, const VehicleParams &params, double inflation) noexcept
    {
        return OrientedRect{{pose.x, pose.y}, pose.yaw, params.length / 2 + inflation, params.width / 2 + inflation};
    }
} // namespace cpmsim
