#pragma once

#include "cpmsim/types.hpp"

#include <array>
#include <cmath>

namespace cpmsim
{
    struct Vec2
    {
        double x = 0.0;
        double y = 0.0;

        constexpr Vec2 operator+(Vec2 o) const noexcept { return {x + o.x, y + o.y}; }
        constexpr Vec2 operator-(Vec2 o) const noexcept { return {x - o.x, y - o.y}; }
        constexpr Vec2 operator*(double s) const noexcept { return {x * s, y * s}; }
        constexpr double dot(Vec2 o) const noexcept { return x * o.x + y * o.y; }
        constexpr double cross(Vec2 o) const noexcept { return x * o.y - y * o.x; }
        double norm() const noexcept { return std::hypot(x, y); }
        friend bool operator==(const Vec2 &, const Vec2 &) = default;
    };

    inline Vec2 rotate(Vec2 v, double yaw) noexcept
    {
        const double c = std::cos(yaw), s = std::sin(yaw);
        return {c * v.x - s * v.y, s * v.x + c * v.y};
    }

    /// Body-frame point expressed in world coordinates.
    inline Vec2 to_world(const Pose &p, Vec2 body) noexcept { return Vec2{p.x, p.y} + rotate(body, p.yaw); }

    struct OrientedRect
    {
        Vec2 center;
        double yaw = 0.0;
        double half_length = 0.0;
        double half_width = 0.0;

        std::array<Vec2, 4> corners() const noexcept;
        double circumradius() const noexcept { return std::hypot(half_length, half_width); }
    };

    /// Separating-axis test. Touching boundaries count as overlap.
    bool overlaps(const OrientedRect &a, const OrientedRect &b) noexcept;

    /// Euclidean distance between the two rectangles; 0 when they overlap.
    double distance(const OrientedRect &a, const OrientedRect &b) noexcept;

    /// Vehicle footprint: length x width centered on the pose, grown by `inflation` on every side.
    OrientedRect footprint(const Pose &pose, const VehicleParams &params, double inflation = 0.0) noexcept;
} // namespace cpmsim
