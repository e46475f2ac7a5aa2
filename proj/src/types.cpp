#include "cpmsim/types.hpp"

#include <fmt/format.h>

namespace cpmsim
{
    void VehicleParams::validate() const
    {
        if (!(length > 0 && width > 0 && height > 0 && max_speed > 0 && wheelbase > 0 && max_steering > 0))
            throw Error("vehicle params: all dimensions and limits must be positive");
        if (!(wheelbase < length))
            throw Error(fmt::format("vehicle params: wheelbase {} must be shorter than length {}", wheelbase, length));
        if (!(max_steering < kPi / 2))
            throw Error("vehicle params: max_steering must be below pi/2");
        if (vehicle_id <= 0)
            throw Error(fmt::format("vehicle params: vehicle_id {} must be positive", vehicle_id));
    }

    NodeValidation validate_node(const TrajectoryNode &node, const VehicleParams &params)
    {
        if (!std::isfinite(node.x) || !std::isfinite(node.y) || !std::isfinite(node.vx) || !std::isfinite(node.vy))
            return {NodeViolation::NonFinite, 0.0, "non-finite field"};
        if (node.t < 0)
            return {NodeViolation::NegativeTime, static_cast<double>(node.t),
                    fmt::format("negative time {} ns", node.t)};
        const double speed = node.speed();
        if (speed > params.max_speed)
            return {NodeViolation::SpeedLimit, speed,
                    fmt::format("speed {:.3f} m/s exceeds limit {:.3f} m/s", speed, params.max_speed)};
        return {};
    }

    double normalize_yaw(double angle)
    {
        if (!std::isfinite(angle))
            throw Error("normalize_yaw: non-finite angle");
        double r = std::remainder(angle, 2.0 * kPi);
        if (r <= -kPi)
            r += 2.0 * kPi;
        return r;
    }

    double angle_diff(double a, double b) { return normalize_yaw(a - b); }

    const char *to_string(NodeViolation v) noexcept
    {
        switch (v)
        {
        case NodeViolation::None:
            return "none";
        case NodeViolation::NonFinite:
            return "non_finite";
        case NodeViolation::NegativeTime:
            return "negative_time";
        case NodeViolation::SpeedLimit:
            return "speed_limit";
        }
        return "unknown";
    }
} // namespace cpmsim
