#pragma once

#include "cpmsim/codec.hpp"
#include "cpmsim/types.hpp"

#include <span>
#include <vector>

namespace cpmsim
{
    class TrajectoryError : public Error
    {
    public:
        enum class Kind : std::uint8_t
        {
            TooFewNodes,
            Extrapolation,
            NonIncreasingTime,
            InvalidNode,
        };

        TrajectoryError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}
        Kind kind() const noexcept { return kind_; }

    private:
        Kind kind_;
    };

    struct ReferencePoint
    {
        double x = 0.0;
        double y = 0.0;
        double vx = 0.0;
        double vy = 0.0;

        friend bool operator==(const ReferencePoint &, const ReferencePoint &) = default;
    };

    /// Standard cubic Hermite basis on tau in [0, 1].
    struct HermiteBasis
    {
        double h00, h10, h01, h11;
        static HermiteBasis at(double tau) noexcept;
        static HermiteBasis derivative_at(double tau) noexcept;
    };

    /// Ordered timed waypoints with C1 cubic Hermite interpolation.
    ///
    /// Each segment only depends on its two end nodes, so appending a node
    /// never changes values at or before the previous last node.
    class Trajectory
    {
    public:
        Trajectory() = default;
        /// Validates every node and strict time ordering.
        explicit Trajectory(std::vector<TrajectoryNode> nodes, const VehicleParams &params = {});

        const std::vector<TrajectoryNode> &nodes() const noexcept { return nodes_; }
        std::size_t size() const noexcept { return nodes_.size(); }
        bool empty() const noexcept { return nodes_.empty(); }
        Time t_first() const;
        Time t_last() const;
        bool covers(Time from, Time to) const noexcept;

        ReferencePoint interpolate(Time t) const;

        Trajectory append_node(const TrajectoryNode &node, const VehicleParams &params = {}) const &;
        Trajectory append_node(const TrajectoryNode &node, const VehicleParams &params = {}) &&;
        Trajectory prune_before(Time t) const;

        /// Keeps nodes strictly before the first incoming node and appends the incoming list.
        Trajectory merged_with(std::span<const TrajectoryNode> incoming, const VehicleParams &params = {}) const;

        friend bool operator==(const Trajectory &, const Trajectory &) = default;

    private:
        std::vector<TrajectoryNode> nodes_;
    };

    /// Fixed-width little-endian: u32 count, then (i64 t, f64 x, y, vx, vy) per node.
    void encode_nodes(ByteWriter &w, std::span<const TrajectoryNode> nodes);
    std::vector<TrajectoryNode> decode_nodes(ByteReader &r);
    Bytes encode_nodes(std::span<const TrajectoryNode> nodes);
    std::vector<TrajectoryNode> decode_nodes(std::span<const std::uint8_t> payload);
} // namespace cpmsim
