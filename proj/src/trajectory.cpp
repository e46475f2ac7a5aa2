#include "cpmsim/trajectory.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace cpmsim
{
    HermiteBasis HermiteBasis::at(double tau) noexcept
    {
        const double t2 = tau * tau;
        const double t3 = t2 * tau;
        return {2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + tau, -2 * t3 + 3 * t2, t3 - t2};
    }

    HermiteBasis HermiteBasis::derivative_at(double tau) noexcept
    {
        const double t2 = tau * tau;
        return {6 * t2 - 6 * tau, 3 * t2 - 4 * tau + 1, -6 * t2 + 6 * tau, 3 * t2 - 2 * tau};
    }

    namespace
    {
        void check_node(const TrajectoryNode &n, const VehicleParams &params)
        {
            const auto v = validate_node(n, params);
            if (!v)
                throw TrajectoryError(TrajectoryError::Kind::InvalidNode,
                                      fmt::format("invalid node at t={} ns: {}", n.t, v.message));
        }
    } // namespace

    Trajectory::Trajectory(std::vector<TrajectoryNode> nodes, const VehicleParams &params) : nodes_(std::move(nodes))
    {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
        {
            check_node(nodes_[i], params);
            if (i > 0 && nodes_[i].t <= nodes_[i - 1].t)
                throw TrajectoryError(TrajectoryError::Kind::NonIncreasingTime,
                                      fmt::format("node times not strictly increasing at index {}", i));
        }
    }

    Time Trajectory::t_first() const
    {
        if (nodes_.empty())
            throw TrajectoryError(TrajectoryError::Kind::TooFewNodes, "empty trajectory");
        return nodes_.front().t;
    }

    Time Trajectory::t_last() const
    {
        if (nodes_.empty())
            throw TrajectoryError(TrajectoryError::Kind::TooFewNodes, "empty trajectory");
        return nodes_.back().t;
    }

    bool Trajectory::covers(Time from, Time to) const noexcept
    {
        return nodes_.size() >= 2 && nodes_.front().t <= from && to <= nodes_.back().t;
    }

    ReferencePoint Trajectory::interpolate(Time t) const
    {
        if (nodes_.size() < 2)
            throw TrajectoryError(TrajectoryError::Kind::TooFewNodes,
                                  fmt::format("interpolation needs 2 nodes, have {}", nodes_.size()));
        if (t < nodes_.front().t || t > nodes_.back().t)
            throw TrajectoryError(TrajectoryError::Kind::Extrapolation,
                                  fmt::format("t={} ns outside [{}, {}]", t, nodes_.front().t, nodes_.back().t));

        // First node with time > t; the segment is [it-1, it].
        auto it = std::upper_bound(nodes_.begin(), nodes_.end(), t,
                                   [](Time q, const TrajectoryNode &n) { return q < n.t; });
        const TrajectoryNode &a = *std::prev(it);
        if (a.t == t)
            return {a.x, a.y, a.vx, a.vy};
        const TrajectoryNode &b = *it;

        const Duration span = b.t - a.t;
        const double tau = static_cast<double>(t - a.t) / static_cast<double>(span);
        const double dt = to_seconds(span);
        const auto h = HermiteBasis::at(tau);
        const auto d = HermiteBasis::derivative_at(tau);

        ReferencePoint r;
        r.x = h.h00 * a.x + h.h10 * dt * a.vx + h.h01 * b.x + h.h11 * dt * b.vx;
        r.y = h.h00 * a.y + h.h10 * dt * a.vy + h.h01 * b.y + h.h11 * dt * b.vy;
        r.vx = (d.h00 * a.x + d.h01 * b.x) / dt + d.h10 * a.vx + d.h11 * b.vx;
        r.vy = (d.h00 * a.y + d.h01 * b.y) / dt + d.h10 * a.vy + d.h11 * b.vy;
        return r;
    }

    Trajectory Trajectory::append_node(const TrajectoryNode &node, const VehicleParams &params) const &
    {
        Trajectory copy = *this;
        return std::move(copy).append_node(node, params);
    }

    Trajectory Trajectory::append_node(const TrajectoryNode &node, const VehicleParams &params) &&
    {
        check_node(node, params);
        if (!nodes_.empty() && node.t <= nodes_.back().t)
            throw TrajectoryError(TrajectoryError::Kind::NonIncreasingTime,
                                  fmt::format("appended node t={} ns not after last node t={} ns", node.t,
                                              nodes_.back().t));
        nodes_.push_back(node);
        return std::move(*this);
    }

    Trajectory Trajectory::prune_before(Time t) const
    {
        Trajectory out;
        // Index of the last node with time < t; it stays as the left endpoint.
        auto it = std::lower_bound(nodes_.begin(), nodes_.end(), t,
                                   [](const TrajectoryNode &n, Time q) { return n.t < q; });
        if (it != nodes_.begin())
            --it;
        // Keep at least two nodes so the final segment stays usable.
        if (nodes_.size() >= 2 && std::distance(it, nodes_.end()) < 2)
            it = nodes_.end() - 2;
        out.nodes_.assign(it, nodes_.end());
        return out;
    }

    Trajectory Trajectory::merged_with(std::span<const TrajectoryNode> incoming, const VehicleParams &params) const
    {
        if (incoming.empty())
            return *this;
        Trajectory out;
        const Time first = incoming.front().t;
        for (const auto &n : nodes_)
            if (n.t < first)
                out.nodes_.push_back(n);
        for (const auto &n : incoming)
            out = std::move(out).append_node(n, params);
        return out;
    }

    void encode_nodes(ByteWriter &w, std::span<const TrajectoryNode> nodes)
    {
        w.u32(static_cast<std::uint32_t>(nodes.size()));
        for (const auto &n : nodes)
        {
            w.i64(n.t);
            w.f64(n.x);
            w.f64(n.y);
            w.f64(n.vx);
            w.f64(n.vy);
        }
    }

    std::vector<TrajectoryNode> decode_nodes(ByteReader &r)
    {
        const auto n = r.u32();
        if (static_cast<std::size_t>(n) * 40 > r.remaining())
            throw DecodeError("node count exceeds payload");
        std::vector<TrajectoryNode> out(n);
        for (auto &node : out)
        {
            node.t = r.i64();
            node.x = r.f64();
            node.y = r.f64();
            node.vx = r.f64();
            node.vy = r.f64();
        }
        return out;
    }

    Bytes encode_nodes(std::span<const TrajectoryNode> nodes)
    {
        ByteWriter w;
        encode_nodes(w, nodes);
        return w.take();
    }

    std::vector<TrajectoryNode> decode_nodes(std::span<const std::uint8_t> payload)
    {
        ByteReader r(payload);
        auto out = decode_nodes(r);
        r.expect_done();
        return out;
    }
} // namespace cpmsim
