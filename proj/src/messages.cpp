#include "cpmsim/messages.hpp"

#include <fmt/format.h>

#include <charconv>

namespace cpmsim
{
    namespace topics
    {
        std::string sensors(int id) { return fmt::format("vehicle/{}/sensors", id); }
        std::string command(int id) { return fmt::format("vehicle/{}/command", id); }
        std::string fused(int id) { return fmt::format("vehicle/{}/fused", id); }
        std::string truth(int id) { return fmt::format("vehicle/{}/truth", id); }
        std::string trajectory(int id) { return fmt::format("hlc/{}/trajectory", id); }
        std::string direct(int id) { return fmt::format("hlc/{}/direct", id); }
        std::string committed(int id) { return fmt::format("hlc/committed/{}", id); }

        int vehicle_of(std::string_view topic)
        {
            const auto a = topic.find('/');
            if (a == std::string_view::npos)
                return -1;
            auto rest = topic.substr(a + 1);
            if (topic.substr(0, a) == "hlc" && rest.starts_with("committed/"))
                rest.remove_prefix(10);
            const auto b = rest.find('/');
            const auto seg = rest.substr(0, b);
            int id = -1;
            const auto [ptr, ec] = std::from_chars(seg.data(), seg.data() + seg.size(), id);
            if (ec != std::errc{} || ptr != seg.data() + seg.size())
                return -1;
            return id;
        }
    } // namespace topics

    void write_pose(ByteWriter &w, const Pose &p)
    {
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.yaw);
    }

    Pose read_pose(ByteReader &r)
    {
        Pose p;
        p.x = r.f64();
        p.y = r.f64();
        p.yaw = r.f64();
        return p;
    }

    void write_state(ByteWriter &w, const VehicleState &s)
    {
        write_pose(w, s.pose);
        w.f64(s.speed);
        w.f64(s.yaw_rate);
        w.f64(s.steering_angle);
    }

    VehicleState read_state(ByteReader &r)
    {
        VehicleState s;
        s.pose = read_pose(r);
        s.speed = r.f64();
        s.yaw_rate = r.f64();
        s.steering_angle = r.f64();
        return s;
    }

    Bytes encode(const SensorSample &m)
    {
        ByteWriter w;
        w.f64(m.odometer_speed);
        w.f64(m.imu_accel);
        w.f64(m.imu_yaw_rate);
        w.i64(m.sample_time);
        return w.take();
    }

    SensorSample decode_sensor_sample(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        SensorSample m;
        m.odometer_speed = r.f64();
        m.imu_accel = r.f64();
        m.imu_yaw_rate = r.f64();
        m.sample_time = r.i64();
        r.expect_done();
        return m;
    }

    Bytes encode(const ActuatorCommand &m)
    {
        ByteWriter w;
        w.f64(m.motor_input);
        w.f64(m.steering_angle);
        return w.take();
    }

    ActuatorCommand decode_command(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        ActuatorCommand m;
        m.motor_input = r.f64();
        m.steering_angle = r.f64();
        r.expect_done();
        return m;
    }

    Bytes encode(const VehicleState &m)
    {
        ByteWriter w;
        write_state(w, m);
        return w.take();
    }

    VehicleState decode_vehicle_state(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        auto s = read_state(r);
        r.expect_done();
        return s;
    }

    Bytes encode(const FusedState &m)
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(m.vehicle_id));
        write_pose(w, m.pose);
        w.f64(m.speed);
        w.i64(m.confidence_age);
        w.u8(m.has_reference ? 1 : 0);
        w.f64(m.ref_x);
        w.f64(m.ref_y);
        w.u64(m.trajectory_id);
        w.u32(m.flags);
        w.u64(m.mode_mismatches);
        return w.take();
    }

    FusedState decode_fused_state(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        FusedState m;
        m.vehicle_id = static_cast<int>(r.u32());
        m.pose = read_pose(r);
        m.speed = r.f64();
        m.confidence_age = r.i64();
        m.has_reference = r.u8() != 0;
        m.ref_x = r.f64();
        m.ref_y = r.f64();
        m.trajectory_id = r.u64();
        m.flags = r.u32();
        m.mode_mismatches = r.u64();
        r.expect_done();
        return m;
    }

    Bytes encode(const TrajectoryMessage &m)
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(m.vehicle_id));
        encode_nodes(w, m.nodes);
        return w.take();
    }

    TrajectoryMessage decode_trajectory_message(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        TrajectoryMessage m;
        m.vehicle_id = static_cast<int>(r.u32());
        m.nodes = decode_nodes(r);
        r.expect_done();
        return m;
    }

    Bytes encode(const CommittedMessage &m)
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(m.vehicle_id));
        w.u32(static_cast<std::uint32_t>(m.priority));
        encode_nodes(w, m.nodes);
        return w.take();
    }

    CommittedMessage decode_committed_message(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        CommittedMessage m;
        m.vehicle_id = static_cast<int>(r.u32());
        m.priority = static_cast<int>(r.u32());
        m.nodes = decode_nodes(r);
        r.expect_done();
        return m;
    }

    Bytes encode(const std::vector<PoseObservation> &m)
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(m.size()));
        for (const auto &o : m)
        {
            w.u32(static_cast<std::uint32_t>(o.vehicle_id));
            write_pose(w, o.pose);
            w.i64(o.frame_index);
            w.i64(o.frame_time);
        }
        return w.take();
    }

    std::vector<PoseObservation> decode_observations(std::span<const std::uint8_t> b)
    {
        ByteReader r(b);
        const auto n = r.u32();
        if (static_cast<std::size_t>(n) * 44 > r.remaining())
            throw DecodeError("observation count exceeds payload");
        std::vector<PoseObservation> out(n);
        for (auto &o : out)
        {
            o.vehicle_id = static_cast<int>(r.u32());
            o.pose = read_pose(r);
            o.frame_index = r.i64();
            o.frame_time = r.i64();
        }
        r.expect_done();
        return out;
    }
} // namespace cpmsim
