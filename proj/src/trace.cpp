#include "cpmsim/trace.hpp"
#include "cpmsim/rng.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <ostream>

namespace cpmsim
{
    namespace
    {
        constexpr char kMagic[8] = {'C', 'P', 'M', 'T', 'R', 'A', 'C', 'E'};
        constexpr std::uint8_t kTagPeriod = 1;
        constexpr std::uint8_t kTagEnd = 0;

        nlohmann::json header_json(const TraceHeader &h)
        {
            return {{"version", h.version},
                    {"scenario", h.scenario},
                    {"seed", h.seed},
                    {"base_period_ns", h.base_period},
                    {"vehicle_ids", h.vehicle_ids},
                    {"scenario_text", h.scenario_text}};
        }

        void write_record(ByteWriter &w, const PeriodRecord &r)
        {
            w.u8(kTagPeriod);
            w.i64(r.period);
            w.u64(r.delivery_digest);
            w.u64(r.published);
            w.u64(r.lost);
            w.u32(r.deadline_misses);
            w.i64(r.max_hlc_wall_ns);
            w.i64(r.max_mlc_wall_ns);
            w.i64(r.period_wall_ns);
            w.u32(static_cast<std::uint32_t>(r.vehicles.size()));
            for (const auto &v : r.vehicles)
            {
                w.u32(static_cast<std::uint32_t>(v.vehicle_id));
                write_state(w, v.truth);
                w.u8(static_cast<std::uint8_t>((v.fused ? 1 : 0) | (v.command ? 2 : 0)));
                if (v.fused)
                    w.bytes32(encode(*v.fused));
                if (v.command)
                {
                    w.f64(v.command->motor_input);
                    w.f64(v.command->steering_angle);
                }
                w.u64(v.trajectory_digest);
            }
        }

        PeriodRecord read_record(ByteReader &r)
        {
            PeriodRecord p;
            p.period = r.i64();
            p.delivery_digest = r.u64();
            p.published = r.u64();
            p.lost = r.u64();
            p.deadline_misses = r.u32();
            p.max_hlc_wall_ns = r.i64();
            p.max_mlc_wall_ns = r.i64();
            p.period_wall_ns = r.i64();
            const auto n = r.u32();
            for (std::uint32_t i = 0; i < n; ++i)
            {
                VehicleRecord v;
                v.vehicle_id = static_cast<int>(r.u32());
                v.truth = read_state(r);
                const auto flags = r.u8();
                if (flags & 1)
                {
                    const auto len = r.u32();
                    v.fused = decode_fused_state(r.raw(len));
                }
                if (flags & 2)
                {
                    ActuatorCommand c;
                    c.motor_input = r.f64();
                    c.steering_angle = r.f64();
                    v.command = c;
                }
                v.trajectory_digest = r.u64();
                p.vehicles.push_back(std::move(v));
            }
            return p;
        }

        bool same(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

        bool same(const VehicleState &a, const VehicleState &b)
        {
            return same(a.pose.x, b.pose.x) && same(a.pose.y, b.pose.y) && same(a.pose.yaw, b.pose.yaw) &&
                   same(a.speed, b.speed) && same(a.yaw_rate, b.yaw_rate) && same(a.steering_angle, b.steering_angle);
        }
    } // namespace

    std::uint64_t chain_digest(std::uint64_t digest, std::span<const std::uint8_t> payload) noexcept
    {
        return hash_combine(digest, fnv1a(payload));
    }

    void write_trace(const Trace &trace, const std::filesystem::path &file)
    {
        Bytes out;
        ByteWriter w(out);
        w.raw(std::span(reinterpret_cast<const std::uint8_t *>(kMagic), sizeof kMagic));
        w.u32(trace.header.version);
        const auto header = header_json(trace.header).dump();
        w.bytes32(std::span(reinterpret_cast<const std::uint8_t *>(header.data()), header.size()));
        for (const auto &r : trace.periods)
            write_record(w, r);
        w.u8(kTagEnd);
        std::ofstream f(file, std::ios::binary);
        if (!f)
            throw TraceError(fmt::format("cannot write trace '{}'", file.string()));
        f.write(reinterpret_cast<const char *>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!f)
            throw TraceError(fmt::format("write to '{}' failed", file.string()));
    }

    Trace read_trace(const std::filesystem::path &file)
    {
        std::ifstream f(file, std::ios::binary);
        if (!f)
            throw TraceError(fmt::format("cannot open trace '{}'", file.string()));
        const Bytes data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        try
        {
            ByteReader r(data);
            const auto magic = r.raw(sizeof kMagic);
            if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0)
                throw TraceError(fmt::format("'{}' is not a trace file", file.string()));
            Trace t;
            t.header.version = r.u32();
            if (t.header.version != 1)
                throw TraceError(fmt::format("unsupported trace version {}", t.header.version));
            const auto len = r.u32();
            const auto raw = r.raw(len);
            const auto j = nlohmann::json::parse(raw.begin(), raw.end());
            t.header.scenario = j.at("scenario").get<std::string>();
            t.header.seed = j.at("seed").get<std::uint64_t>();
            t.header.base_period = j.at("base_period_ns").get<Duration>();
            t.header.vehicle_ids = j.at("vehicle_ids").get<std::vector<int>>();
            t.header.scenario_text = j.at("scenario_text").get<std::string>();
            while (true)
            {
                const auto tag = r.u8();
                if (tag == kTagEnd)
                    break;
                if (tag != kTagPeriod)
                    throw TraceError(fmt::format("bad record tag {}", tag));
                t.periods.push_back(read_record(r));
            }
            r.expect_done();
            return t;
        }
        catch (const DecodeError &e)
        {
            throw TraceError(fmt::format("'{}': {}", file.string(), e.what()));
        }
        catch (const nlohmann::json::exception &e)
        {
            throw TraceError(fmt::format("'{}': bad header: {}", file.string(), e.what()));
        }
    }

    void export_jsonl(const Trace &trace, std::ostream &out)
    {
        out << header_json(trace.header).dump() << '\n';
        const double dt = to_seconds(trace.header.base_period);
        for (const auto &p : trace.periods)
        {
            nlohmann::json j;
            j["period"] = p.period;
            j["t"] = static_cast<double>(p.period) * dt;
            j["delivery_digest"] = p.delivery_digest;
            j["published"] = p.published;
            j["lost"] = p.lost;
            j["deadline_misses"] = p.deadline_misses;
            j["period_wall_ns"] = p.period_wall_ns;
            auto &vs = j["vehicles"] = nlohmann::json::array();
            for (const auto &v : p.vehicles)
            {
                nlohmann::json o{{"id", v.vehicle_id},
                                 {"x", v.truth.pose.x},
                                 {"y", v.truth.pose.y},
                                 {"yaw", v.truth.pose.yaw},
                                 {"speed", v.truth.speed},
                                 {"trajectory_digest", v.trajectory_digest}};
                if (v.fused)
                    o["fused"] = {{"x", v.fused->pose.x},         {"y", v.fused->pose.y},
                                  {"yaw", v.fused->pose.yaw},     {"speed", v.fused->speed},
                                  {"flags", v.fused->flags},      {"has_reference", v.fused->has_reference},
                                  {"ref_x", v.fused->ref_x},      {"ref_y", v.fused->ref_y}};
                if (v.command)
                    o["command"] = {{"motor", v.command->motor_input}, {"steering", v.command->steering_angle}};
                vs.push_back(std::move(o));
            }
            out << j.dump() << '\n';
        }
    }

    std::string TraceDiff::describe() const
    {
        if (equal)
            return "traces are identical";
        if (vehicle_id != 0)
            return fmt::format("first divergence at period {}, vehicle {}: {}", period, vehicle_id, field);
        if (period >= 0)
            return fmt::format("first divergence at period {}: {}", period, field);
        return fmt::format("traces differ: {}", field);
    }

    TraceDiff compare_traces(const Trace &a, const Trace &b)
    {
        auto differ = [](std::int64_t period, int vid, std::string field) {
            return TraceDiff{false, period, vid, std::move(field)};
        };
        if (a.header.version != b.header.version)
            return differ(-1, 0, "trace version");
        if (a.header.seed != b.header.seed)
            return differ(-1, 0, "seed");
        if (a.header.scenario != b.header.scenario || a.header.scenario_text != b.header.scenario_text)
            return differ(-1, 0, "scenario");
        if (a.header.base_period != b.header.base_period || a.header.vehicle_ids != b.header.vehicle_ids)
            return differ(-1, 0, "schema");
        const auto n = std::min(a.periods.size(), b.periods.size());
        for (std::size_t i = 0; i < n; ++i)
        {
            const auto &pa = a.periods[i];
            const auto &pb = b.periods[i];
            if (pa.period != pb.period)
                return differ(pa.period, 0, "period index");
            if (pa.vehicles.size() != pb.vehicles.size())
                return differ(pa.period, 0, "vehicle count");
            for (std::size_t k = 0; k < pa.vehicles.size(); ++k)
            {
                const auto &va = pa.vehicles[k];
                const auto &vb = pb.vehicles[k];
                if (va.vehicle_id != vb.vehicle_id)
                    return differ(pa.period, va.vehicle_id, "vehicle id");
                if (!same(va.truth, vb.truth))
                    return differ(pa.period, va.vehicle_id, "ground truth");
                if (va.fused.has_value() != vb.fused.has_value() ||
                    (va.fused && encode(*va.fused) != encode(*vb.fused)))
                    return differ(pa.period, va.vehicle_id, "fused state");
                if (va.command.has_value() != vb.command.has_value() ||
                    (va.command && (!same(va.command->motor_input, vb.command->motor_input) ||
                                    !same(va.command->steering_angle, vb.command->steering_angle))))
                    return differ(pa.period, va.vehicle_id, "command");
                if (va.trajectory_digest != vb.trajectory_digest)
                    return differ(pa.period, va.vehicle_id, "trajectory stream");
            }
            if (pa.delivery_digest != pb.delivery_digest)
                return differ(pa.period, 0, "delivery log");
            if (pa.published != pb.published || pa.lost != pb.lost)
                return differ(pa.period, 0, "message counts");
        }
        if (a.periods.size() != b.periods.size())
            return differ(static_cast<std::int64_t>(n), 0, "trace length");
        return {};
    }
} // namespace cpmsim
