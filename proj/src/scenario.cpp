#include "cpmsim/scenario.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace cpmsim
{
    ScenarioError::ScenarioError(const std::string &what, int line)
        : Error(line > 0 ? fmt::format("line {}: {}", line, what) : what), line_(line)
    {
    }

    NoiseConfig SensorSettings::noise() const
    {
        NoiseConfig n;
        n.odometer_sigma = odometer_sigma;
        n.imu_accel_sigma = accel_sigma;
        n.imu_yaw_rate_sigma = gyro_sigma;
        n.odometer_tick = tick;
        return n;
    }

    std::int64_t ScenarioSpec::periods() const
    {
        return static_cast<std::int64_t>(std::llround(duration * 1000.0 / base_period_ms));
    }

    const VehicleSpec &ScenarioSpec::vehicle(int id) const
    {
        for (const auto &v : vehicles)
            if (v.id == id)
                return v;
        throw ScenarioError(fmt::format("scenario '{}' has no vehicle {}", name, id));
    }

    bool ScenarioSpec::has_external() const noexcept
    {
        for (const auto &v : vehicles)
            if (v.external)
                return true;
        return false;
    }

    const char *to_string(ScenarioKind k) noexcept
    {
        switch (k)
        {
        case ScenarioKind::Platoon: return "platoon";
        case ScenarioKind::Intersection: return "intersection";
        case ScenarioKind::Follow: return "follow";
        case ScenarioKind::Direct: return "direct";
        }
        return "?";
    }

    const char *to_string(Topology t) noexcept
    {
        return t == Topology::Centralized ? "centralized" : "distributed";
    }

    namespace
    {
        bool is_multiple(double value, double unit)
        {
            const double q = value / unit;
            return std::abs(q - std::round(q)) < 1e-9 && std::round(q) >= 1;
        }

        void resolve_pose(VehicleSpec &v, const Map &map)
        {
            if (v.path.empty())
                return;
            const auto &path = map.path(v.path);
            if (!path.closed() && (v.s < 0 || v.s > path.length()))
                throw ScenarioError(fmt::format("vehicle {}: s = {} outside path '{}'", v.id, v.s, v.path));
            const auto p = path_point(path, v.s).pose;
            v.pose = Pose{p.x - v.offset * std::sin(p.yaw), p.y + v.offset * std::cos(p.yaw), p.yaw};
        }
    } // namespace

    void finalize(ScenarioSpec &spec)
    {
        auto fail = [&](const std::string &what) { throw ScenarioError(fmt::format("{}: {}", spec.name, what)); };
        const Map *map = nullptr;
        try
        {
            map = &builtin_map(spec.map);
        }
        catch (const Error &e)
        {
            fail(e.what());
        }
        const VehicleParams params;
        if (spec.vehicles.empty())
            fail("no vehicles");
        if (!(spec.duration > 0) || !std::isfinite(spec.duration))
            fail("duration must be > 0");
        if (spec.base_period_ms <= 0 || spec.hlc_multiple <= 0)
            fail("periods must be positive");
        if (!(spec.ref_speed > 0) || spec.ref_speed > params.max_speed)
            fail(fmt::format("ref_speed {} outside (0, {}]", spec.ref_speed, params.max_speed));
        if (!(spec.max_accel > 0))
            fail("max_accel must be > 0");
        const double hlc = to_seconds(spec.hlc_period());
        if (!is_multiple(spec.horizon, hlc))
            fail(fmt::format("horizon {} is not a multiple of the planner period {}", spec.horizon, hlc));
        if (spec.kind == ScenarioKind::Platoon && !is_multiple(spec.gap_time, hlc))
            fail(fmt::format("gap_time {} is not a multiple of the planner period {}", spec.gap_time, hlc));
        if (!(spec.settle_time >= 0))
            fail("settle_time must be >= 0");
        if (!(spec.ips.noise_sigma >= 0) || !(spec.ips.dropout >= 0 && spec.ips.dropout < 1) ||
            spec.ips.latency_frames < 1)
            fail("ips settings out of range");
        try
        {
            spec.sensors.noise().validate();
        }
        catch (const Error &e)
        {
            fail(e.what());
        }
        if (!(spec.network_loss >= 0 && spec.network_loss < 1) || spec.network_delay < 0 || spec.network_delay > 16)
            fail("network settings out of range");

        std::set<int> ids;
        for (auto &v : spec.vehicles)
        {
            if (v.id < 1 || v.id > 999)
                fail(fmt::format("vehicle id {} outside 1..999", v.id));
            if (!ids.insert(v.id).second)
                fail(fmt::format("duplicate vehicle id {}", v.id));
            if (!v.path.empty() && !map->paths.count(v.path))
                fail(fmt::format("vehicle {}: map '{}' has no path '{}'", v.id, spec.map, v.path));
            if (v.path.empty() && spec.kind != ScenarioKind::Direct)
                fail(fmt::format("vehicle {}: a path is required", v.id));
            if (!(v.speed >= 0) || v.speed > params.max_speed)
                fail(fmt::format("vehicle {}: speed {} out of range", v.id, v.speed));
            const bool direct = spec.kind == ScenarioKind::Direct;
            if ((v.mode == ControlMode::Direct) != direct)
                fail(fmt::format("vehicle {}: control mode does not match the scenario kind", v.id));
            if (direct && (std::abs(v.direct.motor_input) > 1 || std::abs(v.direct.steering_angle) > params.max_steering))
                fail(fmt::format("vehicle {}: direct command out of range", v.id));
            if (spec.kind == ScenarioKind::Platoon)
            {
                if (v.path != spec.vehicles.front().path || !map->path(v.path).closed())
                    fail("platoon vehicles must share one closed path");
            }
            if (spec.kind == ScenarioKind::Intersection && !map->junction_after(v.path))
                fail(fmt::format("vehicle {}: path '{}' does not lead to a junction", v.id, v.path));
            try
            {
                resolve_pose(v, *map);
            }
            catch (const Error &e)
            {
                fail(e.what());
            }
            for (const auto &c : footprint(v.pose, params).corners())
                if (!map->contains(c))
                    fail(fmt::format("vehicle {} starts outside the map", v.id));
        }
        if (spec.kind == ScenarioKind::Platoon)
        {
            // Rolling start: followers sit exactly one time gap behind their predecessor.
            const double length = map->path(spec.vehicles.front().path).length();
            for (std::size_t i = 1; i < spec.vehicles.size(); ++i)
            {
                const auto &a = spec.vehicles[i - 1];
                const auto &b = spec.vehicles[i];
                const double spacing = std::fmod(a.s - b.s + 2 * length, length);
                if (a.speed != b.speed || std::abs(spacing - a.speed * spec.gap_time) > 1e-6 || a.offset != 0 ||
                    b.offset != 0)
                    fail(fmt::format("vehicle {} does not start one time gap behind vehicle {}", b.id, a.id));
            }
        }
        for (std::size_t i = 0; i < spec.vehicles.size(); ++i)
            for (std::size_t j = i + 1; j < spec.vehicles.size(); ++j)
                if (overlaps(footprint(spec.vehicles[i].pose, params), footprint(spec.vehicles[j].pose, params)))
                    fail(fmt::format("vehicles {} and {} overlap at the start", spec.vehicles[i].id,
                                     spec.vehicles[j].id));
    }

    namespace
    {
        struct Line
        {
            int number;
            std::string key;
            std::vector<std::string> args;
        };

        double to_double(const std::string &s, const Line &l)
        {
            double v = 0;
            const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
            if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
                throw ScenarioError(fmt::format("'{}' is not a number", s), l.number);
            return v;
        }

        std::int64_t to_int(const std::string &s, const Line &l)
        {
            std::int64_t v = 0;
            const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
            if (r.ec != std::errc() || r.ptr != s.data() + s.size())
                throw ScenarioError(fmt::format("'{}' is not an integer", s), l.number);
            return v;
        }

        const std::string &single(const Line &l)
        {
            if (l.args.size() != 1)
                throw ScenarioError(fmt::format("'{}' takes exactly one value", l.key), l.number);
            return l.args.front();
        }

        // key=value pairs of a line, each key once.
        std::vector<std::pair<std::string, std::string>> pairs(const Line &l)
        {
            std::vector<std::pair<std::string, std::string>> out;
            std::set<std::string> seen;
            for (const auto &a : l.args)
            {
                const auto eq = a.find('=');
                if (eq == std::string::npos || eq == 0)
                    throw ScenarioError(fmt::format("expected key=value, got '{}'", a), l.number);
                auto key = a.substr(0, eq);
                if (!seen.insert(key).second)
                    throw ScenarioError(fmt::format("duplicate key '{}'", key), l.number);
                out.emplace_back(std::move(key), a.substr(eq + 1));
            }
            return out;
        }

        [[noreturn]] void unknown(const std::string &key, const Line &l)
        {
            throw ScenarioError(fmt::format("unknown key '{}'", key), l.number);
        }

        VehicleSpec parse_vehicle(const Line &l)
        {
            VehicleSpec v;
            bool has_id = false, has_pose = false;
            for (const auto &[k, val] : pairs(l))
            {
                if (k == "id")
                {
                    v.id = static_cast<int>(to_int(val, l));
                    has_id = true;
                }
                else if (k == "kind")
                {
                    if (val != "internal" && val != "external")
                        throw ScenarioError(fmt::format("vehicle kind '{}'", val), l.number);
                    v.external = val == "external";
                }
                else if (k == "path")
                    v.path = val;
                else if (k == "s")
                    v.s = to_double(val, l);
                else if (k == "offset")
                    v.offset = to_double(val, l);
                else if (k == "x" || k == "y" || k == "yaw")
                {
                    (k == "x" ? v.pose.x : k == "y" ? v.pose.y : v.pose.yaw) = to_double(val, l);
                    has_pose = true;
                }
                else if (k == "speed")
                    v.speed = to_double(val, l);
                else if (k == "mode")
                {
                    if (val != "trajectory" && val != "direct")
                        throw ScenarioError(fmt::format("control mode '{}'", val), l.number);
                    v.mode = val == "direct" ? ControlMode::Direct : ControlMode::Trajectory;
                }
                else if (k == "motor")
                    v.direct.motor_input = to_double(val, l);
                else if (k == "steering")
                    v.direct.steering_angle = to_double(val, l);
                else
                    unknown(k, l);
            }
            if (!has_id)
                throw ScenarioError("vehicle without id", l.number);
            if (has_pose && !v.path.empty())
                throw ScenarioError("vehicle has both a path and an explicit pose", l.number);
            return v;
        }
    } // namespace

    ScenarioSpec parse_scenario(const std::string &text)
    {
        std::istringstream in(text);
        std::string raw;
        std::vector<Line> lines;
        int number = 0;
        while (std::getline(in, raw))
        {
            ++number;
            if (const auto hash = raw.find('#'); hash != std::string::npos)
                raw.erase(hash);
            std::istringstream ls(raw);
            Line l{number, {}, {}};
            if (!(ls >> l.key))
                continue;
            for (std::string a; ls >> a;)
                l.args.push_back(a);
            lines.push_back(std::move(l));
        }
        if (lines.empty() || lines.front().key != "cpmscenario" || lines.front().args != std::vector<std::string>{"v1"})
            throw ScenarioError("missing 'cpmscenario v1' header", lines.empty() ? 1 : lines.front().number);

        ScenarioSpec spec;
        std::set<std::string> seen;
        for (std::size_t i = 1; i < lines.size(); ++i)
        {
            const Line &l = lines[i];
            if (l.key != "vehicle" && !seen.insert(l.key).second)
                throw ScenarioError(fmt::format("duplicate '{}'", l.key), l.number);
            if (l.key == "name")
                spec.name = single(l);
            else if (l.key == "map")
                spec.map = single(l);
            else if (l.key == "kind")
            {
                const auto &k = single(l);
                if (k == "platoon")
                    spec.kind = ScenarioKind::Platoon;
                else if (k == "intersection")
                    spec.kind = ScenarioKind::Intersection;
                else if (k == "follow")
                    spec.kind = ScenarioKind::Follow;
                else if (k == "direct")
                    spec.kind = ScenarioKind::Direct;
                else
                    throw ScenarioError(fmt::format("scenario kind '{}'", k), l.number);
            }
            else if (l.key == "topology")
            {
                const auto &t = single(l);
                if (t != "centralized" && t != "distributed")
                    throw ScenarioError(fmt::format("topology '{}'", t), l.number);
                spec.topology = t == "centralized" ? Topology::Centralized : Topology::Distributed;
            }
            else if (l.key == "seed")
            {
                const auto &s = single(l);
                std::uint64_t v = 0;
                const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
                if (r.ec != std::errc() || r.ptr != s.data() + s.size())
                    throw ScenarioError(fmt::format("'{}' is not a seed", s), l.number);
                spec.seed = v;
            }
            else if (l.key == "duration")
                spec.duration = to_double(single(l), l);
            else if (l.key == "base_period_ms")
                spec.base_period_ms = static_cast<int>(to_int(single(l), l));
            else if (l.key == "hlc_multiple")
                spec.hlc_multiple = static_cast<int>(to_int(single(l), l));
            else if (l.key == "ref_speed")
                spec.ref_speed = to_double(single(l), l);
            else if (l.key == "gap_time")
                spec.gap_time = to_double(single(l), l);
            else if (l.key == "horizon")
                spec.horizon = to_double(single(l), l);
            else if (l.key == "max_accel")
                spec.max_accel = to_double(single(l), l);
            else if (l.key == "settle_time")
                spec.settle_time = to_double(single(l), l);
            else if (l.key == "ips")
            {
                for (const auto &[k, v] : pairs(l))
                {
                    if (k == "noise")
                        spec.ips.noise_sigma = to_double(v, l);
                    else if (k == "dropout")
                        spec.ips.dropout = to_double(v, l);
                    else if (k == "latency")
                        spec.ips.latency_frames = static_cast<int>(to_int(v, l));
                    else
                        unknown(k, l);
                }
            }
            else if (l.key == "sensors")
            {
                for (const auto &[k, v] : pairs(l))
                {
                    if (k == "odometer")
                        spec.sensors.odometer_sigma = to_double(v, l);
                    else if (k == "accel")
                        spec.sensors.accel_sigma = to_double(v, l);
                    else if (k == "gyro")
                        spec.sensors.gyro_sigma = to_double(v, l);
                    else if (k == "tick")
                        spec.sensors.tick = to_double(v, l);
                    else
                        unknown(k, l);
                }
            }
            else if (l.key == "network")
            {
                for (const auto &[k, v] : pairs(l))
                {
                    if (k == "loss")
                        spec.network_loss = to_double(v, l);
                    else if (k == "delay")
                        spec.network_delay = static_cast<int>(to_int(v, l));
                    else
                        unknown(k, l);
                }
            }
            else if (l.key == "vehicle")
                spec.vehicles.push_back(parse_vehicle(l));
            else
                unknown(l.key, l);
        }
        finalize(spec);
        return spec;
    }

    std::string format_scenario(const ScenarioSpec &spec)
    {
        std::string out = "cpmscenario v1\n";
        auto line = [&](std::string_view key, const auto &value) { out += fmt::format("{} {}\n", key, value); };
        line("name", spec.name);
        line("map", spec.map);
        line("kind", to_string(spec.kind));
        line("topology", to_string(spec.topology));
        line("seed", spec.seed);
        line("duration", spec.duration);
        line("base_period_ms", spec.base_period_ms);
        line("hlc_multiple", spec.hlc_multiple);
        line("ref_speed", spec.ref_speed);
        line("gap_time", spec.gap_time);
        line("horizon", spec.horizon);
        line("max_accel", spec.max_accel);
        line("settle_time", spec.settle_time);
        out += fmt::format("ips noise={} dropout={} latency={}\n", spec.ips.noise_sigma, spec.ips.dropout,
                           spec.ips.latency_frames);
        out += fmt::format("sensors odometer={} accel={} gyro={} tick={}\n", spec.sensors.odometer_sigma,
                           spec.sensors.accel_sigma, spec.sensors.gyro_sigma, spec.sensors.tick);
        out += fmt::format("network loss={} delay={}\n", spec.network_loss, spec.network_delay);
        for (const auto &v : spec.vehicles)
        {
            out += fmt::format("vehicle id={} kind={}", v.id, v.external ? "external" : "internal");
            if (v.path.empty())
                out += fmt::format(" x={} y={} yaw={}", v.pose.x, v.pose.y, v.pose.yaw);
            else
            {
                out += fmt::format(" path={} s={}", v.path, v.s);
                if (v.offset != 0.0)
                    out += fmt::format(" offset={}", v.offset);
            }
            out += fmt::format(" speed={}", v.speed);
            if (v.mode == ControlMode::Direct)
                out += fmt::format(" mode=direct motor={} steering={}", v.direct.motor_input,
                                   v.direct.steering_angle);
            out += "\n";
        }
        return out;
    }

    ScenarioSpec load_scenario(const std::filesystem::path &file)
    {
        std::ifstream in(file);
        if (!in)
            throw ScenarioError(fmt::format("cannot open scenario file '{}'", file.string()));
        std::stringstream buf;
        buf << in.rdbuf();
        try
        {
            return parse_scenario(buf.str());
        }
        catch (const ScenarioError &e)
        {
            throw ScenarioError(fmt::format("{}: {}", file.string(), e.what()));
        }
    }

    void save_scenario(const ScenarioSpec &spec, const std::filesystem::path &file)
    {
        std::ofstream out(file);
        if (!out)
            throw ScenarioError(fmt::format("cannot write scenario file '{}'", file.string()));
        out << format_scenario(spec);
        if (!out)
            throw ScenarioError(fmt::format("write to '{}' failed", file.string()));
    }

    namespace
    {
        ScenarioSpec platoon8()
        {
            ScenarioSpec s;
            s.name = "platoon8";
            s.map = "platoon_loop";
            s.kind = ScenarioKind::Platoon;
            s.topology = Topology::Centralized;
            s.seed = 42;
            s.duration = 120.0;
            for (int i = 0; i < 8; ++i)
            {
                VehicleSpec v;
                v.id = i + 1;
                v.path = "loop";
                v.s = 4.0 - s.ref_speed * s.gap_time * i;
                v.speed = s.ref_speed;
                s.vehicles.push_back(v);
            }
            return s;
        }

        ScenarioSpec platoon8_mixed()
        {
            auto s = platoon8();
            s.name = "platoon8_mixed";
            s.vehicles[2].external = true;
            s.vehicles[5].external = true;
            return s;
        }

        ScenarioSpec intersection8()
        {
            ScenarioSpec s;
            s.name = "intersection8";
            s.map = "intersection";
            s.kind = ScenarioKind::Intersection;
            s.topology = Topology::Distributed;
            s.seed = 7;
            s.duration = 300.0;
            const char *sides[4] = {"W", "S", "E", "N"};
            int id = 1;
            for (const double at : {2.0, 4.0})
                for (const char *side : sides)
                {
                    VehicleSpec v;
                    v.id = id++;
                    v.path = std::string(side) + ".straight";
                    v.s = at;
                    v.speed = s.ref_speed;
                    s.vehicles.push_back(v);
                }
            return s;
        }

        ScenarioSpec circle18()
        {
            ScenarioSpec s;
            s.name = "circle18";
            s.map = "outer_circle";
            s.kind = ScenarioKind::Follow;
            s.topology = Topology::Distributed;
            s.seed = 18;
            s.duration = 60.0;
            const double length = builtin_map("outer_circle").path("circle").length();
            for (int i = 0; i < 18; ++i)
            {
                VehicleSpec v;
                v.id = i + 1;
                v.path = "circle";
                v.s = length * (17 - i) / 18.0;
                v.speed = s.ref_speed;
                s.vehicles.push_back(v);
            }
            return s;
        }

        ScenarioSpec direct1()
        {
            ScenarioSpec s;
            s.name = "direct1";
            s.map = "outer_circle";
            s.kind = ScenarioKind::Direct;
            s.seed = 3;
            s.duration = 20.0;
            VehicleSpec v;
            v.id = 1;
            v.mode = ControlMode::Direct;
            v.direct = ActuatorCommand{MotorModel{}.steady_state_input(0.8), 0.1};
            // Turning radius wheelbase / tan(steering) around the map center.
            const double r = VehicleParams{}.wheelbase / std::tan(0.1);
            v.pose = Pose{2.25, 2.0 - r, 0.0};
            v.speed = 0.8;
            s.vehicles.push_back(v);
            return s;
        }

        ScenarioSpec straight1()
        {
            ScenarioSpec s;
            s.name = "straight1";
            s.map = "straight";
            s.kind = ScenarioKind::Follow;
            s.seed = 5;
            s.duration = 3.0;
            s.settle_time = 0.0;
            VehicleSpec v;
            v.id = 1;
            v.path = "line";
            v.s = 0.2;
            v.speed = s.ref_speed;
            s.vehicles.push_back(v);
            return s;
        }
    } // namespace

    std::vector<std::string> fixture_names()
    {
        return {"platoon8", "platoon8_mixed", "intersection8", "circle18", "direct1", "straight1"};
    }

    ScenarioSpec fixture(std::string_view name)
    {
        ScenarioSpec s;
        if (name == "platoon8")
            s = platoon8();
        else if (name == "platoon8_mixed")
            s = platoon8_mixed();
        else if (name == "intersection8")
            s = intersection8();
        else if (name == "circle18")
            s = circle18();
        else if (name == "direct1")
            s = direct1();
        else if (name == "straight1")
            s = straight1();
        else
            throw ScenarioError(fmt::format("unknown fixture '{}'", name));
        finalize(s);
        return s;
    }

    ScenarioSpec resolve_scenario(const std::string &name_or_path)
    {
        for (const auto &n : fixture_names())
            if (n == name_or_path)
                return fixture(n);
        return load_scenario(name_or_path);
    }
} // namespace cpmsim
