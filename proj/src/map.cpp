#include "cpmsim/map.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace cpmsim
{
    PathGeometry::PathGeometry(std::string id, std::vector<PathSample> samples, bool closed)
        : id_(std::move(id)), samples_(std::move(samples)), closed_(closed)
    {
        if (samples_.size() < 2)
            throw PathError(fmt::format("path '{}' needs at least 2 samples", id_));
        if (samples_.front().s != 0.0)
            throw PathError(fmt::format("path '{}' must start at s = 0", id_));
        for (std::size_t i = 1; i < samples_.size(); ++i)
            if (!(samples_[i].s > samples_[i - 1].s))
                throw PathError(fmt::format("path '{}': s not increasing at sample {}", id_, i));
    }

    PathPoint path_point(const PathGeometry &path, double s)
    {
        const auto &samples = path.samples();
        const double length = path.length();
        if (path.closed())
        {
            s = std::fmod(s, length);
            if (s < 0)
                s += length;
        }
        else if (s < -1e-9 || s > length + 1e-9)
            throw PathError(fmt::format("s = {} outside path '{}' of length {}", s, path.id(), length));
        s = std::clamp(s, 0.0, length);

        auto it = std::upper_bound(samples.begin(), samples.end(), s,
                                   [](double v, const PathSample &p) { return v < p.s; });
        if (it == samples.end())
            --it;
        if (it == samples.begin())
            ++it;
        const PathSample &a = *(it - 1);
        const PathSample &b = *it;
        const double u = (s - a.s) / (b.s - a.s);
        PathPoint out;
        out.pose.x = a.x + u * (b.x - a.x);
        out.pose.y = a.y + u * (b.y - a.y);
        out.pose.yaw = normalize_yaw(a.heading + u * angle_diff(b.heading, a.heading));
        out.curvature = a.curvature + u * (b.curvature - a.curvature);
        return out;
    }

    double project_onto(const PathGeometry &path, Vec2 p, double hint, double window)
    {
        const auto &samples = path.samples();
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        auto consider = [&](std::size_t i) {
            const double d = std::hypot(samples[i].x - p.x, samples[i].y - p.y);
            if (d < best)
            {
                best = d;
                best_i = i;
            }
        };
        if (window <= 0.0 || window * 2 >= path.length())
        {
            for (std::size_t i = 0; i < samples.size(); ++i)
                consider(i);
            return samples[best_i].s;
        }
        // Windowed search on the sample grid, wrapping for closed paths.
        const double spacing = samples[1].s - samples[0].s;
        const auto n = static_cast<std::int64_t>(samples.size());
        const auto lo = static_cast<std::int64_t>(std::floor((hint - window) / spacing));
        const auto hi = static_cast<std::int64_t>(std::ceil((hint + window) / spacing));
        for (std::int64_t k = lo; k <= hi; ++k)
        {
            std::int64_t i = k;
            if (path.closed())
                i = ((k % (n - 1)) + (n - 1)) % (n - 1);
            else if (i < 0 || i >= n)
                continue;
            consider(static_cast<std::size_t>(i));
        }
        return samples[best_i].s;
    }

    std::string SmoothnessReport::describe() const
    {
        if (ok())
            return "ok";
        std::string out;
        if (!curvature_ok)
            out += fmt::format("curvature {:.4f} exceeds {:.4f} at s = {:.3f}; ", max_abs_curvature, bound,
                               max_curvature_s);
        if (!continuity_ok)
            out += fmt::format("curvature jump {:.4f} at s = {:.3f}; ", max_curvature_jump, max_jump_s);
        if (!heading_ok)
            out += fmt::format("heading mismatch {:.4f} rad at s = {:.3f}; ", max_heading_error, max_heading_error_s);
        return out;
    }

    SmoothnessReport check_smoothness(const PathGeometry &path, const VehicleParams &params, double jump_threshold,
                                      double heading_tolerance)
    {
        SmoothnessReport r;
        r.bound = params.max_curvature();
        const auto &samples = path.samples();
        for (std::size_t i = 0; i < samples.size(); ++i)
        {
            const auto &p = samples[i];
            if (std::abs(p.curvature) > r.max_abs_curvature)
            {
                r.max_abs_curvature = std::abs(p.curvature);
                r.max_curvature_s = p.s;
            }
            if (i == 0)
                continue;
            const auto &q = samples[i - 1];
            const double jump = std::abs(p.curvature - q.curvature);
            if (jump > r.max_curvature_jump)
            {
                r.max_curvature_jump = jump;
                r.max_jump_s = p.s;
            }
            // Chord direction should match the mean tangent direction.
            const double chord = std::atan2(p.y - q.y, p.x - q.x);
            const double mean_heading = q.heading + 0.5 * angle_diff(p.heading, q.heading);
            const double err = std::abs(angle_diff(chord, mean_heading));
            if (err > r.max_heading_error)
            {
                r.max_heading_error = err;
                r.max_heading_error_s = p.s;
            }
        }
        r.curvature_ok = r.max_abs_curvature <= r.bound;
        r.continuity_ok = r.max_curvature_jump <= jump_threshold;
        r.heading_ok = r.max_heading_error <= heading_tolerance;
        return r;
    }

    PathBuilder::PathBuilder(Pose start) : start_(start), heading_(start.yaw) {}

    PathBuilder &PathBuilder::clothoid(double k0, double k1, double length)
    {
        if (!(length >= 0) || !std::isfinite(k0) || !std::isfinite(k1))
            throw PathError("invalid segment");
        if (length == 0)
            return *this;
        segments_.push_back({length_, length, k0, k1, heading_});
        length_ += length;
        heading_ += 0.5 * (k0 + k1) * length;
        return *this;
    }

    PathBuilder &PathBuilder::straight(double length) { return clothoid(0.0, 0.0, length); }

    PathBuilder &PathBuilder::arc(double curvature, double length) { return clothoid(curvature, curvature, length); }

    PathBuilder &PathBuilder::corner(double angle, double kappa, double ramp)
    {
        const double sign = angle < 0 ? -1.0 : 1.0;
        const double ramp_turn = kappa * ramp; // both clothoids together
        const double arc_turn = std::abs(angle) - ramp_turn;
        if (!(kappa > 0) || !(ramp >= 0) || arc_turn < -1e-12)
            throw PathError(fmt::format("corner of {} rad cannot be built with kappa {} and ramp {}", angle, kappa,
                                        ramp));
        clothoid(0.0, sign * kappa, ramp);
        arc(sign * kappa, std::max(0.0, arc_turn) / kappa);
        clothoid(sign * kappa, 0.0, ramp);
        return *this;
    }

    double PathBuilder::heading_at(const Segment &seg, double u) const noexcept
    {
        return seg.h0 + seg.k0 * u + 0.5 * (seg.k1 - seg.k0) * u * u / seg.length;
    }

    PathGeometry PathBuilder::build(std::string id, bool closed, double spacing) const
    {
        if (segments_.empty())
            throw PathError(fmt::format("path '{}' has no segments", id));
        if (!(spacing > 0))
            throw PathError("spacing must be > 0");

        // Sample positions: the uniform grid plus the exact end point.
        std::vector<double> grid;
        const auto n = static_cast<std::size_t>(std::floor(length_ / spacing));
        for (std::size_t i = 0; i <= n; ++i)
            grid.push_back(static_cast<double>(i) * spacing);
        if (length_ - grid.back() > spacing * 1e-6)
            grid.push_back(length_);
        else
            grid.back() = length_;

        std::size_t seg = 0;
        auto segment_for = [&](double s) -> const Segment & {
            while (seg + 1 < segments_.size() && s > segments_[seg].s0 + segments_[seg].length)
                ++seg;
            return segments_[seg];
        };
        auto heading = [&](double s) {
            const Segment &g = segment_for(s);
            return heading_at(g, std::clamp(s - g.s0, 0.0, g.length));
        };
        auto curvature = [&](double s) {
            const Segment &g = segment_for(s);
            const double u = std::clamp(s - g.s0, 0.0, g.length);
            return g.k0 + (g.k1 - g.k0) * u / g.length;
        };

        std::vector<PathSample> samples;
        samples.reserve(grid.size());
        double x = start_.x, y = start_.y;
        for (std::size_t i = 0; i < grid.size(); ++i)
        {
            if (i > 0)
            {
                // Simpson integration of the unit tangent between grid points.
                const double a = grid[i - 1], b = grid[i];
                const int sub = std::max(1, static_cast<int>(std::ceil((b - a) / 0.0005)));
                const double h = (b - a) / sub;
                for (int k = 0; k < sub; ++k)
                {
                    const double s0 = a + h * k;
                    const double h0 = heading(s0), hm = heading(s0 + 0.5 * h), h1 = heading(s0 + h);
                    x += h / 6.0 * (std::cos(h0) + 4 * std::cos(hm) + std::cos(h1));
                    y += h / 6.0 * (std::sin(h0) + 4 * std::sin(hm) + std::sin(h1));
                }
            }
            samples.push_back({grid[i], x, y, normalize_yaw(heading(grid[i])), curvature(grid[i])});
        }

        if (closed)
        {
            const auto &f = samples.front();
            auto &l = samples.back();
            const double gap = std::hypot(l.x - f.x, l.y - f.y);
            const double turn = std::abs(angle_diff(l.heading, f.heading));
            if (gap > 1e-6 || turn > 1e-6)
                throw PathError(fmt::format("path '{}' does not close (gap {:.3g} m, {:.3g} rad)", id, gap, turn));
            l.x = f.x;
            l.y = f.y;
            l.heading = f.heading;
        }
        return PathGeometry(std::move(id), std::move(samples), closed);
    }

    double corner_inset(double kappa, double ramp)
    {
        const auto path = PathBuilder(Pose{}).corner(kPi / 2, kappa, ramp).build("corner", false, 0.001);
        return path.samples().back().x;
    }

    const std::string &choose_branch(const Junction &junction, RngStream &rng)
    {
        if (junction.branches.empty())
            throw Error(fmt::format("junction '{}' has no branches", junction.id));
        return junction.branches[rng.below(junction.branches.size())];
    }

    const PathGeometry &Map::path(std::string_view path_id) const
    {
        const auto it = paths.find(std::string(path_id));
        if (it == paths.end())
            throw Error(fmt::format("map '{}' has no path '{}'", id, path_id));
        return it->second;
    }

    const Junction *Map::junction_after(std::string_view path_id) const
    {
        for (const auto &j : junctions)
            for (const auto &e : j.entry_paths)
                if (e == path_id)
                    return &j;
        return nullptr;
    }

    bool Map::contains(Vec2 p, double margin) const noexcept
    {
        return p.x >= margin && p.y >= margin && p.x <= width - margin && p.y <= height - margin;
    }

    namespace
    {
        constexpr Vec2 kCenter{2.25, 2.0};
        constexpr double kCornerKappa = 2.8;
        constexpr double kCornerRamp = 0.2;

        void add(Map &m, PathGeometry p)
        {
            auto id = p.id();
            m.paths.emplace(std::move(id), std::move(p));
        }

        Map make_outer_circle()
        {
            Map m;
            m.id = "outer_circle";
            const double r = 1.8;
            add(m, PathBuilder(Pose{kCenter.x, kCenter.y - r, 0.0}).arc(1.0 / r, 2 * kPi * r).build("circle", true));
            return m;
        }

        Map make_platoon_loop()
        {
            Map m;
            m.id = "platoon_loop";
            const double half_w = 1.8, half_h = 1.5;
            const double d = corner_inset(kCornerKappa, kCornerRamp);
            PathBuilder b(Pose{kCenter.x, kCenter.y - half_h, 0.0});
            b.straight(half_w - d);
            for (int side = 0; side < 4; ++side)
            {
                b.corner(kPi / 2, kCornerKappa, kCornerRamp);
                const double run = (side % 2 == 0 ? 2 * half_h : 2 * half_w) - 2 * d;
                b.straight(side == 3 ? half_w - d : run);
            }
            add(m, b.build("loop", true));
            return m;
        }

        Map make_straight()
        {
            Map m;
            m.id = "straight";
            add(m, PathBuilder(Pose{0.25, kCenter.y, 0.0}).straight(4.0).build("line", false));
            return m;
        }

        // Four-way crossing with a right-turning loop ("petal") in every
        // quadrant that brings each exit back to the next entry.
        Map make_intersection()
        {
            Map m;
            m.id = "intersection";
            const double a = 0.6;  // entry/exit distance from the center
            const double w = 0.12; // lane offset from the road axis
            const double b = 1.6;  // outer extent of the petals
            const double d = corner_inset(kCornerKappa, kCornerRamp);
            const double l1 = b - a - d;
            const double l2 = b - w - 2 * d;
            const double l3 = l1 + a - w - d;
            const double l4 = l2 + d - (a - w);
            const char *sides[4] = {"W", "S", "E", "N"};

            auto petal = [&](PathBuilder &pb) {
                pb.straight(l1).corner(-kPi / 2, kCornerKappa, kCornerRamp);
                pb.straight(l2).corner(-kPi / 2, kCornerKappa, kCornerRamp);
                pb.straight(l3).corner(-kPi / 2, kCornerKappa, kCornerRamp);
                pb.straight(l4);
            };

            for (int j = 0; j < 4; ++j)
            {
                const double rot = j * kPi / 2;
                const Vec2 p = kCenter + rotate(Vec2{-a, -w}, rot);
                Junction junction;
                junction.id = sides[j];
                junction.pose = Pose{p.x, p.y, normalize_yaw(rot)};

                PathBuilder straight(junction.pose);
                straight.straight(2 * a);
                petal(straight);
                PathBuilder left(junction.pose);
                left.straight(a + w - d).corner(kPi / 2, kCornerKappa, kCornerRamp).straight(a + w - d);
                petal(left);
                PathBuilder right(junction.pose);
                right.straight(a - w - d).corner(-kPi / 2, kCornerKappa, kCornerRamp).straight(a - w - d);
                petal(right);

                const std::string base = sides[j];
                add(m, straight.build(base + ".straight", false));
                add(m, left.build(base + ".left", false));
                add(m, right.build(base + ".right", false));
                junction.branches = {base + ".straight", base + ".left", base + ".right"};
                m.junctions.push_back(std::move(junction));
            }
            // Straight leads to the next junction counter-clockwise, left to the
            // opposite one, right back to the same one.
            for (int j = 0; j < 4; ++j)
            {
                auto &entries = m.junctions[static_cast<std::size_t>(j)].entry_paths;
                entries.push_back(std::string(sides[(j + 3) % 4]) + ".straight");
                entries.push_back(std::string(sides[(j + 2) % 4]) + ".left");
                entries.push_back(std::string(sides[j]) + ".right");
            }
            return m;
        }

        const std::map<std::string, Map, std::less<>> &registry()
        {
            static const std::map<std::string, Map, std::less<>> maps = [] {
                std::map<std::string, Map, std::less<>> out;
                for (auto m : {make_outer_circle(), make_platoon_loop(), make_intersection(), make_straight()})
                {
                    auto id = m.id;
                    out.emplace(std::move(id), std::move(m));
                }
                return out;
            }();
            return maps;
        }
    } // namespace

    std::vector<std::string> builtin_map_ids()
    {
        std::vector<std::string> ids;
        for (const auto &[id, _] : registry())
            ids.push_back(id);
        return ids;
    }

    const Map &builtin_map(std::string_view id)
    {
        const auto &maps = registry();
        const auto it = maps.find(id);
        if (it == maps.end())
            throw Error(fmt::format("unknown map '{}'", id));
        return it->second;
    }

    Route::Route(const Map &map, std::string first_path, Chooser chooser) : map_(&map), chooser_(std::move(chooser))
    {
        const auto &p = map.path(first_path);
        closed_ = p.closed();
        paths_.push_back(std::move(first_path));
        starts_.push_back(0.0);
        end_ = p.length();
    }

    void Route::extend_to(double s)
    {
        if (closed_)
            return;
        while (s > end_)
        {
            const Junction *j = map_->junction_after(paths_.back());
            if (!j)
                throw PathError(fmt::format("route ends at s = {} after path '{}'", end_, paths_.back()));
            if (!chooser_)
                throw PathError("route needs a branch chooser");
            auto next = chooser_(*j);
            const double len = map_->path(next).length();
            paths_.push_back(std::move(next));
            starts_.push_back(end_);
            end_ += len;
        }
    }

    std::pair<std::string, double> Route::locate(double s)
    {
        if (closed_)
            return {paths_.front(), s};
        if (s < 0)
            throw PathError(fmt::format("negative route position {}", s));
        extend_to(s);
        auto it = std::upper_bound(starts_.begin(), starts_.end(), s);
        const auto i = static_cast<std::size_t>(std::distance(starts_.begin(), it)) - 1;
        return {paths_[i], s - starts_[i]};
    }

    PathPoint Route::at(double s)
    {
        const auto [id, local] = locate(s);
        return path_point(map_->path(id), local);
    }
} // namespace cpmsim
