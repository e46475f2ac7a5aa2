#include "cpmsim/ips.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cpmsim
{
    std::array<double, 3> LedLayout::sides() const noexcept
    {
        return {(outer[0] - outer[1]).norm(), (outer[1] - outer[2]).norm(), (outer[2] - outer[0]).norm()};
    }

    void LedLayout::validate(const VehicleParams &params) const
    {
        const auto s = sides();
        for (int i = 0; i < 3; ++i)
            for (int j = i + 1; j < 3; ++j)
                if (std::abs(s[i] - s[j]) < separation_margin)
                    throw Error(fmt::format("LED layout sides {:.4f} and {:.4f} closer than margin {:.4f}", s[i],
                                            s[j], separation_margin));
        auto inside = [&](Vec2 p) {
            return std::abs(p.x) <= params.length / 2 && std::abs(p.y) <= params.width / 2;
        };
        for (const auto &p : outer)
            if (!inside(p))
                throw Error("outer LED outside the vehicle footprint");
        if (!inside(id_led))
            throw Error("identification LED outside the vehicle footprint");
    }

    bool flash_on(double frequency_hz, double phase, std::int64_t frame_index, double frame_rate)
    {
        const double cycles = frequency_hz * static_cast<double>(frame_index) / frame_rate + phase;
        // Half-cycle index; the small bias keeps exact boundaries on the "on" side.
        const auto half = static_cast<std::int64_t>(std::floor(2.0 * cycles + 1e-9));
        return half % 2 == 0;
    }

    FrameDetections project_leds(std::span<const VehicleMarker> markers, std::int64_t frame_index, double frame_rate,
                                 double sigma, const std::function<RngStream &(int)> &noise_for)
    {
        FrameDetections f;
        f.frame_index = frame_index;
        for (const auto &m : markers)
        {
            const Pose &com = m.truth.pose;
            const Vec2 origin = Vec2{com.x, com.y} - rotate(m.layout.com_offset, com.yaw);
            const Pose body{origin.x, origin.y, com.yaw};
            RngStream &rng = noise_for(m.truth.vehicle_id);
            for (const auto &led : m.layout.outer)
            {
                const Vec2 p = to_world(body, led);
                const double nx = rng.gaussian(sigma), ny = rng.gaussian(sigma);
                f.points.push_back({p.x + nx, p.y + ny});
            }
            const Vec2 p = to_world(body, m.layout.id_led);
            const double nx = rng.gaussian(sigma), ny = rng.gaussian(sigma);
            if (flash_on(m.flash_hz, m.flash_phase, frame_index, frame_rate))
                f.points.push_back({p.x + nx, p.y + ny});
        }
        return f;
    }

    std::vector<PointGroup> cluster_detections(const FrameDetections &frame, double max_vehicle_diameter)
    {
        const auto n = frame.points.size();
        std::vector<std::size_t> parent(n);
        std::iota(parent.begin(), parent.end(), 0);
        auto find = [&](std::size_t i) {
            while (parent[i] != i)
                i = parent[i] = parent[parent[i]];
            return i;
        };
        const double t2 = max_vehicle_diameter * max_vehicle_diameter;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
            {
                const Vec2 d = frame.points[i] - frame.points[j];
                if (d.dot(d) <= t2)
                {
                    const auto a = find(i), b = find(j);
                    if (a != b)
                        parent[std::max(a, b)] = std::min(a, b);
                }
            }
        // Groups ordered by their first point index.
        std::map<std::size_t, PointGroup> by_root;
        for (std::size_t i = 0; i < n; ++i)
            by_root[find(i)].points.push_back(frame.points[i]);
        std::vector<PointGroup> out;
        for (auto &[root, g] : by_root)
        {
            g.resolved = g.points.size() == 3 || g.points.size() == 4;
            out.push_back(std::move(g));
        }
        return out;
    }

    namespace
    {
        struct Labeling
        {
            std::array<int, 3> order{}; // observed index for layout LED 0, 1, 2
            double residual = 0.0;
        };

        // Best and second-best labelings of three observed points against the layout.
        std::pair<Labeling, double> label_triangle(const std::array<Vec2, 3> &pts, const LedLayout &layout)
        {
            const auto ref = layout.sides();
            std::array<int, 3> perm{0, 1, 2};
            Labeling best;
            best.residual = INFINITY;
            double second = INFINITY;
            do
            {
                const double s0 = (pts[perm[0]] - pts[perm[1]]).norm();
                const double s1 = (pts[perm[1]] - pts[perm[2]]).norm();
                const double s2 = (pts[perm[2]] - pts[perm[0]]).norm();
                const double r = std::max({std::abs(s0 - ref[0]), std::abs(s1 - ref[1]), std::abs(s2 - ref[2])});
                if (r < best.residual)
                {
                    second = best.residual;
                    best = {perm, r};
                }
                else if (r < second)
                    second = r;
            } while (std::next_permutation(perm.begin(), perm.end()));
            return {best, second};
        }

        Pose fit_rigid(const std::array<Vec2, 3> &body, const std::array<Vec2, 3> &world)
        {
            Vec2 cb{}, cw{};
            for (int i = 0; i < 3; ++i)
            {
                cb = cb + body[i];
                cw = cw + world[i];
            }
            cb = cb * (1.0 / 3);
            cw = cw * (1.0 / 3);
            double sc = 0, ss = 0;
            for (int i = 0; i < 3; ++i)
            {
                const Vec2 b = body[i] - cb, w = world[i] - cw;
                sc += b.dot(w);
                ss += b.cross(w);
            }
            const double yaw = std::atan2(ss, sc);
            const Vec2 t = cw - rotate(cb, yaw);
            return {t.x, t.y, normalize_yaw(yaw)};
        }
    } // namespace

    PoseSolution solve_pose(std::span<const Vec2> points, const LedLayout &layout, double max_residual)
    {
        PoseSolution sol;
        if (points.size() != 3 && points.size() != 4)
        {
            sol.reason = fmt::format("group has {} points", points.size());
            return sol;
        }
        // With four points, the id LED is the one whose removal leaves the best triangle.
        std::array<Vec2, 3> tri{};
        Labeling lab;
        double second = INFINITY;
        bool first = true;
        const std::size_t skip_options = points.size() == 4 ? 4 : 1;
        for (std::size_t skip = 0; skip < skip_options; ++skip)
        {
            std::array<Vec2, 3> cand{};
            std::size_t j = 0;
            for (std::size_t i = 0; i < points.size(); ++i)
                if (points.size() == 3 || i != skip)
                    cand[j++] = points[i];
            const auto [l, s] = label_triangle(cand, layout);
            if (first || l.residual < lab.residual)
            {
                second = std::min(s, first ? INFINITY : lab.residual);
                lab = l;
                tri = cand;
                first = false;
            }
            else
                second = std::min(second, l.residual);
        }
        sol.residual = lab.residual;
        sol.id_led_on = points.size() == 4;
        if (lab.residual > max_residual)
        {
            sol.reason = fmt::format("side mismatch {:.4f} m", lab.residual);
            return sol;
        }
        if (second - lab.residual < layout.separation_margin / 4)
        {
            sol.reason = fmt::format("ambiguous labeling ({:.4f} vs {:.4f})", lab.residual, second);
            return sol;
        }
        const std::array<Vec2, 3> world{tri[lab.order[0]], tri[lab.order[1]], tri[lab.order[2]]};
        const Pose origin = fit_rigid(layout.outer, world);
        const Vec2 com = to_world(origin, layout.com_offset);
        sol.pose = {com.x, com.y, origin.yaw};
        sol.ok = true;
        return sol;
    }

    Identification identify(std::span<const int> history, const std::vector<std::pair<double, int>> &table,
                            double frame_rate)
    {
        Identification id;
        if (history.empty() || table.empty())
            return id;
        const auto W = static_cast<double>(history.size());
        const double resolution = frame_rate / W;

        // Sort by frequency so the result does not depend on table order.
        auto sorted = table;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
            if (sorted[i + 1].first - sorted[i].first < resolution - 1e-12)
            {
                id.ambiguous_pair = {sorted[i].second, sorted[i + 1].second};
                return id;
            }

        double mean = 0;
        for (const int h : history)
            mean += h;
        mean /= W;
        std::vector<double> power;
        for (const auto &[f, vid] : sorted)
        {
            double re = 0, im = 0;
            for (std::size_t n = 0; n < history.size(); ++n)
            {
                const double w = 2 * kPi * f * static_cast<double>(n) / frame_rate;
                re += (history[n] - mean) * std::cos(w);
                im -= (history[n] - mean) * std::sin(w);
            }
            power.push_back(re * re + im * im);
        }
        std::size_t best = 0, runner_up = sorted.size();
        for (std::size_t i = 1; i < power.size(); ++i)
            if (power[i] > power[best])
                best = i;
        for (std::size_t i = 0; i < power.size(); ++i)
            if (i != best && (runner_up == sorted.size() || power[i] > power[runner_up]))
                runner_up = i;
        const double total = std::accumulate(power.begin(), power.end(), 0.0);
        if (total <= 0)
            return id;
        if (runner_up != sorted.size() && power[runner_up] > 0.8 * power[best])
        {
            id.ambiguous_pair = {sorted[best].second, sorted[runner_up].second};
            return id;
        }
        id.ok = true;
        id.vehicle_id = sorted[best].second;
        id.confidence = power[best] / total;
        return id;
    }

    IpsPipeline::IpsPipeline(IpsConfig config, std::map<int, LedLayout> layouts)
        : config_(std::move(config)), layouts_(std::move(layouts))
    {
        if (config_.latency_frames < 1)
            throw Error("IPS latency must be at least one frame");
        if (!(config_.dropout_probability >= 0 && config_.dropout_probability <= 1))
            throw Error("IPS dropout probability outside [0, 1]");
        for (const auto &[vid, layout] : layouts_)
        {
            layout.validate();
            table_.emplace_back(config_.flash.frequency(vid), vid);
        }
    }

    double IpsPipeline::flash_phase(int vehicle_id) const
    {
        return unit_from_hash(stream_key(config_.seed, static_cast<std::uint64_t>(vehicle_id), "ips.flash"));
    }

    RngStream &IpsPipeline::noise_stream(int vehicle_id)
    {
        auto it = noise_.find(vehicle_id);
        if (it == noise_.end())
            it = noise_.emplace(vehicle_id, RngStream(config_.seed, static_cast<std::uint64_t>(vehicle_id),
                                                      "ips.noise"))
                     .first;
        return it->second;
    }

    RngStream &IpsPipeline::dropout_stream(int vehicle_id)
    {
        auto it = dropout_.find(vehicle_id);
        if (it == dropout_.end())
            it = dropout_.emplace(vehicle_id, RngStream(config_.seed, static_cast<std::uint64_t>(vehicle_id),
                                                        "ips.dropout"))
                     .first;
        return it->second;
    }

    const LedLayout &IpsPipeline::layout_for(int vehicle_id) const
    {
        const auto it = layouts_.find(vehicle_id);
        return it == layouts_.end() ? default_layout_ : it->second;
    }

    std::vector<PoseObservation> IpsPipeline::process(std::int64_t frame_index, Time frame_time,
                                                      std::span<const VehicleTruth> truth)
    {
        ++stats_.frames;
        std::vector<VehicleMarker> markers;
        for (const auto &t : truth)
            markers.push_back({t, layout_for(t.vehicle_id), config_.flash.frequency(t.vehicle_id),
                               flash_phase(t.vehicle_id)});
        std::sort(markers.begin(), markers.end(),
                  [](const auto &a, const auto &b) { return a.truth.vehicle_id < b.truth.vehicle_id; });
        const auto frame = project_leds(markers, frame_index, config_.frame_rate, config_.noise_sigma,
                                        [this](int vid) -> RngStream & { return noise_stream(vid); });

        struct Solved
        {
            PoseSolution sol;
            std::vector<Vec2> points;
            bool matched = false;
        };
        std::vector<Solved> solved;
        for (const auto &g : cluster_detections(frame, config_.max_vehicle_diameter))
        {
            if (!g.resolved)
            {
                ++stats_.unresolved_groups;
                continue;
            }
            auto sol = solve_pose(g.points, default_layout_);
            if (!sol.ok)
            {
                ++stats_.unresolved_groups;
                continue;
            }
            solved.push_back({sol, g.points, false});
        }

        // Greedy nearest-neighbour association, closest pairs first.
        struct Pair
        {
            double d;
            std::size_t track, obs;
        };
        std::vector<Pair> pairs;
        for (std::size_t t = 0; t < tracks_.size(); ++t)
        {
            const auto &tr = tracks_[t];
            const double gap = static_cast<double>(frame_index - tr.last_seen);
            const Vec2 predicted = tr.position + tr.velocity * (gap / config_.frame_rate);
            const double yaw_gate = config_.track_yaw_gate + config_.track_yaw_rate * gap;
            for (std::size_t o = 0; o < solved.size(); ++o)
            {
                const auto &pose = solved[o].sol.pose;
                const double d = (predicted - Vec2{pose.x, pose.y}).norm();
                if (d <= config_.track_gate && std::abs(angle_diff(pose.yaw, tr.yaw)) <= yaw_gate)
                    pairs.push_back({d, t, o});
            }
        }
        std::sort(pairs.begin(), pairs.end(), [](const Pair &a, const Pair &b) {
            return std::tie(a.d, a.track, a.obs) < std::tie(b.d, b.track, b.obs);
        });
        std::vector<int> track_obs(tracks_.size(), -1);
        for (const auto &p : pairs)
        {
            if (track_obs[p.track] >= 0 || solved[p.obs].matched)
                continue;
            track_obs[p.track] = static_cast<int>(p.obs);
            solved[p.obs].matched = true;
        }

        const auto W = static_cast<std::size_t>(config_.window);
        auto push_sample = [W](std::deque<int> &h, int s) {
            h.push_back(s);
            while (h.size() > W)
                h.pop_front();
        };
        for (std::size_t t = 0; t < tracks_.size(); ++t)
        {
            if (track_obs[t] >= 0)
            {
                const auto &sol = solved[static_cast<std::size_t>(track_obs[t])].sol;
                const Vec2 p{sol.pose.x, sol.pose.y};
                const double gap = static_cast<double>(frame_index - tracks_[t].last_seen);
                tracks_[t].velocity = (p - tracks_[t].position) * (config_.frame_rate / gap);
                tracks_[t].position = p;
                tracks_[t].yaw = sol.pose.yaw;
                tracks_[t].last_seen = frame_index;
                push_sample(tracks_[t].history, sol.id_led_on ? 1 : -1);
            }
            else
                push_sample(tracks_[t].history, 0);
        }
        for (std::size_t o = 0; o < solved.size(); ++o)
            if (!solved[o].matched)
            {
                Track tr;
                tr.position = {solved[o].sol.pose.x, solved[o].sol.pose.y};
                tr.yaw = solved[o].sol.pose.yaw;
                tr.last_seen = frame_index;
                tr.history.push_back(solved[o].sol.id_led_on ? 1 : -1);
                tracks_.push_back(std::move(tr));
                track_obs.push_back(static_cast<int>(o));
            }
        // Drop tracks that have been lost for too long.
        for (std::size_t t = tracks_.size(); t-- > 0;)
            if (frame_index - tracks_[t].last_seen > config_.track_timeout_frames)
            {
                tracks_.erase(tracks_.begin() + static_cast<long>(t));
                track_obs.erase(track_obs.begin() + static_cast<long>(t));
            }

        std::map<int, std::pair<double, PoseObservation>> by_id;
        for (std::size_t t = 0; t < tracks_.size(); ++t)
        {
            auto &tr = tracks_[t];
            if (tr.history.size() >= W)
            {
                const std::vector<int> h(tr.history.begin(), tr.history.end());
                const auto id = identify(h, table_, config_.frame_rate);
                if (id.ok)
                    tr.vehicle_id = id.vehicle_id;
            }
            if (track_obs[t] < 0)
                continue;
            if (tr.vehicle_id == 0)
            {
                ++stats_.unidentified;
                continue;
            }
            const auto &obs = solved[static_cast<std::size_t>(track_obs[t])];
            auto pose = obs.sol.pose;
            const auto &layout = layout_for(tr.vehicle_id);
            if (layout.com_offset != default_layout_.com_offset || layout.outer != default_layout_.outer)
            {
                const auto own = solve_pose(obs.points, layout);
                if (!own.ok)
                {
                    ++stats_.unresolved_groups;
                    continue;
                }
                pose = own.pose;
            }
            const double conf = static_cast<double>(tr.history.size());
            auto it = by_id.find(tr.vehicle_id);
            if (it == by_id.end() || conf > it->second.first)
                by_id[tr.vehicle_id] = {conf, PoseObservation{tr.vehicle_id, pose, frame_index, frame_time}};
        }

        std::vector<PoseObservation> now_obs;
        for (auto &[vid, entry] : by_id)
        {
            if (dropout_stream(vid).bernoulli(config_.dropout_probability))
            {
                ++stats_.dropped;
                continue;
            }
            now_obs.push_back(entry.second);
        }
        pending_.emplace_back(frame_index + config_.latency_frames - 1, std::move(now_obs));

        std::vector<PoseObservation> out;
        while (!pending_.empty() && pending_.front().first <= frame_index)
        {
            for (auto &o : pending_.front().second)
                out.push_back(o);
            pending_.pop_front();
        }
        stats_.observations += out.size();
        return out;
    }
} // namespace cpmsim
