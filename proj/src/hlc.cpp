#include "cpmsim/hlc.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace cpmsim
{
    void PlanConfig::validate() const
    {
        if (node_dt <= 0 || horizon < node_dt || horizon % node_dt != 0)
            throw Error("planning horizon must be a positive multiple of the node spacing");
        if (!(max_accel > 0))
            throw Error("max_accel must be > 0");
        if (collision_dt <= 0)
            throw Error("collision sampling step must be > 0");
        if (!(inflation >= 0))
            throw Error("inflation must be >= 0");
        params.validate();
    }

    TrajectoryNode path_node(const PathFn &path, Time t, double s, double v)
    {
        const auto p = path(s).pose;
        return TrajectoryNode{t, p.x, p.y, v * std::cos(p.yaw), v * std::sin(p.yaw)};
    }

    LeaderPlan plan_leader(const PathFn &path, double s_end, double s0, double v0, double target_speed, Time now,
                           const PlanConfig &cfg)
    {
        const double dt = to_seconds(cfg.node_dt);
        const double dv = cfg.max_accel * dt;
        target_speed = std::clamp(target_speed, 0.0, cfg.params.max_speed);
        LeaderPlan plan;
        double s = s0, v = std::clamp(v0, 0.0, cfg.params.max_speed);
        for (int i = 1; i <= cfg.nodes(); ++i)
        {
            double want = target_speed;
            if (std::isfinite(s_end))
            {
                // Largest next speed from which the rest of the path still suffices to brake.
                const double a = cfg.max_accel;
                const double room = s_end - s - 0.5 * v * dt;
                want = std::min(want, room <= 0 ? 0.0 : 0.5 * (-a * dt + std::sqrt(a * a * dt * dt + 8 * a * room)));
            }
            double next_v = std::clamp(want, std::max(0.0, v - dv), v + dv);
            double next_s = s + 0.5 * (v + next_v) * dt;
            if (next_s >= s_end)
            {
                next_s = s_end;
                next_v = 0.0;
            }
            s = next_s;
            v = next_v;
            const Time t = now + i * cfg.node_dt;
            plan.nodes.push_back(path_node(path, t, s, v));
            plan.profile.push_back({t, s, v});
        }
        return plan;
    }

    std::vector<TrajectoryNode> plan_follower(const Trajectory &predecessor, Duration gap, Time now, const Pose &own,
                                              const PlanConfig &cfg)
    {
        const int n = cfg.nodes();
        std::vector<TrajectoryNode> nodes;
        nodes.reserve(static_cast<std::size_t>(n));
        const bool enough = !predecessor.empty() && predecessor.covers(now + cfg.node_dt - gap, now + n * cfg.node_dt - gap);
        for (int i = 1; i <= n; ++i)
        {
            const Time t = now + i * cfg.node_dt;
            if (!enough)
            {
                nodes.push_back(TrajectoryNode{t, own.x, own.y, 0.0, 0.0});
                continue;
            }
            const auto r = predecessor.interpolate(t - gap);
            nodes.push_back(TrajectoryNode{t, r.x, r.y, r.vx, r.vy});
        }
        return nodes;
    }

    std::vector<PoseSample> sample_trajectory(const Trajectory &traj, Time from, Time to, Duration dt)
    {
        std::vector<PoseSample> out;
        std::optional<double> last;
        std::size_t unknown_prefix = 0;
        for (Time t = from; t <= to; t += dt)
        {
            const auto r = traj.interpolate(t);
            PoseSample s;
            s.t = t;
            s.pose.x = r.x;
            s.pose.y = r.y;
            if (std::hypot(r.vx, r.vy) > 1e-6)
                last = std::atan2(r.vy, r.vx);
            if (last)
                s.pose.yaw = *last;
            else
            {
                s.heading_known = false;
                ++unknown_prefix;
            }
            out.push_back(s);
        }
        // Stopped at the start: take the first heading seen later.
        if (last && unknown_prefix > 0)
        {
            const double first = out[unknown_prefix].pose.yaw;
            for (std::size_t i = 0; i < unknown_prefix; ++i)
            {
                out[i].pose.yaw = first;
                out[i].heading_known = true;
            }
        }
        return out;
    }

    OrientedRect planning_footprint(const PoseSample &s, const PlanConfig &cfg)
    {
        if (s.heading_known)
            return footprint(s.pose, cfg.params, cfg.inflation);
        const double r = 0.5 * std::hypot(cfg.params.length, cfg.params.width) + cfg.inflation;
        return OrientedRect{Vec2{s.pose.x, s.pose.y}, 0.0, r, r};
    }

    std::optional<Time> collision_check(const Trajectory &a, const Trajectory &b, Time from, Time to,
                                        const PlanConfig &cfg)
    {
        if (a.empty() || b.empty())
            return std::nullopt;
        const Time lo = std::max({from, a.t_first(), b.t_first()});
        const Time hi = std::min({to, a.t_last(), b.t_last()});
        if (lo > hi)
            return std::nullopt;
        const auto sa = sample_trajectory(a, lo, hi, cfg.collision_dt);
        const auto sb = sample_trajectory(b, lo, hi, cfg.collision_dt);
        for (std::size_t i = 0; i < sa.size(); ++i)
        {
            const auto fa = planning_footprint(sa[i], cfg);
            const auto fb = planning_footprint(sb[i], cfg);
            if ((fa.center - fb.center).norm() > fa.circumradius() + fb.circumradius())
                continue;
            if (overlaps(fa, fb))
                return sa[i].t;
        }
        return std::nullopt;
    }

    const std::vector<double> &lambda_grid()
    {
        static const std::vector<double> grid = [] {
            std::vector<double> g;
            for (int i = 10; i >= 0; --i)
                g.push_back(i / 10.0);
            return g;
        }();
        return grid;
    }

    Trajectory candidate_trajectory(const PathFn &path, double s0, double v0, Time now, const LeaderPlan &plan,
                                    const PlanConfig &cfg)
    {
        std::vector<TrajectoryNode> nodes;
        nodes.reserve(plan.nodes.size() + 1);
        nodes.push_back(path_node(path, now, s0, v0));
        nodes.insert(nodes.end(), plan.nodes.begin(), plan.nodes.end());
        return Trajectory(std::move(nodes), cfg.params);
    }

    namespace
    {
        // Id of the first higher-priority vehicle hit, or 0.
        int first_conflict(const Trajectory &cand, std::span<const HigherPriority> higher, Time now,
                           const PlanConfig &cfg)
        {
            for (const auto &h : higher)
                if (h.trajectory && collision_check(cand, *h.trajectory, now, now + cfg.horizon, cfg))
                    return h.vehicle_id;
            return 0;
        }
    } // namespace

    PriorityResult plan_priority(const PathFn &path, double s_end, double s0, double v0, double ref_speed, Time now,
                                 std::span<const HigherPriority> higher, const PlanConfig &cfg)
    {
        PriorityResult r;
        for (const double lambda : lambda_grid())
        {
            auto plan = plan_leader(path, s_end, s0, v0, lambda * ref_speed, now, cfg);
            const int hit = first_conflict(candidate_trajectory(path, s0, v0, now, plan, cfg), higher, now, cfg);
            r.feasible.push_back(hit == 0);
            if (r.feasible.size() == 1)
                r.blocking_vehicle = hit;
            if (hit == 0)
            {
                r.lambda = lambda;
                r.plan = std::move(plan);
                return r;
            }
        }
        r.emergency = true;
        r.lambda = 0.0;
        r.plan = plan_leader(path, s_end, s0, v0, 0.0, now, cfg);
        return r;
    }

    bool stop_safe(const PathFn &path, double s_end, const ProfilePoint &current, Time now, const LeaderPlan &plan,
                   const Trajectory &other, const PlanConfig &cfg)
    {
        if (plan.profile.empty())
            return true;
        const auto &next = plan.profile.front();
        auto brake = plan_leader(path, s_end, next.s, next.v, 0.0, next.t, cfg);
        std::vector<TrajectoryNode> nodes{path_node(path, now, current.s, current.v), plan.nodes.front()};
        nodes.insert(nodes.end(), brake.nodes.begin(), brake.nodes.end());
        const Trajectory branch(std::move(nodes), cfg.params);
        return !collision_check(branch, other, now, now + cfg.horizon, cfg);
    }

    bool drives_ahead_of(const Trajectory &front, const Trajectory &back, Time now, const PlanConfig &cfg)
    {
        if (front.empty() || back.empty() || !front.covers(now, now) || !back.covers(now, now))
            return false;
        const auto f = sample_trajectory(front, now, now, cfg.collision_dt).front();
        const auto f_rect = planning_footprint(f, cfg);
        const auto b_now = sample_trajectory(back, now, now, cfg.collision_dt).front();
        if (overlaps(planning_footprint(b_now, cfg), f_rect))
            return false;
        const Time to = std::min(now + cfg.horizon, back.t_last());
        if (to <= now)
            return false;
        // Heading is compared where `back` passes closest to the front vehicle's position.
        const double reach = 2.0 * f_rect.circumradius();
        std::optional<PoseSample> closest;
        double best = reach;
        for (const auto &b : sample_trajectory(back, now + cfg.collision_dt, to, cfg.collision_dt))
        {
            const double d = std::hypot(b.pose.x - f.pose.x, b.pose.y - f.pose.y);
            if (!b.heading_known || d > best || !overlaps(planning_footprint(b, cfg), f_rect))
                continue;
            best = d;
            closest = b;
        }
        return closest && (!f.heading_known || std::abs(angle_diff(f.pose.yaw, closest->pose.yaw)) < 0.6);
    }

    std::set<std::pair<int, int>> lane_order(const std::map<int, const Trajectory *> &committed, Time now,
                                             const PlanConfig &cfg)
    {
        std::set<std::pair<int, int>> out;
        for (const auto &[front, ft] : committed)
            for (const auto &[back, bt] : committed)
                if (front != back && drives_ahead_of(*ft, *bt, now, cfg))
                    out.emplace(front, back);
        return out;
    }

    Verification verify_trajectory(const Trajectory &candidate, std::span<const HigherPriority> others,
                                   const PlanConfig &cfg)
    {
        const auto &nodes = candidate.nodes();
        if (nodes.size() < 2)
            return {false, "fewer than 2 nodes"};
        for (std::size_t i = 0; i < nodes.size(); ++i)
        {
            const auto check = validate_node(nodes[i], cfg.params);
            if (!check)
                return {false, fmt::format("node {}: {}", i, check.message)};
            if (i == 0)
                continue;
            const double dt = to_seconds(nodes[i].t - nodes[i - 1].t);
            const double accel = std::abs(nodes[i].speed() - nodes[i - 1].speed()) / dt;
            if (accel > cfg.max_accel * (1 + 1e-9) + 1e-9)
                return {false, fmt::format("node {}: acceleration {:.3f} exceeds {:.3f}", i, accel, cfg.max_accel)};
        }
        for (const auto &o : others)
            if (o.trajectory)
                if (const auto t = collision_check(candidate, *o.trajectory, nodes.front().t, nodes.back().t, cfg))
                    return {false, fmt::format("collides with vehicle {} at t = {:.3f} s", o.vehicle_id,
                                               to_seconds(*t - HighLevelController::kClockOffset))};
        return {};
    }

    struct HighLevelController::Vehicle
    {
        VehicleSpec spec;
        std::unique_ptr<Route> route;
        PathFn path;
        double s_end = std::numeric_limits<double>::infinity();
        std::map<Time, ProfilePoint> profile; // internal clock
        Trajectory committed;                 // internal clock
        int predecessor = 0;                  // platoon
        double lambda = 1.0;
        bool clearing = false;
        std::unique_ptr<RngStream> route_rng;
    };

    namespace
    {
        Time to_internal(Time t) { return t + HighLevelController::kClockOffset; }

        std::vector<TrajectoryNode> to_external(std::vector<TrajectoryNode> nodes)
        {
            for (auto &n : nodes)
                n.t -= HighLevelController::kClockOffset;
            return nodes;
        }

        // Constant-speed past along the path, ending at t = 0 (internal clock).
        Trajectory seeded_history(const PathFn &path, const VehicleSpec &v, Duration span, const PlanConfig &cfg)
        {
            std::vector<TrajectoryNode> nodes;
            const auto steps = span / cfg.node_dt;
            for (auto i = -steps; i <= 0; ++i)
            {
                const double t = to_seconds(i * cfg.node_dt);
                nodes.push_back(path_node(path, to_internal(i * cfg.node_dt), v.s + v.speed * t, v.speed));
            }
            return Trajectory(std::move(nodes), cfg.params);
        }
    } // namespace

    HighLevelController::HighLevelController(const ScenarioSpec &spec, std::vector<int> vehicle_ids)
        : spec_(spec), ids_(std::move(vehicle_ids))
    {
        cfg_.node_dt = spec.hlc_period();
        cfg_.horizon = seconds_to_nanos(spec.horizon);
        cfg_.max_accel = spec.max_accel;
        cfg_.validate();
        std::sort(ids_.begin(), ids_.end());
        if (ids_.empty())
            throw Error("planner without vehicles");

        const Map &map = builtin_map(spec.map);
        const Duration history =
            seconds_to_nanos(spec.gap_time) * static_cast<Duration>(spec.vehicles.size()) + 2 * cfg_.node_dt;
        auto make_path = [&](Vehicle &v) {
            if (v.spec.path.empty())
                return;
            Route::Chooser chooser;
            if (spec.kind == ScenarioKind::Intersection)
            {
                v.route_rng = std::make_unique<RngStream>(spec.seed, static_cast<std::uint64_t>(v.spec.id), "route");
                chooser = [rng = v.route_rng.get()](const Junction &j) { return choose_branch(j, *rng); };
            }
            v.route = std::make_unique<Route>(map, v.spec.path, std::move(chooser));
            v.path = [route = v.route.get()](double s) { return route->at(s); };
            const auto &geometry = map.path(v.spec.path);
            if (!geometry.closed() && !map.junction_after(v.spec.path))
                v.s_end = geometry.length();
        };

        for (const int id : ids_)
        {
            auto v = std::make_unique<Vehicle>();
            v->spec = spec.vehicle(id);
            make_path(*v);
            v->profile[to_internal(0)] = ProfilePoint{to_internal(0), v->spec.s, v->spec.speed};
            if (spec.kind == ScenarioKind::Platoon)
            {
                for (std::size_t i = 1; i < spec.vehicles.size(); ++i)
                    if (spec.vehicles[i].id == id)
                        v->predecessor = spec.vehicles[i - 1].id;
                v->committed = seeded_history(v->path, v->spec, history, cfg_);
            }
            vehicles_.emplace(id, std::move(v));
        }
        // Peers we depend on start with a constant-speed past, so the first
        // plans have something to check against.
        for (const auto &other : spec.vehicles)
        {
            if (vehicles_.count(other.id) || other.path.empty())
                continue;
            const bool needed = spec.kind == ScenarioKind::Intersection ||
                                (spec.kind == ScenarioKind::Platoon &&
                                 std::any_of(vehicles_.begin(), vehicles_.end(),
                                             [&](const auto &kv) { return kv.second->predecessor == other.id; }));
            if (!needed)
                continue;
            Vehicle tmp;
            tmp.spec = other;
            Route route(map, other.path, nullptr);
            PathFn path = [&route](double s) { return route.at(s); };
            const Duration span = spec.kind == ScenarioKind::Platoon ? history : cfg_.node_dt;
            // Short forward extension for the first period.
            auto past = seeded_history(path, other, span, cfg_);
            const auto &g = map.path(other.path);
            const double ahead = other.s + other.speed * to_seconds(cfg_.node_dt);
            if (g.closed() || ahead <= g.length())
                past = past.append_node(path_node(path, to_internal(cfg_.node_dt), ahead, other.speed), cfg_.params);
            peers_[other.id] = std::move(past);
        }
    }

    HighLevelController::~HighLevelController() = default;

    std::vector<std::string> HighLevelController::subscriptions() const
    {
        if (ids_.size() == spec_.vehicles.size())
            return {};
        if (spec_.kind == ScenarioKind::Intersection || spec_.kind == ScenarioKind::Platoon)
            return {topics::kAllCommitted};
        return {};
    }

    double HighLevelController::last_lambda(int vehicle_id) const
    {
        const auto it = vehicles_.find(vehicle_id);
        if (it == vehicles_.end())
            throw Error(fmt::format("planner does not handle vehicle {}", vehicle_id));
        return it->second->lambda;
    }

    int HighLevelController::top_id() const
    {
        return std::min_element(spec_.vehicles.begin(), spec_.vehicles.end(),
                                [](const auto &a, const auto &b) { return a.id < b.id; })
            ->id;
    }

    std::vector<HigherPriority> HighLevelController::higher_than(int vehicle_id) const
    {
        // The top-priority vehicle never yields, so everyone else always respects it.
        const int top = top_id();
        if (vehicle_id == top)
            return {};
        auto outranks = [&](int id) {
            if (id == top || lane_order_.contains({id, vehicle_id}))
                return true;
            if (lane_order_.contains({vehicle_id, id}))
                return false;
            return id < vehicle_id;
        };
        std::vector<HigherPriority> out;
        for (const auto &[id, v] : vehicles_)
            if (id != vehicle_id && outranks(id) && !v->committed.empty())
                out.push_back({id, &v->committed});
        for (const auto &[id, traj] : peers_)
            if (!vehicles_.count(id) && outranks(id))
                out.push_back({id, &traj});
        std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.vehicle_id < b.vehicle_id; });
        return out;
    }

    std::vector<Outgoing> HighLevelController::step(const std::vector<let::Envelope> &inputs, Time now)
    {
        for (const auto &e : inputs)
        {
            if (e.topic.rfind("hlc/committed/", 0) != 0)
                continue;
            auto msg = decode_committed_message(e.payload);
            if (vehicles_.count(msg.vehicle_id) || msg.nodes.empty())
                continue;
            for (auto &n : msg.nodes)
                n.t = to_internal(n.t);
            auto &peer = peers_[msg.vehicle_id];
            peer = peer.empty() ? Trajectory(std::move(msg.nodes), cfg_.params)
                                : peer.merged_with(msg.nodes, cfg_.params);
        }
        const Time keep = to_internal(now) - seconds_to_nanos(spec_.gap_time) * 2 -
                          seconds_to_nanos(spec_.gap_time) * static_cast<Duration>(spec_.vehicles.size()) -
                          seconds(1);
        for (auto &[id, traj] : peers_)
            if (traj.size() > 2 && traj.t_first() < keep)
                traj = traj.prune_before(keep);

        lane_order_.clear();
        if (spec_.kind == ScenarioKind::Intersection)
        {
            std::map<int, const Trajectory *> committed;
            for (const auto &[id, v] : vehicles_)
                if (!v->committed.empty())
                    committed[id] = &v->committed;
            for (const auto &[id, traj] : peers_)
                if (!vehicles_.count(id))
                    committed[id] = &traj;
            lane_order_ = lane_order(committed, to_internal(now), cfg_);
        }

        std::vector<Outgoing> out;
        for (const int id : ids_)
            plan_vehicle(*vehicles_.at(id), now, out);
        for (auto &[id, v] : vehicles_)
        {
            if (v->committed.size() > 2 && v->committed.t_first() < keep)
                v->committed = v->committed.prune_before(keep);
            v->profile.erase(v->profile.begin(), v->profile.lower_bound(keep));
        }
        return out;
    }

    void HighLevelController::plan_vehicle(Vehicle &v, Time now, std::vector<Outgoing> &out)
    {
        const int id = v.spec.id;
        if (spec_.kind == ScenarioKind::Direct)
        {
            out.push_back({topics::direct(id), encode(v.spec.direct)});
            return;
        }
        ++diag_.plans;
        const Time tau = to_internal(now);
        ProfilePoint current{tau, v.spec.s, v.spec.speed};
        if (const auto it = v.profile.find(tau); it != v.profile.end())
            current = it->second;
        else if (!v.profile.empty())
        {
            auto before = v.profile.upper_bound(tau);
            if (before != v.profile.begin())
                current = ProfilePoint{tau, std::prev(before)->second.s, 0.0};
        }

        std::vector<TrajectoryNode> nodes;
        std::vector<ProfilePoint> profile;
        const bool follower = spec_.kind == ScenarioKind::Platoon && v.predecessor != 0;
        if (follower)
        {
            const Trajectory *pred = nullptr;
            if (const auto it = vehicles_.find(v.predecessor); it != vehicles_.end())
                pred = &it->second->committed;
            else if (const auto p = peers_.find(v.predecessor); p != peers_.end())
                pred = &p->second;
            Pose own = v.spec.pose;
            if (!v.committed.empty() && v.committed.covers(tau, tau))
            {
                const auto r = v.committed.interpolate(tau);
                own = Pose{r.x, r.y, v.spec.pose.yaw};
            }
            static const Trajectory none;
            const Duration gap = seconds_to_nanos(spec_.gap_time);
            if (!pred || pred->empty() || !pred->covers(tau + cfg_.node_dt - gap, tau + cfg_.horizon - gap))
                ++diag_.held_followers;
            nodes = plan_follower(pred ? *pred : none, gap, tau, own, cfg_);
        }
        else
        {
            LeaderPlan plan;
            std::vector<HigherPriority> higher;
            bool emergency = false;
            if (spec_.kind == ScenarioKind::Intersection)
            {
                higher = higher_than(id);
                auto res = plan_priority(v.path, v.s_end, current.s, current.v, spec_.ref_speed, tau, higher, cfg_);
                double chosen = res.lambda;
                plan = res.plan;
                emergency = res.emergency;
                // The top vehicle never reacts: prefer a speed from which braking keeps clear of it.
                const auto top = std::find_if(higher.begin(), higher.end(),
                                              [&](const auto &h) { return h.vehicle_id == top_id(); });
                auto braking_clear = [&](const LeaderPlan &p) {
                    return top == higher.end() || stop_safe(v.path, v.s_end, current, tau, p, *top->trajectory, cfg_);
                };
                if (!emergency && !braking_clear(plan))
                {
                    for (const double lambda : lambda_grid())
                    {
                        if (lambda >= chosen)
                            continue;
                        auto slower = plan_leader(v.path, v.s_end, current.s, current.v, lambda * spec_.ref_speed,
                                                  tau, cfg_);
                        const auto cand = candidate_trajectory(v.path, current.s, current.v, tau, slower, cfg_);
                        if (first_conflict(cand, higher, tau, cfg_) == 0 && braking_clear(slower))
                        {
                            chosen = lambda;
                            plan = std::move(slower);
                            break;
                        }
                    }
                }
                // Conflict clearance waits one period before speeding up again.
                if (!emergency && chosen > v.lambda && !v.clearing)
                {
                    auto slower =
                        plan_leader(v.path, v.s_end, current.s, current.v, v.lambda * spec_.ref_speed, tau, cfg_);
                    const auto cand = candidate_trajectory(v.path, current.s, current.v, tau, slower, cfg_);
                    if (first_conflict(cand, higher, tau, cfg_) == 0)
                    {
                        chosen = v.lambda;
                        plan = std::move(slower);
                    }
                    v.clearing = true;
                }
                else
                    v.clearing = false;
                v.lambda = chosen;
                spdlog::trace("planner: vehicle {} t={:.2f} lambda {:.1f}{} blocked by {}", id, to_seconds(now), chosen,
                              emergency ? " (emergency)" : "", res.blocking_vehicle);
                if (chosen < 1.0)
                    ++diag_.yielding;
                if (emergency)
                    ++diag_.emergencies;
            }
            else
                plan = plan_leader(v.path, v.s_end, current.s, current.v, spec_.ref_speed, tau, cfg_);

            const auto cand = candidate_trajectory(v.path, current.s, current.v, tau, plan, cfg_);
            // An emergency stop is sent even though it cannot avoid the conflict.
            const auto check = verify_trajectory(cand, emergency ? std::span<const HigherPriority>{} : higher, cfg_);
            if (!check.ok)
            {
                ++diag_.verification_failures;
                return;
            }
            nodes = std::move(plan.nodes);
            profile = std::move(plan.profile);
        }

        for (const auto &p : profile)
            v.profile[p.t] = p;
        v.committed = v.committed.empty() ? Trajectory(nodes, cfg_.params) : v.committed.merged_with(nodes, cfg_.params);

        auto external = to_external(nodes);
        if (ids_.size() < spec_.vehicles.size() &&
            (spec_.kind == ScenarioKind::Intersection || spec_.kind == ScenarioKind::Platoon))
            out.push_back({topics::committed(id), encode(CommittedMessage{id, id, external})});
        out.push_back({topics::trajectory(id), encode(TrajectoryMessage{id, std::move(external)})});
    }
} // namespace cpmsim
