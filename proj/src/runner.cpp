#include "cpmsim/runner.hpp"
#include "cpmsim/geometry.hpp"
#include "external_hub.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace cpmsim
{
    VehicleState initial_state(const VehicleSpec &v, const VehicleParams &params)
    {
        VehicleState s;
        s.pose = v.pose;
        s.speed = v.speed;
        if (v.mode == ControlMode::Direct)
        {
            s.steering_angle = v.direct.steering_angle;
            s.yaw_rate = v.speed * std::tan(s.steering_angle) / params.wheelbase;
        }
        return s;
    }

    namespace
    {
        ActuatorCommand start_command(const VehicleSpec &v)
        {
            if (v.mode == ControlMode::Direct)
                return v.direct;
            return {MotorModel{}.steady_state_input(v.speed), 0.0};
        }
    } // namespace

    LlcConfig llc_config(const ScenarioSpec &spec, const VehicleSpec &v)
    {
        LlcConfig c;
        c.params.vehicle_id = v.id;
        c.noise = spec.sensors.noise();
        c.initial_command = start_command(v);
        return c;
    }

    MlcConfig mlc_config(const ScenarioSpec &spec, const VehicleSpec &v)
    {
        MlcConfig c;
        c.params.vehicle_id = v.id;
        c.mpc.control_period = spec.base_period();
        c.mode = v.mode;
        c.initial_command = start_command(v);
        return c;
    }

    IpsConfig ips_config(const ScenarioSpec &spec)
    {
        IpsConfig c;
        c.frame_rate = 1000.0 / spec.base_period_ms;
        c.noise_sigma = spec.ips.noise_sigma;
        c.dropout_probability = spec.ips.dropout;
        c.latency_frames = spec.ips.latency_frames;
        c.flash.frame_rate = c.frame_rate;
        c.seed = spec.seed;
        return c;
    }

    VehicleStack make_vehicle_stack(const ScenarioSpec &spec, int vehicle_id)
    {
        const auto &v = spec.vehicle(vehicle_id);
        const auto lc = llc_config(spec, v);
        return VehicleStack{LowLevelController(initial_state(v, lc.params), lc, spec.seed),
                            MidLevelController(v.pose, v.speed, mlc_config(spec, v))};
    }

    // ---------------------------------------------------------------- metrics

    const VehicleMetrics &Metrics::vehicle(int id) const
    {
        for (const auto &v : vehicles)
            if (v.vehicle_id == id)
                return v;
        throw Error(fmt::format("no metrics for vehicle {}", id));
    }

    double Metrics::mean_tracking_rms(bool external) const
    {
        double sum = 0.0;
        int n = 0;
        for (const auto &v : vehicles)
            if (v.external == external && v.samples > 0)
            {
                sum += v.tracking_rms;
                ++n;
            }
        return n ? sum / n : 0.0;
    }

    Metrics compute_metrics(const Trace &trace, const ScenarioSpec &spec)
    {
        Metrics m;
        m.periods = static_cast<std::int64_t>(trace.periods.size());
        const double dt = to_seconds(spec.base_period());
        m.simulated_seconds = static_cast<double>(m.periods) * dt;
        const VehicleParams params;

        struct Acc
        {
            double sq = 0, lat_sq = 0, max = 0;
            std::uint64_t n = 0, starved = 0;
        };
        std::map<int, Acc> acc;

        const PathGeometry *loop = nullptr;
        if (spec.kind == ScenarioKind::Platoon)
        {
            loop = &builtin_map(spec.map).path(spec.vehicles.front().path);
            m.gap_reference = spec.ref_speed * spec.gap_time;
        }
        double gap_sum = 0.0;

        std::set<std::pair<int, int>> touching;
        m.min_distance = std::numeric_limits<double>::infinity();
        std::map<int, OrientedRect> rects;
        std::map<int, double> along;
        for (const auto &p : trace.periods)
        {
            rects.clear();
            for (const auto &v : p.vehicles)
                rects.emplace(v.vehicle_id, footprint(v.truth.pose, params));
            std::set<std::pair<int, int>> now_touching;
            for (auto a = rects.begin(); a != rects.end(); ++a)
                for (auto b = std::next(a); b != rects.end(); ++b)
                {
                    const double d = distance(a->second, b->second);
                    m.min_distance = std::min(m.min_distance, d);
                    if (overlaps(a->second, b->second))
                    {
                        now_touching.emplace(a->first, b->first);
                        if (!touching.contains({a->first, b->first}))
                            m.collisions.push_back({p.period, a->first, b->first});
                    }
                }
            touching = std::move(now_touching);

            const double t = static_cast<double>(p.period) * dt;
            if (t < spec.settle_time)
                continue;
            for (const auto &v : p.vehicles)
            {
                auto &a = acc[v.vehicle_id];
                if (!v.fused)
                    continue;
                if (v.fused->flags & kFlagStarved)
                    ++a.starved;
                if (!v.fused->has_reference)
                    continue;
                const double ex = v.truth.pose.x - v.fused->ref_x;
                const double ey = v.truth.pose.y - v.fused->ref_y;
                const double e2 = ex * ex + ey * ey;
                const double lat = -std::sin(v.truth.pose.yaw) * ex + std::cos(v.truth.pose.yaw) * ey;
                a.sq += e2;
                a.lat_sq += lat * lat;
                a.max = std::max(a.max, std::sqrt(e2));
                ++a.n;
            }
            if (loop)
            {
                along.clear();
                for (const auto &v : p.vehicles)
                    along[v.vehicle_id] = project_onto(*loop, {v.truth.pose.x, v.truth.pose.y});
                const double len = loop->length();
                for (std::size_t i = 1; i < spec.vehicles.size(); ++i)
                {
                    const auto pred = along.find(spec.vehicles[i - 1].id);
                    const auto self = along.find(spec.vehicles[i].id);
                    if (pred == along.end() || self == along.end())
                        continue;
                    const double gap = std::fmod(pred->second - self->second + len, len);
                    gap_sum += gap;
                    m.gap_max_deviation =
                        std::max(m.gap_max_deviation, std::abs(gap - m.gap_reference) / m.gap_reference);
                    ++m.gap_samples;
                }
            }
        }
        if (!std::isfinite(m.min_distance))
            m.min_distance = 0.0;
        if (m.gap_samples)
            m.gap_mean = gap_sum / static_cast<double>(m.gap_samples);

        for (const auto &v : spec.vehicles)
        {
            VehicleMetrics vm;
            vm.vehicle_id = v.id;
            vm.external = v.external;
            if (auto it = acc.find(v.id); it != acc.end())
            {
                const auto &a = it->second;
                vm.samples = a.n;
                vm.starved_periods = a.starved;
                vm.max_tracking_error = a.max;
                if (a.n)
                {
                    vm.tracking_rms = std::sqrt(a.sq / static_cast<double>(a.n));
                    vm.lateral_rms = std::sqrt(a.lat_sq / static_cast<double>(a.n));
                }
            }
            m.vehicles.push_back(vm);
        }

        for (const auto &p : trace.periods)
        {
            m.deadline_misses += p.deadline_misses;
            m.max_period_wall = std::max(m.max_period_wall, to_seconds(p.period_wall_ns));
            m.max_hlc_wall = std::max(m.max_hlc_wall, to_seconds(p.max_hlc_wall_ns));
            m.max_mlc_wall = std::max(m.max_mlc_wall, to_seconds(p.max_mlc_wall_ns));
        }
        if (!trace.periods.empty())
        {
            m.published = trace.periods.back().published;
            m.lost = trace.periods.back().lost;
        }
        return m;
    }

    std::vector<Criterion> evaluate(const ScenarioSpec &spec, const Metrics &m)
    {
        std::vector<Criterion> out;
        {
            std::string detail = fmt::format("{} collisions", m.collisions.size());
            if (spec.vehicles.size() > 1)
                detail += fmt::format(", min distance {:.4f} m", m.min_distance);
            if (!m.collisions.empty())
            {
                const auto &c = m.collisions.front();
                detail += fmt::format(", first: vehicles {} and {} at t={:.2f} s", c.a, c.b,
                                      to_seconds(c.period * spec.base_period()));
            }
            out.push_back({"no collisions", m.collisions.empty(), detail});
        }
        if (spec.kind == ScenarioKind::Platoon)
            out.push_back({"platoon gap",
                           m.gap_samples > 0 && m.gap_max_deviation <= 0.10,
                           fmt::format("mean {:.4f} m, max deviation {:.2f}% of {:.3f} m over {} samples", m.gap_mean,
                                       100.0 * m.gap_max_deviation, m.gap_reference, m.gap_samples)});
        if (spec.has_external())
        {
            const double ext = m.mean_tracking_rms(true), in = m.mean_tracking_rms(false);
            out.push_back({"external tracking", ext <= 2.0 * in,
                           fmt::format("external RMS {:.4f} m, internal RMS {:.4f} m", ext, in)});
        }
        else
        {
            const double budget = to_seconds(spec.hlc_period());
            out.push_back({"deadlines", m.deadline_misses == 0 && m.max_period_wall < budget,
                           fmt::format("{} misses, busiest period {:.2f} ms (budget {:.0f} ms)", m.deadline_misses,
                                       1e3 * m.max_period_wall, 1e3 * budget)});
        }
        return out;
    }

    // ----------------------------------------------------------------- runner

    namespace
    {
        class Recorder
        {
        public:
            Recorder(const ScenarioSpec &spec, const let::Scheduler &sched, bool keep)
                : spec_(spec), sched_(sched), keep_(keep)
            {
                for (const auto &v : spec.vehicles)
                {
                    truth_[v.id] = initial_state(v);
                    digests_[v.id] = 0;
                }
            }

            /// Ground truth at the start of the current period; written only at barriers.
            const std::map<int, VehicleState> &truth() const noexcept { return truth_; }

            void depart(int vehicle_id) { departed_.insert(vehicle_id); }

            void on_barrier(const let::BarrierInfo &info)
            {
                PeriodRecord r;
                r.period = info.completed_period;
                std::map<int, VehicleRecord> recs;
                for (const auto &[id, s] : truth_)
                    if (!departed_.contains(id))
                        recs[id] = VehicleRecord{id, s, std::nullopt, std::nullopt, 0};
                std::map<int, VehicleState> next = truth_;
                for (const auto &e : info.published)
                {
                    const int vid = topics::vehicle_of(e.topic);
                    auto it = recs.find(vid);
                    if (it == recs.end())
                        continue;
                    if (e.topic == topics::truth(vid))
                        next[vid] = decode_vehicle_state(e.payload);
                    else if (e.topic == topics::fused(vid))
                        it->second.fused = decode_fused_state(e.payload);
                    else if (e.topic == topics::command(vid))
                        it->second.command = decode_command(e.payload);
                    else if (e.topic == topics::trajectory(vid))
                    {
                        digests_[vid] = chain_digest(digests_[vid], e.payload);
                        if (keep_)
                            trajectories_[vid].push_back(e.payload);
                    }
                }
                truth_ = std::move(next);
                for (auto &[id, rec] : recs)
                {
                    rec.trajectory_digest = digests_[id];
                    r.vehicles.push_back(std::move(rec));
                }

                published_ += info.published.size();
                r.published = published_;
                r.lost = 0;
                for (const auto &[topic, st] : sched_.topic_stats())
                    r.lost += st.lost;
                r.delivery_digest = sched_.delivery_digest();
                for (const auto &t : info.timings)
                {
                    r.deadline_misses += t.deadline_miss ? 1 : 0;
                    r.period_wall_ns += t.wall;
                    if (t.participant >= 1000 && t.participant < 2000)
                        r.max_hlc_wall_ns = std::max(r.max_hlc_wall_ns, t.wall);
                    else if (t.participant >= 2000 && t.participant < 3000)
                        r.max_mlc_wall_ns = std::max(r.max_mlc_wall_ns, t.wall);
                }
                trace_.periods.push_back(std::move(r));
            }

            Trace &trace() noexcept { return trace_; }
            std::map<int, std::vector<Bytes>> &trajectories() noexcept { return trajectories_; }

        private:
            const ScenarioSpec &spec_;
            const let::Scheduler &sched_;
            bool keep_;
            std::map<int, VehicleState> truth_;
            std::map<int, std::uint64_t> digests_;
            std::set<int> departed_;
            std::uint64_t published_ = 0;
            Trace trace_;
            std::map<int, std::vector<Bytes>> trajectories_;
        };

        void publish_all(let::StepContext &ctx, std::vector<Outgoing> out)
        {
            for (auto &o : out)
                ctx.publish(std::move(o.topic), std::move(o.payload));
        }
    } // namespace

    RunResult run_experiment(ScenarioSpec spec, const RunOptions &options)
    {
        if (options.seed)
            spec.seed = *options.seed;
        if (options.duration)
            spec.duration = *options.duration;
        finalize(spec);
        const auto wall_start = std::chrono::steady_clock::now();

        let::LetConfig lc;
        lc.period = spec.base_period();
        lc.seed = spec.seed;
        lc.faults.loss_probability = spec.network_loss;
        lc.faults.extra_delay_periods = spec.network_delay;
        lc.execution = options.execution;
        if (spec.has_external() && lc.execution.mode == let::ExecutionMode::Parallel)
        {
            spdlog::warn("external vehicles share one socket; running sequentially");
            lc.execution.mode = let::ExecutionMode::Sequential;
        }
        let::Scheduler sched(lc);
        // Links between the on-board controllers are not on the network.
        sched.set_topic_faults("vehicle/", {});

        Recorder recorder(spec, sched, options.keep_trajectories);
        sched.add_barrier_hook([&](const let::BarrierInfo &info) { recorder.on_barrier(info); });

        std::vector<std::unique_ptr<VehicleStack>> stacks;
        std::vector<int> external_ids;
        for (const auto &v : spec.vehicles)
        {
            if (v.external)
            {
                external_ids.push_back(v.id);
                continue;
            }
            auto &st = *stacks.emplace_back(std::make_unique<VehicleStack>(make_vehicle_stack(spec, v.id)));
            sched.register_participant(participant::mlc(v.id), st.mlc.subscriptions(), [&st](let::StepContext &ctx) {
                publish_all(ctx, st.mlc.step(ctx.inputs(), ctx.now(), ctx.step_length()));
            });
            sched.register_participant(participant::llc(v.id), st.llc.subscriptions(), [&st](let::StepContext &ctx) {
                publish_all(ctx, st.llc.step(ctx.inputs(), ctx.now(), ctx.step_length()));
            });
        }

        std::map<int, LedLayout> layouts;
        for (const auto &v : spec.vehicles)
            layouts.emplace(v.id, LedLayout{});
        IpsPipeline ips(ips_config(spec), std::move(layouts));
        std::vector<VehicleTruth> frame;
        sched.register_participant(participant::kIps, {}, [&](let::StepContext &ctx) {
            frame.clear();
            for (const auto &[id, s] : recorder.truth())
                frame.push_back({id, s.pose});
            auto obs = ips.process(ctx.period(), ctx.now(), frame);
            if (!obs.empty())
                ctx.publish(topics::kIpsPoses, encode(obs));
        });

        std::vector<std::unique_ptr<HighLevelController>> planners;
        const let::ParticipantTiming hlc_timing{spec.hlc_multiple, 0};
        auto add_planner = [&](let::ParticipantId pid, std::vector<int> ids) {
            auto &h = *planners.emplace_back(std::make_unique<HighLevelController>(spec, std::move(ids)));
            sched.register_participant(
                pid, h.subscriptions(),
                [&h](let::StepContext &ctx) { publish_all(ctx, h.step(ctx.inputs(), ctx.now())); }, hlc_timing);
        };
        if (spec.topology == Topology::Centralized)
        {
            std::vector<int> ids;
            for (const auto &v : spec.vehicles)
                ids.push_back(v.id);
            add_planner(participant::kCentralHlc, std::move(ids));
        }
        else
            for (const auto &v : spec.vehicles)
                add_planner(participant::hlc(v.id), {v.id});

        std::unique_ptr<detail::ExternalHub> hub;
        if (!external_ids.empty())
        {
            hub = std::make_unique<detail::ExternalHub>(options.listen, options.step_timeout);
            const auto ep = hub->endpoint();
            spdlog::info("waiting for {} external vehicle(s) on {}", external_ids.size(), ep.to_string());
            if (options.on_listening)
                options.on_listening(ep);
            hub->accept(external_ids, {spec.seed, spec.base_period(), 1, sched.next_period()}, options.join_timeout);
            for (const int id : external_ids)
                sched.register_participant(participant::mlc(id), hub->subscriptions(id),
                                           [&, id](let::StepContext &ctx) {
                                               if (!hub->step(id, ctx))
                                               {
                                                   sched.deregister_participant(ctx.self());
                                                   recorder.depart(id);
                                               }
                                           });
        }

        RunResult result;
        const std::int64_t total = spec.periods();
        const std::int64_t chunk = std::max<std::int64_t>(1, options.progress_every);
        try
        {
            for (std::int64_t done = 0; done < total;)
            {
                const auto n = std::min(chunk, total - done);
                const auto rep = sched.run_periods(n);
                done += n;
                result.ticks.periods += rep.periods;
                result.ticks.steps_executed += rep.steps_executed;
                result.ticks.messages_published += rep.messages_published;
                result.ticks.messages_routed += rep.messages_routed;
                result.ticks.messages_lost += rep.messages_lost;
                result.ticks.deadline_misses += rep.deadline_misses;
                result.ticks.max_period_wall = std::max(result.ticks.max_period_wall, rep.max_period_wall);
                if (options.progress)
                    options.progress(done, total);
            }
        }
        catch (...)
        {
            if (hub)
                hub->close();
            throw;
        }
        if (hub)
        {
            hub->close();
            result.external = hub->stats();
        }

        auto &trace = recorder.trace();
        trace.header.scenario = spec.name;
        trace.header.seed = spec.seed;
        trace.header.base_period = spec.base_period();
        for (const auto &v : spec.vehicles)
            trace.header.vehicle_ids.push_back(v.id);
        trace.header.scenario_text = format_scenario(spec);

        result.metrics = compute_metrics(trace, spec);
        result.criteria = evaluate(spec, result.metrics);
        result.passed = std::all_of(result.criteria.begin(), result.criteria.end(),
                                    [](const Criterion &c) { return c.passed; });
        for (const auto &h : planners)
        {
            const auto &d = h->diagnostics();
            result.hlc.plans += d.plans;
            result.hlc.yielding += d.yielding;
            result.hlc.emergencies += d.emergencies;
            result.hlc.verification_failures += d.verification_failures;
            result.hlc.held_followers += d.held_followers;
        }
        for (const auto &s : stacks)
        {
            const auto &d = s->mlc.diagnostics();
            result.mlc.starved_steps += d.starved_steps;
            result.mlc.mode_mismatches += d.mode_mismatches;
            result.mlc.rejected_trajectories += d.rejected_trajectories;
            result.mlc.ips_corrections += d.ips_corrections;
            result.mlc.stale_observations += d.stale_observations;
            result.mlc.rejected_observations += d.rejected_observations;
            result.mlc.descent_violations += d.descent_violations;
        }
        result.ips = ips.stats();
        result.trace = std::move(trace);
        result.trajectories = std::move(recorder.trajectories());
        result.spec = std::move(spec);
        result.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
        return result;
    }
} // namespace cpmsim
