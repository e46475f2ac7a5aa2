#include <doctest.h>

#include "cpmsim/runner.hpp"

#include <thread>

using namespace cpmsim;

namespace
{
    ScenarioSpec two_vehicles()
    {
        ScenarioSpec spec;
        spec.kind = ScenarioKind::Follow;
        spec.settle_time = 0.0;
        VehicleSpec a, b;
        a.id = 1;
        b.id = 2;
        spec.vehicles = {a, b};
        return spec;
    }

    PeriodRecord period(std::int64_t k, std::vector<std::pair<int, Pose>> poses)
    {
        PeriodRecord p;
        p.period = k;
        for (const auto &[id, pose] : poses)
        {
            VehicleRecord v;
            v.vehicle_id = id;
            v.truth.pose = pose;
            p.vehicles.push_back(v);
        }
        return p;
    }
} // namespace

TEST_CASE("collisions are counted once per contact")
{
    const auto spec = two_vehicles();
    Trace t;
    const double xs[] = {1.0, 0.5, 0.2, 0.1, 0.5, 0.5, 0.15, 0.15, 1.0};
    for (int k = 0; k < 9; ++k)
        t.periods.push_back(period(k, {{1, {0, 0, 0}}, {2, {xs[k], 0, 0}}}));
    const auto m = compute_metrics(t, spec);
    REQUIRE(m.collisions.size() == 2);
    CHECK(m.collisions[0].period == 2);
    CHECK(m.collisions[1].period == 6);
    CHECK(m.collisions[0].a == 1);
    CHECK(m.collisions[0].b == 2);
    CHECK(m.min_distance == 0.0);

    const auto c = evaluate(spec, m);
    REQUIRE(!c.empty());
    CHECK(c[0].name == "no collisions");
    CHECK(!c[0].passed);
}

TEST_CASE("minimum distance between footprints")
{
    const auto spec = two_vehicles();
    Trace t;
    t.periods.push_back(period(0, {{1, {0, 0, 0}}, {2, {0.5, 0, 0}}}));
    t.periods.push_back(period(1, {{1, {0, 0, 0}}, {2, {0, 0.4, 0}}}));
    const auto m = compute_metrics(t, spec);
    CHECK(m.collisions.empty());
    // 0.5 - 0.22 end to end; 0.4 - 0.107 side by side.
    CHECK(m.min_distance == doctest::Approx(0.28));
}

TEST_CASE("tracking error against the fused reference")
{
    auto spec = two_vehicles();
    spec.vehicles.pop_back();
    spec.settle_time = 0.04; // skips periods 0 and 1
    Trace t;
    for (int k = 0; k < 6; ++k)
    {
        auto p = period(k, {{1, {0.1 * k, 0.0, 0.0}}});
        FusedState f;
        f.has_reference = true;
        f.ref_x = 0.1 * k - 0.003; // 3 mm behind: longitudinal only
        f.ref_y = k < 2 ? 5.0 : 0.004;
        p.vehicles[0].fused = f;
        t.periods.push_back(p);
    }
    const auto m = compute_metrics(t, spec);
    const auto &v = m.vehicle(1);
    CHECK(v.samples == 4);
    CHECK(v.tracking_rms == doctest::Approx(0.005));
    CHECK(v.lateral_rms == doctest::Approx(0.004));
    CHECK(v.max_tracking_error == doctest::Approx(0.005));
}

TEST_CASE("platoon gap along the loop")
{
    auto spec = fixture("platoon8");
    spec.settle_time = 0.0;
    const auto &loop = builtin_map(spec.map).path(spec.vehicles.front().path);
    auto pose_at = [&](double s) { return path_point(loop, std::fmod(s, loop.length())).pose; };
    Trace t;
    for (int k = 0; k < 3; ++k)
    {
        std::vector<std::pair<int, Pose>> poses;
        for (std::size_t i = 0; i < spec.vehicles.size(); ++i)
        {
            double s = 10.0 + 0.02 * k - 0.5 * static_cast<double>(i);
            if (k == 2 && i == 3)
                s += 0.04; // closes the gap to 2 by 8%, opens the one to 4
            poses.push_back({spec.vehicles[i].id, pose_at(s + loop.length())});
        }
        t.periods.push_back(period(k, poses));
    }
    const auto m = compute_metrics(t, spec);
    CHECK(m.gap_reference == doctest::Approx(0.5));
    CHECK(m.gap_samples == 21);
    CHECK(m.gap_max_deviation == doctest::Approx(0.08).epsilon(0.05));
    const auto c = evaluate(spec, m);
    REQUIRE(c.size() >= 2);
    CHECK(c[1].name == "platoon gap");
    CHECK(c[1].passed);
}

TEST_CASE("runs are deterministic across execution modes")
{
    RunOptions opt;
    opt.duration = 4.0;
    const auto spec = fixture("platoon8");
    const auto a = run_experiment(spec, opt);
    opt.execution.mode = let::ExecutionMode::Shuffled;
    const auto b = run_experiment(spec, opt);
    opt.execution.mode = let::ExecutionMode::Parallel;
    opt.execution.threads = 3;
    const auto c = run_experiment(spec, opt);
    CHECK(a.trace.periods.size() == 200);
    CHECK(compare_traces(a.trace, b.trace).equal);
    CHECK(compare_traces(a.trace, c.trace).equal);

    opt.seed = spec.seed + 1;
    const auto d = run_experiment(spec, opt);
    const auto diff = compare_traces(a.trace, d.trace);
    CHECK(!diff.equal);
    CHECK(diff.field == "seed");
}

TEST_CASE("external vehicles drive like internal ones")
{
    const auto mixed = fixture("platoon8_mixed");
    RunOptions opt;
    opt.duration = 3.0;
    std::vector<std::thread> clients;
    std::map<int, ClientReport> reports;
    std::mutex mu;
    opt.on_listening = [&](const let::Endpoint &ep) {
        for (const auto &v : mixed.vehicles)
            if (v.external)
                clients.emplace_back([&, id = v.id, ep] {
                    const auto r = run_external_vehicle(mixed, id, ep);
                    std::lock_guard lock(mu);
                    reports[id] = r;
                });
    };
    const auto r = run_experiment(mixed, opt);
    for (auto &c : clients)
        c.join();
    CHECK(r.external.joined == 2);
    CHECK(r.external.timeouts == 0);
    REQUIRE(reports.size() == 2);
    CHECK(reports[3].clean_exit);
    CHECK(reports[6].steps == 150);

    // The same experiment with every vehicle internal: identical motion.
    auto internal = mixed;
    for (auto &v : internal.vehicles)
        v.external = false;
    RunOptions plain;
    plain.duration = 3.0;
    const auto ref = run_experiment(internal, plain);
    REQUIRE(ref.trace.periods.size() == r.trace.periods.size());
    for (std::size_t k = 0; k < r.trace.periods.size(); ++k)
        for (std::size_t i = 0; i < r.trace.periods[k].vehicles.size(); ++i)
        {
            const auto &x = r.trace.periods[k].vehicles[i];
            const auto &y = ref.trace.periods[k].vehicles[i];
            REQUIRE(x.truth.pose.x == y.truth.pose.x);
            REQUIRE(x.truth.pose.y == y.truth.pose.y);
            REQUIRE(x.trajectory_digest == y.trajectory_digest);
        }
}

TEST_CASE("a missing external vehicle fails the run")
{
    RunOptions opt;
    opt.duration = 1.0;
    opt.join_timeout = std::chrono::milliseconds(200);
    CHECK_THROWS_AS(run_experiment(fixture("platoon8_mixed"), opt), RunError);
}
