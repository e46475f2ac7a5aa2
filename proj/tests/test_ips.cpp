#include <doctest.h>

#include "cpmsim/ips.hpp"

#include <algorithm>
#include <cmath>

using namespace cpmsim;

namespace
{
    FrameDetections project_one(const Pose &pose, int id, std::int64_t frame, double sigma, RngStream &rng,
                                double phase = 0.0, const LedLayout &layout = {})
    {
        const VehicleMarker m{{id, pose}, layout, FlashConfig{}.frequency(id), phase};
        return project_leds(std::span<const VehicleMarker>(&m, 1), frame, 50.0, sigma,
                            [&](int) -> RngStream & { return rng; });
    }

    double pos_err(const Pose &a, const Pose &b) { return std::hypot(a.x - b.x, a.y - b.y); }
} // namespace

TEST_CASE("layout validation")
{
    CHECK_NOTHROW(LedLayout{}.validate());
    LedLayout iso;
    iso.outer[2] = {-0.07, 0.0}; // isosceles: two equal sides
    CHECK_THROWS_AS(iso.validate(), Error);
    LedLayout outside;
    outside.outer[0] = {0.2, 0.0};
    CHECK_THROWS_AS(outside.validate(), Error);
}

TEST_CASE("projection is a rigid transform of the layout")
{
    RngStream rng(1, 1, "n");
    LedLayout layout;
    // Frame with the id LED off so only the three outer points remain.
    std::int64_t off_frame = 0;
    while (flash_on(FlashConfig{}.frequency(1), 0.0, off_frame, 50.0))
        ++off_frame;
    const auto f = project_one({0, 0, 0}, 1, off_frame, 0.0, rng);
    REQUIRE(f.points.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(f.points[i] == layout.outer[i]);

    const auto r = project_one({1.0, 2.0, kPi / 2}, 1, off_frame, 0.0, rng);
    for (int i = 0; i < 3; ++i)
    {
        CHECK(r.points[i].x == doctest::Approx(1.0 - layout.outer[i].y));
        CHECK(r.points[i].y == doctest::Approx(2.0 + layout.outer[i].x));
    }
}

TEST_CASE("5 Hz flash sampled at 50 Hz repeats every 10 frames")
{
    std::vector<bool> s;
    for (int k = 0; k < 40; ++k)
        s.push_back(flash_on(5.0, 0.0, k, 50.0));
    for (int k = 0; k < 40; ++k)
    {
        CHECK(s[k] == (k % 10 < 5));
        if (k >= 10)
            CHECK(s[k] == s[k - 10]);
    }
}

TEST_CASE("clustering")
{
    RngStream rng(2, 1, "n");
    std::int64_t on_frame = 0;
    while (!flash_on(FlashConfig{}.frequency(1), 0.0, on_frame, 50.0))
        ++on_frame;
    auto one = project_one({1, 1, 0.3}, 1, on_frame, 0.0, rng);
    auto groups = cluster_detections(one, 0.18);
    REQUIRE(groups.size() == 1);
    CHECK(groups[0].points.size() == 4);
    CHECK(groups[0].resolved);

    auto two = one;
    for (const auto &p : project_one({2, 1, 0.3}, 1, on_frame, 0.0, rng).points)
        two.points.push_back(p);
    CHECK(cluster_detections(two, 0.18).size() == 2);

    auto close = one;
    for (const auto &p : project_one({1, 1.12, 0.3}, 1, on_frame, 0.0, rng).points)
        close.points.push_back(p);
    groups = cluster_detections(close, 0.18);
    REQUIRE(groups.size() == 1);
    CHECK_FALSE(groups[0].resolved);

    FrameDetections sparse;
    sparse.points = {{0, 0}, {0.05, 0}};
    groups = cluster_detections(sparse, 0.18);
    REQUIRE(groups.size() == 1);
    CHECK_FALSE(groups[0].resolved);
}

TEST_CASE("pose round trip and equivariance")
{
    RngStream rng(3, 1, "poses");
    RngStream noise(3, 2, "noise");
    const auto id_pose = solve_pose(project_one({0, 0, 0}, 1, 0, 0.0, noise).points, LedLayout{});
    REQUIRE(id_pose.ok);
    CHECK(pos_err(id_pose.pose, {0, 0, 0}) < 1e-12);
    CHECK(std::abs(id_pose.pose.yaw) < 1e-12);

    double worst = 0;
    for (int i = 0; i < 1000; ++i)
    {
        const Pose p{rng.uniform() * 4.5, rng.uniform() * 4.0, normalize_yaw(rng.uniform() * 2 * kPi)};
        const auto sol = solve_pose(project_one(p, 1, i, 0.0, noise).points, LedLayout{});
        REQUIRE(sol.ok);
        worst = std::max(worst, pos_err(sol.pose, p));
        CHECK(std::abs(angle_diff(sol.pose.yaw, p.yaw)) < 1e-9);
    }
    CHECK(worst < 1e-9);

    // Rigidly moving the points moves the solution the same way.
    const Pose a{1.2, 0.7, 0.4};
    const auto pts = project_one(a, 1, 3, 0.0, noise).points;
    const double th = 0.9;
    const Vec2 shift{0.3, -0.2};
    std::vector<Vec2> moved;
    for (const auto &q : pts)
        moved.push_back(rotate(q, th) + shift);
    const auto s0 = solve_pose(pts, LedLayout{});
    const auto s1 = solve_pose(moved, LedLayout{});
    const Vec2 expect = rotate({s0.pose.x, s0.pose.y}, th) + shift;
    CHECK(s1.pose.x == doctest::Approx(expect.x));
    CHECK(s1.pose.y == doctest::Approx(expect.y));
    CHECK(angle_diff(s1.pose.yaw, s0.pose.yaw + th) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("center-of-mass offset")
{
    LedLayout layout;
    layout.com_offset = {0.02, 0.0};
    RngStream noise(4, 1, "n");
    const Pose com{1, 1, 0.7};
    const auto sol = solve_pose(project_one(com, 1, 0, 0.0, noise, 0.0, layout).points, layout);
    REQUIRE(sol.ok);
    CHECK(pos_err(sol.pose, com) < 1e-12);
}

TEST_CASE("1 mm noise gives millimetre poses")
{
    RngStream rng(5, 1, "poses");
    RngStream noise(5, 2, "noise");
    double sq = 0;
    int n = 0;
    for (int i = 0; i < 1000; ++i)
    {
        const Pose p{rng.uniform() * 4.5, rng.uniform() * 4.0, normalize_yaw(rng.uniform() * 2 * kPi)};
        const auto sol = solve_pose(project_one(p, 1, i, 0.001, noise).points, LedLayout{});
        if (!sol.ok)
            continue;
        sq += pos_err(sol.pose, p) * pos_err(sol.pose, p);
        ++n;
    }
    CHECK(n >= 990);
    CHECK(std::sqrt(sq / n) < 0.002);
}

TEST_CASE("labeling is rejected when ambiguous or mismatched")
{
    const std::vector<Vec2> equilateral{{0, 0}, {0.1, 0}, {0.05, 0.0866}};
    CHECK_FALSE(solve_pose(equilateral, LedLayout{}).ok);
    CHECK_FALSE(solve_pose(std::vector<Vec2>{{0, 0}, {0.1, 0}}, LedLayout{}).ok);
}

TEST_CASE("identify")
{
    const std::vector<std::pair<double, int>> table{{5.0, 3}, {10.0, 7}};
    auto history = [](double f, double phase) {
        std::vector<int> h;
        for (int k = 0; k < 50; ++k)
            h.push_back(flash_on(f, phase, k, 50.0) ? 1 : -1);
        return h;
    };
    CHECK(identify(history(5, 0), table, 50).vehicle_id == 3);
    CHECK(identify(history(10, 0.3), table, 50).vehicle_id == 7);

    auto corrupted = history(5, 0.1);
    corrupted[17] = -corrupted[17];
    const auto c = identify(corrupted, table, 50);
    CHECK(c.ok);
    CHECK(c.vehicle_id == 3);

    const std::vector<std::pair<double, int>> reversed{{10.0, 7}, {5.0, 3}};
    CHECK(identify(history(10, 0.3), reversed, 50).vehicle_id == 7);

    const std::vector<std::pair<double, int>> tight{{5.0, 3}, {5.5, 4}};
    const auto amb = identify(history(5, 0), tight, 50);
    CHECK_FALSE(amb.ok);
    CHECK(amb.ambiguous_pair == std::pair<int, int>{3, 4});
}

TEST_CASE("identification over the default table")
{
    FlashConfig fc;
    std::vector<std::pair<double, int>> table;
    for (int id = 1; id <= 20; ++id)
        table.emplace_back(fc.frequency(id), id);
    RngStream rng(6, 0, "phase");
    for (int id = 1; id <= 20; ++id)
        for (int trial = 0; trial < 20; ++trial)
        {
            const double phase = rng.uniform();
            const auto start = static_cast<std::int64_t>(rng.below(1000));
            std::vector<int> h;
            for (std::int64_t k = start; k < start + 50; ++k)
                h.push_back(flash_on(fc.frequency(id), phase, k, 50) ? 1 : -1);
            const auto r = identify(h, table, 50);
            CHECK(r.ok);
            CHECK(r.vehicle_id == id);
        }
}

TEST_CASE("pipeline latency, dropout and empty scenes")
{
    IpsConfig cfg;
    cfg.noise_sigma = 0.0;
    cfg.seed = 9;
    IpsPipeline ips(cfg, {{4, LedLayout{}}});
    const std::vector<VehicleTruth> truth{{4, {1.0, 1.0, 0.2}}};
    int with_obs = 0;
    for (std::int64_t k = 0; k < 200; ++k)
    {
        const auto out = ips.process(k, k * milliseconds(20), truth);
        if (k >= 60)
        {
            REQUIRE(out.size() == 1);
            CHECK(out[0].vehicle_id == 4);
            CHECK(out[0].frame_index == k);
            CHECK(out[0].frame_time == k * milliseconds(20));
            CHECK(pos_err(out[0].pose, truth[0].pose) < 1e-12);
            ++with_obs;
        }
    }
    CHECK(with_obs == 140);

    IpsConfig late = cfg;
    late.latency_frames = 3;
    IpsPipeline delayed(late, {{4, LedLayout{}}});
    for (std::int64_t k = 0; k < 100; ++k)
    {
        const auto out = delayed.process(k, k * milliseconds(20), truth);
        if (k >= 60)
        {
            REQUIRE(out.size() == 1);
            CHECK(out[0].frame_index == k - 2);
        }
    }

    IpsConfig lossy = cfg;
    lossy.dropout_probability = 0.2;
    IpsPipeline drop(lossy, {{4, LedLayout{}}});
    const int frames = 5000;
    int count = 0;
    for (std::int64_t k = 0; k < 50 + frames; ++k)
    {
        const auto out = drop.process(k, k * milliseconds(20), truth);
        if (k >= 50)
            count += static_cast<int>(out.size());
    }
    const double sigma = std::sqrt(frames * 0.2 * 0.8);
    CHECK(std::abs(count - 0.8 * frames) < 3 * sigma);

    IpsPipeline empty(cfg, {});
    CHECK(empty.process(0, 0, {}).empty());
}

TEST_CASE("pipeline identifies a moving fleet")
{
    IpsConfig cfg;
    cfg.seed = 10;
    std::map<int, LedLayout> layouts;
    for (int id = 1; id <= 8; ++id)
        layouts[id] = LedLayout{};
    IpsPipeline ips(cfg, layouts);
    int correct = 0, total = 0;
    for (std::int64_t k = 0; k < 300; ++k)
    {
        std::vector<VehicleTruth> truth;
        const double t = to_seconds(k * milliseconds(20));
        for (int id = 1; id <= 8; ++id)
        {
            const double a = t * 0.8 + id * 2 * kPi / 8;
            truth.push_back({id, {2.25 + 1.5 * std::cos(a), 2.0 + 1.5 * std::sin(a), normalize_yaw(a + kPi / 2)}});
        }
        for (const auto &o : ips.process(k, k * milliseconds(20), truth))
        {
            ++total;
            const auto &tr = truth[static_cast<std::size_t>(o.vehicle_id - 1)];
            if (pos_err(o.pose, tr.pose) < 0.01)
                ++correct;
        }
    }
    CHECK(total > 8 * 240);
    CHECK(correct == total);
}

TEST_CASE("tracks keep their identity when vehicles pass closely")
{
    // Two vehicles meet on parallel lanes 0.16 m apart, so their LED clusters nearly touch.
    IpsConfig cfg;
    cfg.seed = 3;
    IpsPipeline ips(cfg, {{1, LedLayout{}}, {2, LedLayout{}}});
    int correct = 0, total = 0;
    for (std::int64_t k = 0; k < 200; ++k)
    {
        const double t = to_seconds(k * milliseconds(20));
        const std::vector<VehicleTruth> truth{{1, {0.5 + 1.0 * t, 2.0, 0.0}},
                                              {2, {4.5 - 1.0 * t, 2.16, kPi}}};
        for (const auto &o : ips.process(k, k * milliseconds(20), truth))
        {
            ++total;
            if (pos_err(o.pose, truth[static_cast<std::size_t>(o.vehicle_id - 1)].pose) < 0.05)
                ++correct;
        }
    }
    CHECK(total > 250);
    CHECK(correct == total);
}
