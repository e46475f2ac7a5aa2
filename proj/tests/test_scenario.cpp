#include "cpmsim/scenario.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cpmsim;

namespace
{
    std::string minimal(const std::string &extra = "")
    {
        return "cpmscenario v1\nname t\nmap outer_circle\nkind follow\n" + extra +
               "vehicle id=1 path=circle s=0 speed=1\n";
    }

    int error_line(const std::string &text)
    {
        try
        {
            parse_scenario(text);
        }
        catch (const ScenarioError &e)
        {
            return e.line();
        }
        return -1;
    }
} // namespace

TEST_CASE("fixtures validate and round-trip through the text format")
{
    for (const auto &name : fixture_names())
    {
        CAPTURE(name);
        const auto spec = fixture(name);
        CHECK(spec.name == name);
        const auto text = format_scenario(spec);
        const auto again = parse_scenario(text);
        CHECK(again == spec);
        CHECK(format_scenario(again) == text);
    }
    CHECK_THROWS_AS(fixture("nope"), ScenarioError);
}

TEST_CASE("fixture files in the repository match the built-in fixtures")
{
    const std::filesystem::path dir = CPMSIM_FIXTURE_DIR;
    for (const auto &name : fixture_names())
    {
        CAPTURE(name);
        const auto file = dir / (name + ".cpmscenario");
        REQUIRE(std::filesystem::exists(file));
        CHECK(load_scenario(file) == fixture(name));
    }
}

TEST_CASE("mixed platoon differs from the platoon only in vehicle kinds")
{
    auto plain = fixture("platoon8");
    auto mixed = fixture("platoon8_mixed");
    int externals = 0;
    for (auto &v : mixed.vehicles)
    {
        externals += v.external;
        v.external = false;
    }
    CHECK(externals == 2);
    mixed.name = plain.name;
    CHECK(mixed == plain);
}

TEST_CASE("platoon fixture spacing equals ref_speed times gap_time")
{
    const auto s = fixture("platoon8");
    REQUIRE(s.vehicles.size() == 8);
    for (std::size_t i = 1; i < s.vehicles.size(); ++i)
        CHECK(s.vehicles[i - 1].s - s.vehicles[i].s == doctest::Approx(s.ref_speed * s.gap_time));
    CHECK(s.periods() == 6000);
    CHECK(s.hlc_period() == milliseconds(100));
}

TEST_CASE("derived poses follow the path and lateral offset")
{
    const auto spec = parse_scenario(minimal("").substr(0, minimal("").size() - 1) + " offset=0.1\n");
    const auto &v = spec.vehicles.front();
    const auto p = path_point(builtin_map("outer_circle").path("circle"), 0).pose;
    CHECK(v.pose.x == doctest::Approx(p.x));
    CHECK(v.pose.y == doctest::Approx(p.y + 0.1));
    CHECK(v.pose.yaw == doctest::Approx(p.yaw));
}

TEST_CASE("parse errors carry the line number")
{
    CHECK(error_line("cpmscenario v2\n") == 1);
    CHECK(error_line("\n# comment\ncpmscenario v1\nbogus 1\n") == 4);
    CHECK(error_line(minimal("seed x\n")) == 5);
    CHECK(error_line(minimal("ips noise=0.1 color=red\n")) == 5);
    CHECK(error_line(minimal("duration 1\nduration 2\n")) == 6);
    CHECK(error_line(minimal("sensors odometer\n")) == 5);
    CHECK(error_line("cpmscenario v1\nvehicle path=circle\n") == 2);
    CHECK(error_line("cpmscenario v1\nvehicle id=1 path=circle x=1\n") == 2);
    CHECK(error_line("cpmscenario v1\nvehicle id=1 mode=fast\n") == 2);
}

TEST_CASE("semantic validation")
{
    CHECK_NOTHROW(parse_scenario(minimal()));
    // Duplicate ids, overlapping start, unknown path, off-map and bad ranges.
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=1 path=circle s=3 speed=1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=2 path=circle s=0.1 speed=1\n")), ScenarioError);
    CHECK_NOTHROW(parse_scenario(minimal("vehicle id=2 path=circle s=0.3 speed=1\n")));
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=2 path=loop s=1 speed=1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=2 path=circle s=3 offset=-0.5 speed=1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=1000 path=circle s=3 speed=1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("ref_speed 5\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("horizon 0.25\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("ips dropout=1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("ips latency=0\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("network loss=-0.1\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("sensors tick=0\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("duration 0\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario(minimal("map atlantis\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario("cpmscenario v1\nmap outer_circle\n"), ScenarioError);
    // Mode must match the kind; a platoon needs a shared closed path; gap on the planner grid.
    CHECK_THROWS_AS(parse_scenario(minimal("vehicle id=2 path=circle s=3 speed=1 mode=direct\n")), ScenarioError);
    CHECK_THROWS_AS(parse_scenario("cpmscenario v1\nmap straight\nkind platoon\nvehicle id=1 path=line s=1\n"),
                    ScenarioError);
    CHECK_THROWS_AS(parse_scenario("cpmscenario v1\nmap platoon_loop\nkind platoon\ngap_time 0.25\n"
                                   "vehicle id=1 path=loop s=1\n"),
                    ScenarioError);
    CHECK_THROWS_AS(parse_scenario("cpmscenario v1\nmap outer_circle\nkind intersection\n"
                                   "vehicle id=1 path=circle s=1\n"),
                    ScenarioError);
}

TEST_CASE("load and save use files")
{
    const auto dir = std::filesystem::temp_directory_path() / "cpmsim_scenario_test";
    std::filesystem::create_directories(dir);
    const auto file = dir / "x.cpmscenario";
    const auto spec = fixture("intersection8");
    save_scenario(spec, file);
    CHECK(load_scenario(file) == spec);
    CHECK(resolve_scenario(file.string()) == spec);
    CHECK(resolve_scenario("circle18") == fixture("circle18"));
    CHECK_THROWS_AS(load_scenario(dir / "missing.cpmscenario"), ScenarioError);
    std::filesystem::remove_all(dir);
}
