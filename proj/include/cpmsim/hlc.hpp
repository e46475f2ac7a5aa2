#pragma once

// High-level planning: speed profiles along paths, platoon time shifts,
// priority-based speed scaling and trajectory verification.

#include "cpmsim/let/scheduler.hpp"
#include "cpmsim/map.hpp"
#include "cpmsim/messages.hpp"
#include "cpmsim/plant.hpp"
#include "cpmsim/scenario.hpp"
#include "cpmsim/trajectory.hpp"

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

namespace cpmsim
{
    struct PlanConfig
    {
        Duration node_dt = milliseconds(100);
        Duration horizon = seconds(2);
        double max_accel = 1.5;
        Duration collision_dt = milliseconds(10);
        double inflation = 0.02; // footprint growth per side for planning checks
        VehicleParams params;

        int nodes() const noexcept { return static_cast<int>(horizon / node_dt); }
        void validate() const;
    };

    struct ProfilePoint
    {
        Time t = 0;
        double s = 0.0;
        double v = 0.0;
    };

    struct LeaderPlan
    {
        std::vector<TrajectoryNode> nodes;  // now + i * node_dt, i = 1..n
        std::vector<ProfilePoint> profile;  // one per node
    };

    using PathFn = std::function<PathPoint(double)>;

    /// Node on the path at arc length `s` moving with speed `v`.
    TrajectoryNode path_node(const PathFn &path, Time t, double s, double v);

    /// Speed ramps toward `target_speed` with |dv/dt| <= max_accel and stops
    /// at `s_end`; positions follow the trapezoidal integral of the speed.
    LeaderPlan plan_leader(const PathFn &path, double s_end, double s0, double v0, double target_speed, Time now,
                           const PlanConfig &cfg);

    /// The predecessor's trajectory delayed by `gap`. Without enough
    /// predecessor history the follower holds `own` at zero speed.
    std::vector<TrajectoryNode> plan_follower(const Trajectory &predecessor, Duration gap, Time now, const Pose &own,
                                              const PlanConfig &cfg);

    struct PoseSample
    {
        Time t = 0;
        Pose pose;
        bool heading_known = true; // false while the trajectory never moved
    };

    /// Poses at from, from + dt, ... <= to. Heading from the velocity, carried
    /// over while stopped.
    std::vector<PoseSample> sample_trajectory(const Trajectory &traj, Time from, Time to, Duration dt);

    /// Footprints at every sampling instant; unknown headings use the bounding square.
    OrientedRect planning_footprint(const PoseSample &s, const PlanConfig &cfg);

    /// First sampling instant in [from, to] (clipped to both trajectories) where footprints overlap.
    std::optional<Time> collision_check(const Trajectory &a, const Trajectory &b, Time from, Time to,
                                        const PlanConfig &cfg);

    /// Speed scale factors tried by priority planning, highest first.
    const std::vector<double> &lambda_grid();

    struct HigherPriority
    {
        int vehicle_id = 0;
        const Trajectory *trajectory = nullptr;
    };

    struct PriorityResult
    {
        double lambda = 1.0;
        bool emergency = false; // no grid value avoids every higher-priority trajectory
        LeaderPlan plan;
        int blocking_vehicle = 0; // first conflict of the rejected lambda = 1, if any
        std::vector<bool> feasible; // per lambda_grid entry, evaluated until the first feasible
    };

    /// Largest lambda whose plan at lambda * ref_speed is collision-free
    /// against every higher-priority trajectory.
    PriorityResult plan_priority(const PathFn &path, double s_end, double s0, double v0, double ref_speed, Time now,
                                 std::span<const HigherPriority> higher, const PlanConfig &cfg);

    /// Whether braking to a stop from the plan's first node stays clear of `other` within the horizon.
    bool stop_safe(const PathFn &path, double s_end, const ProfilePoint &current, Time now, const LeaderPlan &plan,
                   const Trajectory &other, const PlanConfig &cfg);

    /// True when `back` reaches the current footprint of `front` within the
    /// horizon while heading the same way, i.e. `front` drives ahead of it.
    bool drives_ahead_of(const Trajectory &front, const Trajectory &back, Time now, const PlanConfig &cfg);

    /// Pairs (front, back) of vehicles where `front` drives ahead of `back` in
    /// the same lane. The vehicle behind yields to the one in front whatever
    /// their priorities.
    std::set<std::pair<int, int>> lane_order(const std::map<int, const Trajectory *> &committed, Time now,
                                             const PlanConfig &cfg);

    /// Trajectory of the current node followed by the plan.
    Trajectory candidate_trajectory(const PathFn &path, double s0, double v0, Time now, const LeaderPlan &plan,
                                    const PlanConfig &cfg);

    struct Verification
    {
        bool ok = true;
        std::string reason;
    };

    /// Kinematic limits on the nodes and, when `others` is non-empty, freedom from collisions.
    Verification verify_trajectory(const Trajectory &candidate, std::span<const HigherPriority> others,
                                   const PlanConfig &cfg);

    struct HlcDiagnostics
    {
        std::uint64_t plans = 0;
        std::uint64_t yielding = 0; // plans with lambda < 1
        std::uint64_t emergencies = 0;
        std::uint64_t verification_failures = 0;
        std::uint64_t held_followers = 0;
    };

    /// Planner for a set of vehicles: every vehicle of the scenario when
    /// centralized, a single vehicle when distributed.
    class HighLevelController
    {
    public:
        HighLevelController(const ScenarioSpec &spec, std::vector<int> vehicle_ids);
        ~HighLevelController();

        std::vector<Outgoing> step(const std::vector<let::Envelope> &inputs, Time now);
        std::vector<std::string> subscriptions() const;
        const HlcDiagnostics &diagnostics() const noexcept { return diag_; }
        const std::vector<int> &vehicle_ids() const noexcept { return ids_; }
        /// Lambda chosen in the last step, per vehicle (1 when not priority planning).
        double last_lambda(int vehicle_id) const;

        /// Offset between experiment time and the planner's internal clock.
        static constexpr Duration kClockOffset = seconds(1000);

    private:
        struct Vehicle;
        void plan_vehicle(Vehicle &v, Time now, std::vector<Outgoing> &out);
        std::vector<HigherPriority> higher_than(int vehicle_id) const;
        int top_id() const;

        ScenarioSpec spec_;
        PlanConfig cfg_;
        std::vector<int> ids_;
        std::map<int, std::unique_ptr<Vehicle>> vehicles_;
        std::map<int, Trajectory> peers_; // received commitments, internal clock
        std::set<std::pair<int, int>> lane_order_; // (front, back) for the current step
        HlcDiagnostics diag_;
    };
} // namespace cpmsim
