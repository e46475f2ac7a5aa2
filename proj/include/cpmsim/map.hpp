#pragma once

// Road geometry: densely sampled paths, junctions, built-in maps and routes.

#include "cpmsim/geometry.hpp"
#include "cpmsim/rng.hpp"
#include "cpmsim/types.hpp"

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cpmsim
{
    struct PathSample
    {
        double s = 0.0;
        double x = 0.0;
        double y = 0.0;
        double heading = 0.0;
        double curvature = 0.0;
    };

    struct PathPoint
    {
        Pose pose;
        double curvature = 0.0;
    };

    class PathError : public Error
    {
    public:
        using Error::Error;
    };

    class PathGeometry
    {
    public:
        PathGeometry() = default;
        /// Throws PathError unless s starts at 0 and is strictly increasing with at least 2 samples.
        PathGeometry(std::string id, std::vector<PathSample> samples, bool closed);

        const std::string &id() const noexcept { return id_; }
        const std::vector<PathSample> &samples() const noexcept { return samples_; }
        bool closed() const noexcept { return closed_; }
        double length() const noexcept { return samples_.empty() ? 0.0 : samples_.back().s; }

    private:
        std::string id_;
        std::vector<PathSample> samples_;
        bool closed_ = false;
    };

    /// Linear interpolation in s; heading interpolated on the circle. Closed paths wrap.
    PathPoint path_point(const PathGeometry &path, double s);

    /// Arc length of the sample nearest to `p` (searched in [hint - window, hint + window] when window > 0).
    double project_onto(const PathGeometry &path, Vec2 p, double hint = 0.0, double window = 0.0);

    struct SmoothnessReport
    {
        bool curvature_ok = true;
        bool continuity_ok = true;
        bool heading_ok = true;
        double bound = 0.0;
        double max_abs_curvature = 0.0;
        double max_curvature_s = 0.0;
        double max_curvature_jump = 0.0;
        double max_jump_s = 0.0;
        double max_heading_error = 0.0;
        double max_heading_error_s = 0.0;

        bool ok() const noexcept { return curvature_ok && continuity_ok && heading_ok; }
        std::string describe() const;
    };

    /// `jump_threshold` bounds |curvature difference| between adjacent samples (1/m).
    SmoothnessReport check_smoothness(const PathGeometry &path, const VehicleParams &params,
                                      double jump_threshold = 0.2, double heading_tolerance = 0.01);

    /// Piecewise linear-curvature path construction (straights, arcs, clothoids).
    class PathBuilder
    {
    public:
        explicit PathBuilder(Pose start);

        PathBuilder &straight(double length);
        PathBuilder &arc(double curvature, double length);
        PathBuilder &clothoid(double curvature_from, double curvature_to, double length);
        /// Clothoid - arc - clothoid turning by `angle` (sign = direction) with peak curvature `kappa`
        /// and clothoid length `ramp`.
        PathBuilder &corner(double angle, double kappa, double ramp);

        double length() const noexcept { return length_; }
        PathGeometry build(std::string id, bool closed, double spacing = 0.005) const;

    private:
        struct Segment
        {
            double s0, length, k0, k1, h0;
        };
        double heading_at(const Segment &seg, double u) const noexcept;

        Pose start_;
        std::vector<Segment> segments_;
        double length_ = 0.0;
        double heading_ = 0.0;
    };

    /// Inset of a 90 degree corner: it ends `inset` ahead and `inset` to the side of its start.
    double corner_inset(double kappa, double ramp);

    struct Junction
    {
        std::string id;
        Pose pose;
        std::vector<std::string> entry_paths; // paths ending at this junction
        std::vector<std::string> branches;    // paths starting here
    };

    /// Uniform choice over the junction's branches.
    const std::string &choose_branch(const Junction &junction, RngStream &rng);

    struct Map
    {
        std::string id;
        double width = 4.5;
        double height = 4.0;
        std::map<std::string, PathGeometry> paths;
        std::vector<Junction> junctions;

        const PathGeometry &path(std::string_view path_id) const;
        /// Junction reached at the end of `path_id`, or nullptr.
        const Junction *junction_after(std::string_view path_id) const;
        bool contains(Vec2 p, double margin = 0.0) const noexcept;
    };

    std::vector<std::string> builtin_map_ids();
    /// Throws Error for unknown ids.
    const Map &builtin_map(std::string_view id);

    /// Concatenation of paths with a global arc length; open routes grow
    /// through junctions using the supplied branch chooser.
    class Route
    {
    public:
        using Chooser = std::function<std::string(const Junction &)>;

        Route(const Map &map, std::string first_path, Chooser chooser);

        /// Extends the route as needed; closed single paths wrap.
        PathPoint at(double s);
        const std::vector<std::string> &paths() const noexcept { return paths_; }
        bool closed() const noexcept { return closed_; }
        /// Path id and local arc length at global `s`.
        std::pair<std::string, double> locate(double s);

    private:
        void extend_to(double s);

        const Map *map_;
        Chooser chooser_;
        std::vector<std::string> paths_;
        std::vector<double> starts_;
        double end_ = 0.0;
        bool closed_ = false;
    };
} // namespace cpmsim
