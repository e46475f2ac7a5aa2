#pragma once

// Simulated indoor positioning: LED points from ground truth, then pose and
// identity recovery from the marker triangle and the flashing id LED.

#include "cpmsim/geometry.hpp"
#include "cpmsim/messages.hpp"
#include "cpmsim/rng.hpp"

#include <array>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <vector>

namespace cpmsim
{
    struct LedLayout
    {
        std::array<Vec2, 3> outer{Vec2{0.08, 0.03}, Vec2{0.08, -0.03}, Vec2{-0.07, 0.025}};
        Vec2 id_led{0.0, 0.0};
        Vec2 com_offset{0.0, 0.0}; // center of mass in the body frame
        double separation_margin = 0.008;

        /// Side lengths |outer[0]-outer[1]|, |outer[1]-outer[2]|, |outer[2]-outer[0]|.
        std::array<double, 3> sides() const noexcept;
        /// Throws Error if sides are not pairwise distinct by the margin or an LED lies outside the footprint.
        void validate(const VehicleParams &params = {}) const;
    };

    struct FrameDetections
    {
        std::int64_t frame_index = 0;
        std::vector<Vec2> points;
    };

    struct VehicleTruth
    {
        int vehicle_id = 0;
        Pose pose; // center-of-mass pose
    };

    struct FlashConfig
    {
        double frame_rate = 50.0;
        double base_hz = 1.0; // vehicle i flashes at base_hz + i * step_hz
        double step_hz = 1.0;

        double frequency(int vehicle_id) const noexcept { return base_hz + step_hz * vehicle_id; }
    };

    /// Square wave sampled at the frame rate; `phase` is a fraction of one flash period.
    bool flash_on(double frequency_hz, double phase, std::int64_t frame_index, double frame_rate);

    struct VehicleMarker
    {
        VehicleTruth truth;
        LedLayout layout;
        double flash_hz = 0.0;
        double flash_phase = 0.0;
    };

    /// Points for every marker; per-vehicle noise comes from `noise_for(vehicle_id)`.
    FrameDetections project_leds(std::span<const VehicleMarker> markers, std::int64_t frame_index, double frame_rate,
                                 double sigma, const std::function<RngStream &(int)> &noise_for);

    struct PointGroup
    {
        std::vector<Vec2> points;
        bool resolved = true; // false for fewer than 3 or more than 4 points
    };

    /// Single-linkage grouping with the given distance threshold, in deterministic order.
    std::vector<PointGroup> cluster_detections(const FrameDetections &frame, double max_vehicle_diameter);

    struct PoseSolution
    {
        bool ok = false;
        Pose pose;
        bool id_led_on = false;
        double residual = 0.0; // worst side-length mismatch of the chosen labeling
        std::string reason;    // when !ok
    };

    /// Labels the outer triangle by side lengths, fits the rigid transform and returns the center-of-mass pose.
    PoseSolution solve_pose(std::span<const Vec2> points, const LedLayout &layout, double max_residual = 0.02);

    struct Identification
    {
        bool ok = false;
        int vehicle_id = 0;
        double confidence = 0.0; // share of the best frequency in the summed table power
        std::pair<int, int> ambiguous_pair{0, 0};
    };

    /// History samples: +1 on, -1 off, 0 unknown. `table` maps frequency (Hz) to vehicle id.
    Identification identify(std::span<const int> history, const std::vector<std::pair<double, int>> &table,
                            double frame_rate);

    struct IpsConfig
    {
        double frame_rate = 50.0;
        double noise_sigma = 0.001;
        double dropout_probability = 0.0;
        int latency_frames = 1; // includes the bus hand-over
        double max_vehicle_diameter = 0.18;
        double track_gate = 0.15;      // m, around the predicted position
        double track_yaw_gate = 0.4;   // rad, plus track_yaw_rate per missed frame
        double track_yaw_rate = 0.08;  // rad per frame
        int window = 50;
        int track_timeout_frames = 25;
        FlashConfig flash;
        std::uint64_t seed = 0;
    };

    struct IpsStats
    {
        std::uint64_t frames = 0;
        std::uint64_t observations = 0;
        std::uint64_t dropped = 0;
        std::uint64_t unresolved_groups = 0;
        std::uint64_t unidentified = 0;
    };

    /// Stateful frame pipeline: project, cluster, solve, track, identify, delay, drop.
    class IpsPipeline
    {
    public:
        IpsPipeline(IpsConfig config, std::map<int, LedLayout> layouts);

        /// Processes frame `frame_index` and returns the observations due for publication now.
        std::vector<PoseObservation> process(std::int64_t frame_index, Time frame_time,
                                             std::span<const VehicleTruth> truth);

        const IpsStats &stats() const noexcept { return stats_; }
        double flash_phase(int vehicle_id) const;

    private:
        struct Track
        {
            Vec2 position;
            Vec2 velocity;
            double yaw = 0.0;
            std::deque<int> history;
            int vehicle_id = 0;
            std::int64_t last_seen = 0;
        };

        RngStream &noise_stream(int vehicle_id);
        RngStream &dropout_stream(int vehicle_id);
        const LedLayout &layout_for(int vehicle_id) const;

        IpsConfig config_;
        std::map<int, LedLayout> layouts_;
        LedLayout default_layout_;
        std::map<int, RngStream> noise_;
        std::map<int, RngStream> dropout_;
        std::vector<Track> tracks_;
        std::vector<std::pair<double, int>> table_;
        std::deque<std::pair<std::int64_t, std::vector<PoseObservation>>> pending_;
        IpsStats stats_;
    };
} // namespace cpmsim
