#pragma once

// Per-period experiment record: ground truth, fused states, commands and bus
// digests. Wall-clock fields are stored but never compared.

#include "cpmsim/messages.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cpmsim
{
    struct VehicleRecord
    {
        int vehicle_id = 0;
        VehicleState truth; // at the start of the period
        std::optional<FusedState> fused;
        std::optional<ActuatorCommand> command;
        std::uint64_t trajectory_digest = 0; // chained over every trajectory message so far
    };

    struct PeriodRecord
    {
        std::int64_t period = 0;
        std::uint64_t delivery_digest = 0;
        std::uint64_t published = 0; // cumulative
        std::uint64_t lost = 0;      // cumulative
        std::vector<VehicleRecord> vehicles;
        // Wall-clock, excluded from comparison.
        std::uint32_t deadline_misses = 0;
        std::int64_t max_hlc_wall_ns = 0;
        std::int64_t max_mlc_wall_ns = 0;
        std::int64_t period_wall_ns = 0; // sum over all steps of the period
    };

    struct TraceHeader
    {
        std::uint32_t version = 1;
        std::string scenario;
        std::uint64_t seed = 0;
        Duration base_period = 0;
        std::vector<int> vehicle_ids;
        std::string scenario_text;
    };

    struct Trace
    {
        TraceHeader header;
        std::vector<PeriodRecord> periods;
    };

    class TraceError : public Error
    {
    public:
        using Error::Error;
    };

    void write_trace(const Trace &trace, const std::filesystem::path &file);
    /// Throws TraceError on bad magic, unsupported version or truncation.
    Trace read_trace(const std::filesystem::path &file);

    /// One JSON object per line: the header first, then one per period.
    void export_jsonl(const Trace &trace, std::ostream &out);

    struct TraceDiff
    {
        bool equal = true;
        std::int64_t period = -1;
        int vehicle_id = 0;
        std::string field;

        std::string describe() const;
    };

    /// Bit-exact comparison of all deterministic fields; reports the first divergence.
    TraceDiff compare_traces(const Trace &a, const Trace &b);

    /// Chains a payload into a running digest.
    std::uint64_t chain_digest(std::uint64_t digest, std::span<const std::uint8_t> payload) noexcept;
} // namespace cpmsim
