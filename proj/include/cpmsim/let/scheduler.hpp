#pragma once

// Publish-subscribe bus with logical-execution-time (LET) scheduling.
//
// A participant's step in period k sees an input snapshot frozen at the start
// of k; everything it publishes is released at the end of its logical period
// (k + period_multiple) and is visible to subscribers no earlier than their
// first step at or after the release period. Delivery order inside an input
// snapshot is the total order (publish_period, sender_id, topic, sequence),
// so results never depend on the order in which steps execute.

#include "cpmsim/codec.hpp"
#include "cpmsim/types.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cpmsim::let
{
    using ParticipantId = std::uint32_t;
    using PeriodIndex = std::int64_t;

    class LetError : public Error
    {
    public:
        using Error::Error;
    };

    /// Raised by run_periods when a step callback throws.
    class StepFailure : public LetError
    {
    public:
        StepFailure(PeriodIndex period, ParticipantId participant, const std::string &what);

        PeriodIndex period() const noexcept { return period_; }
        ParticipantId participant() const noexcept { return participant_; }

    private:
        PeriodIndex period_;
        ParticipantId participant_;
    };

    struct Envelope
    {
        std::string topic;
        ParticipantId sender_id = 0;
        PeriodIndex publish_period = 0;
        std::uint64_t sequence = 0;
        Bytes payload;

        friend bool operator==(const Envelope &, const Envelope &) = default;
    };

    /// (publish_period, sender_id, topic, sequence)
    bool delivery_order(const Envelope &a, const Envelope &b);

    /// Best-effort network impairments. Every (message, subscriber) copy is
    /// decided independently from a counter-based hash of the named stream, so
    /// the decision does not depend on routing or execution order.
    struct FaultModel
    {
        double loss_probability = 0.0;
        int extra_delay_periods = 0; // each surviving copy is delayed uniformly by 0..extra_delay_periods
        std::string rng_stream = "network";

        bool lossless() const noexcept { return loss_probability == 0.0 && extra_delay_periods == 0; }
        void validate(int max_delay_periods) const;
    };

    enum class ExecutionMode : std::uint8_t
    {
        Sequential, // ascending participant id
        Shuffled,   // seeded permutation per period
        Parallel,   // worker threads
    };

    struct ExecutionPolicy
    {
        ExecutionMode mode = ExecutionMode::Sequential;
        std::uint64_t shuffle_seed = 0;
        unsigned threads = 2;
    };

    struct LetConfig
    {
        Duration period = milliseconds(100);
        std::uint64_t seed = 0;
        FaultModel faults;
        int max_delay_periods = 16;
        ExecutionPolicy execution;
        bool record_delivery_log = false;

        void validate() const;
    };

    /// Multi-rate timing: the participant steps at base periods k >= first
    /// with (k - phase) % period_multiple == 0.
    struct ParticipantTiming
    {
        int period_multiple = 1;
        int phase = 0;
    };

    /// What a step sees. Only valid for the duration of the step.
    class StepContext
    {
    public:
        virtual ~StepContext() = default;

        virtual ParticipantId self() const = 0;
        virtual PeriodIndex period() const = 0;
        /// Logical time at the start of this step.
        virtual Time now() const = 0;
        /// Logical length of this participant's period.
        virtual Duration step_length() const = 0;
        virtual const std::vector<Envelope> &inputs() const = 0;
        virtual std::uint64_t publish(std::string topic, Bytes payload) = 0;
    };

    using StepCallback = std::function<void(StepContext &)>;

    struct DeliveryRecord
    {
        PeriodIndex delivery_period = 0;
        ParticipantId subscriber = 0;
        PeriodIndex publish_period = 0;
        ParticipantId sender = 0;
        std::string topic;
        std::uint64_t sequence = 0;
        std::uint64_t payload_hash = 0;

        friend bool operator==(const DeliveryRecord &, const DeliveryRecord &) = default;
    };

    /// Counts per topic, in units of (message, subscriber) copies except
    /// `published` and `unrouted` which count messages.
    /// Conservation: copies == delivered + lost + discarded + pending.
    struct TopicStats
    {
        std::uint64_t published = 0;
        std::uint64_t unrouted = 0;
        std::uint64_t copies = 0;
        std::uint64_t delivered = 0;
        std::uint64_t lost = 0;
        std::uint64_t discarded = 0; // subscriber left with the copy pending
        std::uint64_t pending = 0;
    };

    struct StepTiming
    {
        ParticipantId participant = 0;
        Duration wall = 0;
        bool deadline_miss = false;
    };

    struct TickReport
    {
        std::int64_t periods = 0;
        std::uint64_t steps_executed = 0;
        std::uint64_t messages_published = 0;
        std::uint64_t messages_routed = 0; // copies handed to subscriber inboxes
        std::uint64_t messages_lost = 0;
        std::uint64_t deadline_misses = 0;
        Duration max_period_wall = 0; // summed step wall-time of the busiest period

        bool empty() const noexcept { return periods == 0; }
    };

    /// Passed to barrier hooks after a period's outputs have been routed.
    struct BarrierInfo
    {
        PeriodIndex completed_period = 0;
        std::span<const Envelope> published; // this period's outputs, in delivery order
        std::span<const StepTiming> timings; // one per executed step
    };

    using BarrierHook = std::function<void(const BarrierInfo &)>;

    /// `*` matches exactly one '/'-separated segment.
    bool topic_matches(std::string_view pattern, std::string_view topic);

    class Scheduler
    {
    public:
        explicit Scheduler(LetConfig config);
        ~Scheduler();
        Scheduler(const Scheduler &) = delete;
        Scheduler &operator=(const Scheduler &) = delete;

        /// Returns the first period in which the participant will step.
        PeriodIndex register_participant(ParticipantId id, std::vector<std::string> subscriptions,
                                         StepCallback step, ParticipantTiming timing = {});
        /// Returns the first period in which the participant no longer steps.
        PeriodIndex deregister_participant(ParticipantId id);
        bool is_registered(ParticipantId id) const;

        /// Only legal while `id` is executing its step.
        std::uint64_t publish(ParticipantId id, std::string topic, Bytes payload);

        /// Takes every pending copy for `id` released at or before `period`.
        std::vector<Envelope> collect_inputs(ParticipantId id, PeriodIndex period);

        TickReport run_periods(std::int64_t n);

        /// Fault model for topics starting with `prefix` (longest prefix wins).
        void set_topic_faults(std::string prefix, FaultModel faults);
        void add_barrier_hook(BarrierHook hook);

        PeriodIndex next_period() const noexcept { return next_period_; }
        Time period_start(PeriodIndex k) const noexcept { return k * config_.period; }
        const LetConfig &config() const noexcept { return config_; }

        const std::map<std::string, TopicStats> &topic_stats() const;
        const std::vector<DeliveryRecord> &delivery_log() const noexcept { return delivery_log_; }
        /// Running digest over every delivery, in delivery order.
        std::uint64_t delivery_digest() const noexcept { return delivery_digest_; }
        std::uint64_t deadline_misses() const noexcept { return total_deadline_misses_; }

    private:
        struct Pending
        {
            Envelope envelope;
            PeriodIndex release = 0;
        };

        struct Participant
        {
            ParticipantId id = 0;
            std::vector<std::string> subscriptions;
            StepCallback step;
            ParticipantTiming timing;
            PeriodIndex first_period = 0;
            std::optional<PeriodIndex> leave_period;
            std::vector<Pending> inbox;
            std::vector<Envelope> outbox;
            std::map<std::string, std::uint64_t> sequences;
            std::atomic<bool> in_step{false};
            PeriodIndex current_period = -1;
        };

        class Context;

        bool steps_in(const Participant &p, PeriodIndex k) const;
        bool subscribes(const Participant &p, std::string_view topic) const;
        const FaultModel &faults_for(std::string_view topic) const;
        void apply_membership_changes(PeriodIndex boundary);
        void run_one_period(PeriodIndex k, TickReport &report);
        void execute_step(Participant &p, PeriodIndex k, std::vector<Envelope> inputs, StepTiming &timing,
                          std::exception_ptr &error);
        void route(PeriodIndex k, std::vector<Envelope> &published, TickReport &report);

        LetConfig config_;
        std::map<ParticipantId, std::unique_ptr<Participant>> participants_;
        std::vector<std::unique_ptr<Participant>> pending_joins_;
        std::vector<std::pair<ParticipantId, PeriodIndex>> pending_leaves_;
        mutable std::mutex membership_mutex_;
        std::vector<std::pair<std::string, FaultModel>> topic_faults_;
        std::vector<BarrierHook> hooks_;
        PeriodIndex next_period_ = 0;
        std::atomic<bool> running_{false};
        PeriodIndex running_period_ = -1;

        mutable std::map<std::string, TopicStats> stats_;
        std::vector<DeliveryRecord> delivery_log_;
        std::uint64_t delivery_digest_ = 0xCBF29CE484222325ull;
        std::uint64_t total_deadline_misses_ = 0;
    };
} // namespace cpmsim::let
