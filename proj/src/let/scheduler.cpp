#include "cpmsim/let/scheduler.hpp"

#include "cpmsim/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <thread>

namespace cpmsim::let
{
    StepFailure::StepFailure(PeriodIndex period, ParticipantId participant, const std::string &what)
        : LetError(fmt::format("step of participant {} failed in period {}: {}", participant, period, what)),
          period_(period), participant_(participant)
    {
    }

    bool delivery_order(const Envelope &a, const Envelope &b)
    {
        if (a.publish_period != b.publish_period)
            return a.publish_period < b.publish_period;
        if (a.sender_id != b.sender_id)
            return a.sender_id < b.sender_id;
        if (a.topic != b.topic)
            return a.topic < b.topic;
        return a.sequence < b.sequence;
    }

    void FaultModel::validate(int max_delay_periods) const
    {
        if (!(loss_probability >= 0.0 && loss_probability <= 1.0))
            throw LetError(fmt::format("fault model: loss probability {} outside [0, 1]", loss_probability));
        if (extra_delay_periods < 0 || extra_delay_periods > max_delay_periods)
            throw LetError(fmt::format("fault model: extra delay {} outside [0, {}]", extra_delay_periods,
                                       max_delay_periods));
    }

    void LetConfig::validate() const
    {
        if (period <= 0)
            throw LetError("LET period must be positive");
        faults.validate(max_delay_periods);
    }

    bool topic_matches(std::string_view pattern, std::string_view topic)
    {
        while (true)
        {
            const auto ps = pattern.find('/');
            const auto ts = topic.find('/');
            const auto pseg = pattern.substr(0, ps);
            const auto tseg = topic.substr(0, ts);
            if (pseg != "*" && pseg != tseg)
                return false;
            if (ps == std::string_view::npos || ts == std::string_view::npos)
                return ps == ts;
            pattern.remove_prefix(ps + 1);
            topic.remove_prefix(ts + 1);
        }
    }

    class Scheduler::Context final : public StepContext
    {
    public:
        Context(Scheduler &s, Participant &p, PeriodIndex k, std::vector<Envelope> inputs)
            : sched_(s), p_(p), period_(k), inputs_(std::move(inputs))
        {
        }

        ParticipantId self() const override { return p_.id; }
        PeriodIndex period() const override { return period_; }
        Time now() const override { return sched_.period_start(period_); }
        Duration step_length() const override { return sched_.config_.period * p_.timing.period_multiple; }
        const std::vector<Envelope> &inputs() const override { return inputs_; }
        std::uint64_t publish(std::string topic, Bytes payload) override
        {
            return sched_.publish(p_.id, std::move(topic), std::move(payload));
        }

    private:
        Scheduler &sched_;
        Participant &p_;
        PeriodIndex period_;
        std::vector<Envelope> inputs_;
    };

    Scheduler::Scheduler(LetConfig config) : config_(std::move(config)) { config_.validate(); }

    Scheduler::~Scheduler() = default;

    bool Scheduler::steps_in(const Participant &p, PeriodIndex k) const
    {
        if (k < p.first_period)
            return false;
        if (p.leave_period && k >= *p.leave_period)
            return false;
        const auto m = p.timing.period_multiple;
        return ((k - p.timing.phase) % m + m) % m == 0;
    }

    bool Scheduler::subscribes(const Participant &p, std::string_view topic) const
    {
        return std::any_of(p.subscriptions.begin(), p.subscriptions.end(),
                           [&](const std::string &pat) { return topic_matches(pat, topic); });
    }

    const FaultModel &Scheduler::faults_for(std::string_view topic) const
    {
        const FaultModel *best = &config_.faults;
        std::size_t best_len = 0;
        for (const auto &[prefix, fm] : topic_faults_)
        {
            if (topic.starts_with(prefix) && prefix.size() >= best_len)
            {
                best = &fm;
                best_len = prefix.size();
            }
        }
        return *best;
    }

    PeriodIndex Scheduler::register_participant(ParticipantId id, std::vector<std::string> subscriptions,
                                                StepCallback step, ParticipantTiming timing)
    {
        if (timing.period_multiple < 1 || timing.phase < 0 || timing.phase >= timing.period_multiple)
            throw LetError(fmt::format("participant {}: invalid timing (multiple {}, phase {})", id,
                                       timing.period_multiple, timing.phase));
        if (!step)
            throw LetError(fmt::format("participant {}: missing step callback", id));

        std::lock_guard lock(membership_mutex_);
        const bool known = participants_.contains(id) ||
                           std::any_of(pending_joins_.begin(), pending_joins_.end(),
                                       [&](const auto &p) { return p->id == id; });
        if (known)
            throw LetError(fmt::format("participant {} already registered", id));

        auto p = std::make_unique<Participant>();
        p->id = id;
        p->subscriptions = std::move(subscriptions);
        p->step = std::move(step);
        p->timing = timing;

        PeriodIndex first = running_ ? running_period_ + 1 : next_period_;
        const auto m = timing.period_multiple;
        while (((first - timing.phase) % m + m) % m != 0)
            ++first;
        p->first_period = first;

        if (running_)
            pending_joins_.push_back(std::move(p));
        else
            participants_.emplace(id, std::move(p));
        return first;
    }

    PeriodIndex Scheduler::deregister_participant(ParticipantId id)
    {
        std::lock_guard lock(membership_mutex_);
        auto it = participants_.find(id);
        if (it == participants_.end() || it->second->leave_period)
            throw LetError(fmt::format("participant {} is not registered", id));

        if (running_)
        {
            const PeriodIndex leave = running_period_ + 1;
            it->second->leave_period = leave;
            pending_leaves_.emplace_back(id, leave);
            return leave;
        }
        for (const auto &pending : it->second->inbox)
            ++stats_[pending.envelope.topic].discarded;
        participants_.erase(it);
        return next_period_;
    }

    bool Scheduler::is_registered(ParticipantId id) const
    {
        std::lock_guard lock(membership_mutex_);
        auto it = participants_.find(id);
        return it != participants_.end() && !it->second->leave_period;
    }

    std::uint64_t Scheduler::publish(ParticipantId id, std::string topic, Bytes payload)
    {
        auto it = participants_.find(id);
        if (it == participants_.end())
            throw LetError(fmt::format("publish: unknown participant {}", id));
        Participant &p = *it->second;
        if (!p.in_step.load(std::memory_order_acquire))
            throw LetError(fmt::format("publish: participant {} is not inside its step", id));

        const std::uint64_t seq = p.sequences[topic]++;
        p.outbox.push_back(Envelope{std::move(topic), id, p.current_period, seq, std::move(payload)});
        return seq;
    }

    std::vector<Envelope> Scheduler::collect_inputs(ParticipantId id, PeriodIndex period)
    {
        auto it = participants_.find(id);
        if (it == participants_.end())
            throw LetError(fmt::format("collect_inputs: unknown participant {}", id));
        Participant &p = *it->second;

        std::vector<Envelope> out;
        auto keep = std::partition(p.inbox.begin(), p.inbox.end(),
                                   [&](const Pending &x) { return x.release > period; });
        out.reserve(static_cast<std::size_t>(std::distance(keep, p.inbox.end())));
        for (auto i = keep; i != p.inbox.end(); ++i)
            out.push_back(std::move(i->envelope));
        p.inbox.erase(keep, p.inbox.end());
        std::sort(out.begin(), out.end(), delivery_order);

        for (const auto &e : out)
        {
            ++stats_[e.topic].delivered;
            const auto ph = fnv1a(e.payload);
            std::uint64_t h = hash_combine(static_cast<std::uint64_t>(period), id);
            h = hash_combine(h, static_cast<std::uint64_t>(e.publish_period));
            h = hash_combine(h, e.sender_id);
            h = hash_combine(h, fnv1a(e.topic));
            h = hash_combine(h, e.sequence);
            h = hash_combine(h, ph);
            delivery_digest_ = hash_combine(delivery_digest_, h);
            if (config_.record_delivery_log)
                delivery_log_.push_back({period, id, e.publish_period, e.sender_id, e.topic, e.sequence, ph});
        }
        return out;
    }

    void Scheduler::set_topic_faults(std::string prefix, FaultModel faults)
    {
        faults.validate(config_.max_delay_periods);
        for (auto &[p, fm] : topic_faults_)
        {
            if (p == prefix)
            {
                fm = std::move(faults);
                return;
            }
        }
        topic_faults_.emplace_back(std::move(prefix), std::move(faults));
    }

    void Scheduler::add_barrier_hook(BarrierHook hook) { hooks_.push_back(std::move(hook)); }

    const std::map<std::string, TopicStats> &Scheduler::topic_stats() const
    {
        for (auto &[topic, st] : stats_)
            st.pending = 0;
        for (const auto &[id, p] : participants_)
            for (const auto &x : p->inbox)
                ++stats_[x.envelope.topic].pending;
        return stats_;
    }

    void Scheduler::apply_membership_changes(PeriodIndex boundary)
    {
        std::lock_guard lock(membership_mutex_);
        for (auto it = pending_leaves_.begin(); it != pending_leaves_.end();)
        {
            if (it->second <= boundary)
            {
                auto pit = participants_.find(it->first);
                if (pit != participants_.end())
                {
                    for (const auto &pending : pit->second->inbox)
                        ++stats_[pending.envelope.topic].discarded;
                    participants_.erase(pit);
                }
                it = pending_leaves_.erase(it);
            }
            else
            {
                ++it;
            }
        }
        for (auto &p : pending_joins_)
        {
            const auto id = p->id;
            participants_.emplace(id, std::move(p));
        }
        pending_joins_.clear();
    }

    void Scheduler::execute_step(Participant &p, PeriodIndex k, std::vector<Envelope> inputs, StepTiming &timing,
                                 std::exception_ptr &error)
    {
        Context ctx(*this, p, k, std::move(inputs));
        p.current_period = k;
        p.in_step.store(true, std::memory_order_release);
        const auto start = std::chrono::steady_clock::now();
        try
        {
            p.step(ctx);
        }
        catch (...)
        {
            error = std::current_exception();
        }
        const auto wall = std::chrono::steady_clock::now() - start;
        p.in_step.store(false, std::memory_order_release);

        timing.participant = p.id;
        timing.wall = std::chrono::duration_cast<std::chrono::nanoseconds>(wall).count();
        timing.deadline_miss = timing.wall > config_.period * p.timing.period_multiple;
    }

    void Scheduler::route(PeriodIndex k, std::vector<Envelope> &published, TickReport &report)
    {
        std::vector<Participant *> subscribers;
        subscribers.reserve(participants_.size());
        for (auto &[id, p] : participants_)
            subscribers.push_back(p.get());

        for (auto &e : published)
        {
            auto &st = stats_[e.topic];
            ++st.published;
            ++report.messages_published;
            const FaultModel &fm = faults_for(e.topic);
            const auto stream = stream_key(config_.seed, 0, fm.rng_stream);
            const auto topic_hash = fnv1a(e.topic);
            const auto publisher = participants_.find(e.sender_id);
            const int multiple = publisher != participants_.end() ? publisher->second->timing.period_multiple : 1;

            bool routed = false;
            for (Participant *sub : subscribers)
            {
                if (sub->leave_period && *sub->leave_period <= k + 1)
                    continue;
                if (!subscribes(*sub, e.topic))
                    continue;
                routed = true;
                ++st.copies;

                std::uint64_t h = hash_combine(stream, e.sender_id);
                h = hash_combine(h, topic_hash);
                h = hash_combine(h, e.sequence);
                h = hash_combine(h, sub->id);
                if (fm.loss_probability > 0.0 && unit_from_hash(h) < fm.loss_probability)
                {
                    ++st.lost;
                    ++report.messages_lost;
                    continue;
                }
                PeriodIndex delay = 0;
                if (fm.extra_delay_periods > 0)
                    delay = static_cast<PeriodIndex>(splitmix64(h) % static_cast<std::uint64_t>(fm.extra_delay_periods + 1));
                sub->inbox.push_back(Pending{e, e.publish_period + multiple + delay});
                ++report.messages_routed;
            }
            if (!routed)
                ++st.unrouted;
        }
    }

    void Scheduler::run_one_period(PeriodIndex k, TickReport &report)
    {
        apply_membership_changes(k);
        running_period_ = k;

        std::vector<Participant *> steppers;
        for (auto &[id, p] : participants_)
            if (steps_in(*p, k))
                steppers.push_back(p.get());

        std::vector<std::vector<Envelope>> inputs;
        inputs.reserve(steppers.size());
        for (Participant *p : steppers)
            inputs.push_back(collect_inputs(p->id, k));

        std::vector<std::size_t> order(steppers.size());
        std::iota(order.begin(), order.end(), 0);
        if (config_.execution.mode == ExecutionMode::Shuffled)
        {
            RngStream rng(config_.execution.shuffle_seed, static_cast<std::uint64_t>(k), "execution-order");
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.below(i)]);
        }

        std::vector<StepTiming> timings(steppers.size());
        std::vector<std::exception_ptr> errors(steppers.size());
        if (config_.execution.mode == ExecutionMode::Parallel && steppers.size() > 1)
        {
            std::atomic<std::size_t> next{0};
            const unsigned n_threads =
                std::max(1u, std::min<unsigned>(config_.execution.threads, static_cast<unsigned>(steppers.size())));
            std::vector<std::jthread> workers;
            workers.reserve(n_threads);
            for (unsigned t = 0; t < n_threads; ++t)
            {
                workers.emplace_back([&] {
                    for (std::size_t i = next++; i < order.size(); i = next++)
                    {
                        const auto idx = order[i];
                        execute_step(*steppers[idx], k, std::move(inputs[idx]), timings[idx], errors[idx]);
                    }
                });
            }
        }
        else
        {
            for (const auto idx : order)
                execute_step(*steppers[idx], k, std::move(inputs[idx]), timings[idx], errors[idx]);
        }

        report.steps_executed += steppers.size();
        Duration period_wall = 0;
        for (const auto &t : timings)
        {
            period_wall += t.wall;
            if (t.deadline_miss)
            {
                ++report.deadline_misses;
                ++total_deadline_misses_;
            }
        }
        report.max_period_wall = std::max(report.max_period_wall, period_wall);

        for (std::size_t i = 0; i < steppers.size(); ++i)
        {
            if (errors[i])
            {
                for (Participant *p : steppers)
                    p->outbox.clear();
                next_period_ = k + 1;
                try
                {
                    std::rethrow_exception(errors[i]);
                }
                catch (const std::exception &ex)
                {
                    throw StepFailure(k, steppers[i]->id, ex.what());
                }
                catch (...)
                {
                    throw StepFailure(k, steppers[i]->id, "unknown exception");
                }
            }
        }

        std::vector<Envelope> published;
        for (auto &[id, p] : participants_)
        {
            std::move(p->outbox.begin(), p->outbox.end(), std::back_inserter(published));
            p->outbox.clear();
        }
        std::sort(published.begin(), published.end(), delivery_order);
        route(k, published, report);
        ++report.periods;
        next_period_ = k + 1;

        const BarrierInfo info{k, published, timings};
        for (const auto &hook : hooks_)
            hook(info);
    }

    TickReport Scheduler::run_periods(std::int64_t n)
    {
        TickReport report;
        if (n <= 0)
            return report;
        {
            std::lock_guard lock(membership_mutex_);
            if (participants_.empty() && pending_joins_.empty())
                throw LetError("run_periods: no participant registered");
        }
        if (running_.exchange(true))
            throw LetError("run_periods: scheduler is already running");

        struct Reset
        {
            Scheduler &s;
            ~Reset()
            {
                s.running_ = false;
                s.running_period_ = -1;
            }
        } reset{*this};

        const PeriodIndex end = next_period_ + n;
        for (PeriodIndex k = next_period_; k < end; ++k)
            run_one_period(k, report);
        return report;
    }
} // namespace cpmsim::let
