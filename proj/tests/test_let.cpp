#include <doctest.h>

#include "cpmsim/let/scheduler.hpp"
#include "cpmsim/let/wire.hpp"

#include <map>
#include <set>

using namespace cpmsim;
using namespace cpmsim::let;

namespace
{
    Bytes bytes_of(std::uint64_t v)
    {
        ByteWriter w;
        w.u64(v);
        return w.take();
    }

    std::uint64_t value_of(const Bytes &b)
    {
        ByteReader r(b);
        return r.u64();
    }

    LetConfig base_config()
    {
        LetConfig c;
        c.period = milliseconds(20);
        c.seed = 5;
        c.record_delivery_log = true;
        return c;
    }
} // namespace

TEST_CASE("step counting and late registration")
{
    Scheduler s(base_config());
    int steps_a = 0;
    std::vector<PeriodIndex> b_periods;
    s.register_participant(1, {}, [&](StepContext &) { ++steps_a; });
    CHECK(s.run_periods(0).empty());
    s.run_periods(3);
    CHECK(steps_a == 3);
    s.run_periods(3);
    const auto first = s.register_participant(2, {}, [&](StepContext &c) { b_periods.push_back(c.period()); });
    CHECK(first == 6);
    s.run_periods(2);
    REQUIRE(b_periods.size() == 2);
    CHECK(b_periods.front() == 6);
    CHECK_THROWS_AS(s.register_participant(1, {}, [](StepContext &) {}), LetError);
}

TEST_CASE("publish in period 0 is seen in period 1")
{
    Scheduler s(base_config());
    std::map<PeriodIndex, std::vector<std::uint64_t>> seen;
    s.register_participant(1, {}, [](StepContext &c) { c.publish("t", bytes_of(static_cast<std::uint64_t>(c.period()))); });
    s.register_participant(2, {"t"}, [&](StepContext &c) {
        for (const auto &e : c.inputs())
            seen[c.period()].push_back(value_of(e.payload));
    });
    s.run_periods(4);
    CHECK(seen.count(0) == 0);
    CHECK(seen[1] == std::vector<std::uint64_t>{0});
    CHECK(seen[3] == std::vector<std::uint64_t>{2});
}

TEST_CASE("same-step publishes keep sequence order")
{
    Scheduler s(base_config());
    std::vector<std::uint64_t> seqs;
    s.register_participant(1, {}, [](StepContext &c) {
        if (c.period() == 0)
        {
            CHECK(c.publish("t", bytes_of(1)) == 0);
            CHECK(c.publish("t", bytes_of(2)) == 1);
            c.publish("nobody/listens", bytes_of(3));
        }
    });
    s.register_participant(2, {"t"}, [&](StepContext &c) {
        for (const auto &e : c.inputs())
            seqs.push_back(e.sequence);
    });
    s.run_periods(2);
    CHECK(seqs == std::vector<std::uint64_t>{0, 1});
    CHECK(s.topic_stats().at("nobody/listens").unrouted == 1);
}

TEST_CASE("publish outside a step is rejected")
{
    Scheduler s(base_config());
    s.register_participant(1, {}, [](StepContext &) {});
    CHECK_THROWS_AS(s.publish(1, "t", {}), LetError);
}

TEST_CASE("deregistration keeps in-flight messages")
{
    Scheduler s(base_config());
    std::vector<PeriodIndex> a_steps;
    std::vector<std::pair<PeriodIndex, std::uint64_t>> got;
    s.register_participant(1, {}, [&](StepContext &c) {
        a_steps.push_back(c.period());
        c.publish("t", bytes_of(static_cast<std::uint64_t>(c.period())));
    });
    s.register_participant(2, {"t"}, [&](StepContext &c) {
        for (const auto &e : c.inputs())
            got.emplace_back(c.period(), value_of(e.payload));
    });
    s.run_periods(3);
    const auto leave = s.deregister_participant(1);
    CHECK(leave == 3);
    s.run_periods(3);
    CHECK(a_steps.back() == 2);
    REQUIRE(!got.empty());
    CHECK(got.back() == std::pair<PeriodIndex, std::uint64_t>{3, 2});
    CHECK_THROWS_AS(s.deregister_participant(99), LetError);
}

TEST_CASE("loss 1 delivers nothing, loss 0.5 replays identically")
{
    auto run = [](double loss) {
        auto cfg = base_config();
        cfg.faults.loss_probability = loss;
        Scheduler s(cfg);
        s.register_participant(1, {}, [](StepContext &c) { c.publish("t", bytes_of(1)); });
        s.register_participant(2, {"t"}, [](StepContext &) {});
        s.register_participant(3, {"t"}, [](StepContext &) {});
        s.run_periods(200);
        return s.delivery_log();
    };
    CHECK(run(1.0).empty());
    const auto a = run(0.5);
    const auto b = run(0.5);
    CHECK(a == b);
    CHECK(a.size() > 100);
    CHECK(a.size() < 300);

    // Lossless log is a superset of the lossy one.
    const auto full = run(0.0);
    std::set<std::tuple<PeriodIndex, ParticipantId, std::uint64_t>> all;
    for (const auto &r : full)
        all.emplace(r.delivery_period, r.subscriber, r.sequence);
    for (const auto &r : a)
        CHECK(all.count({r.delivery_period, r.subscriber, r.sequence}) == 1);
}

TEST_CASE("execution order does not change the delivery log")
{
    auto run = [](ExecutionMode mode, std::uint64_t shuffle) {
        auto cfg = base_config();
        cfg.faults.loss_probability = 0.2;
        cfg.faults.extra_delay_periods = 2;
        cfg.execution.mode = mode;
        cfg.execution.shuffle_seed = shuffle;
        Scheduler s(cfg);
        for (ParticipantId id = 1; id <= 6; ++id)
            s.register_participant(id, {"t/*"}, [id](StepContext &c) {
                std::uint64_t acc = id;
                for (const auto &e : c.inputs())
                    acc = acc * 31 + value_of(e.payload);
                c.publish("t/" + std::to_string(id), bytes_of(acc));
            });
        s.run_periods(100);
        return std::pair{s.delivery_log(), s.delivery_digest()};
    };
    const auto seq = run(ExecutionMode::Sequential, 0);
    CHECK(run(ExecutionMode::Shuffled, 1) == seq);
    CHECK(run(ExecutionMode::Shuffled, 2) == seq);
    CHECK(run(ExecutionMode::Parallel, 0) == seq);
}

TEST_CASE("multi-rate release waits for the publisher's period end")
{
    Scheduler s(base_config());
    std::vector<std::pair<PeriodIndex, PeriodIndex>> got; // (delivery, publish)
    s.register_participant(1, {}, [](StepContext &c) { c.publish("slow", bytes_of(0)); }, {5, 0});
    s.register_participant(2, {"slow"}, [&](StepContext &c) {
        for (const auto &e : c.inputs())
            got.emplace_back(c.period(), e.publish_period);
    });
    s.run_periods(12);
    REQUIRE(got.size() == 2);
    CHECK(got[0] == std::pair<PeriodIndex, PeriodIndex>{5, 0});
    CHECK(got[1] == std::pair<PeriodIndex, PeriodIndex>{10, 5});
}

TEST_CASE("step failure reports the period")
{
    Scheduler s(base_config());
    s.register_participant(4, {}, [](StepContext &c) {
        if (c.period() == 2)
            throw std::runtime_error("boom");
    });
    try
    {
        s.run_periods(5);
        FAIL("expected StepFailure");
    }
    catch (const StepFailure &f)
    {
        CHECK(f.period() == 2);
        CHECK(f.participant() == 4);
    }
}

TEST_CASE("message conservation per topic")
{
    auto cfg = base_config();
    cfg.faults.loss_probability = 0.3;
    cfg.faults.extra_delay_periods = 3;
    Scheduler s(cfg);
    s.register_participant(1, {}, [](StepContext &c) { c.publish("a", bytes_of(1)); });
    s.register_participant(2, {"a"}, [](StepContext &) {});
    s.register_participant(3, {"a"}, [](StepContext &) {});
    s.run_periods(50);
    s.deregister_participant(3);
    s.run_periods(50);
    const auto &st = s.topic_stats().at("a");
    CHECK(st.copies == st.delivered + st.lost + st.discarded + st.pending);
    CHECK(st.discarded + st.pending > 0);
}

TEST_CASE("topic wildcard matches one segment")
{
    CHECK(topic_matches("vehicle/*/fused", "vehicle/3/fused"));
    CHECK_FALSE(topic_matches("vehicle/*/fused", "vehicle/3/x/fused"));
    CHECK_FALSE(topic_matches("vehicle/*", "vehicle/3/fused"));
    CHECK(topic_matches("ips/poses", "ips/poses"));
}

TEST_CASE("wire datagram round trip and rejection")
{
    wire::Datagram d;
    d.kind = wire::Kind::Publish;
    d.period = 77;
    d.sender = 2001;
    d.topic = "vehicle/1/fused";
    d.sequence = 9;
    d.payload = {1, 2, 3};
    const auto bytes = wire::encode(d);
    CHECK(wire::decode(bytes) == d);

    auto bad = bytes;
    bad[0] ^= 0xFF;
    CHECK_THROWS_AS(wire::decode(bad), DecodeError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(wire::decode(trailing), DecodeError);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(wire::decode(truncated), DecodeError);
}
