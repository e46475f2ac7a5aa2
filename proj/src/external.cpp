#include "external_hub.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace cpmsim
{
    namespace wire = let::wire;
    using Clock = std::chrono::steady_clock;

    namespace detail
    {
        ExternalHub::ExternalHub(const let::Endpoint &listen, std::chrono::milliseconds step_timeout)
            : step_timeout_(step_timeout)
        {
            socket_.bind(listen);
        }

        ExternalHub::~ExternalHub()
        {
            try
            {
                close();
            }
            catch (...)
            {
            }
        }

        void ExternalHub::send(const Client &c, const wire::Datagram &d) { socket_.send_to(c.endpoint, wire::encode(d)); }

        void ExternalHub::pump(std::chrono::microseconds timeout)
        {
            auto got = socket_.receive(timeout);
            if (!got)
                return;
            wire::Datagram d;
            try
            {
                d = wire::decode(got->data);
            }
            catch (const DecodeError &e)
            {
                spdlog::debug("external: dropping malformed datagram from {}: {}", got->from.to_string(), e.what());
                ++stats_.late;
                return;
            }
            auto it = clients_.find(static_cast<int>(d.sender));
            if (it == clients_.end())
            {
                spdlog::debug("external: ignoring datagram from unknown vehicle {}", d.sender);
                return;
            }
            Client &c = it->second;
            if (d.kind == wire::Kind::Hello)
            {
                c.endpoint = got->from;
                c.subscriptions = wire::decode_subscriptions(d.payload);
                if (!c.joined)
                {
                    c.joined = true;
                    ++stats_.joined;
                    spdlog::info("external vehicle {} joined from {}", it->first, got->from.to_string());
                }
                send(c, {wire::Kind::Welcome, 0, 0, "", 0, wire::encode_welcome(welcome_)});
                return;
            }
            if (!c.joined || got->from != c.endpoint)
                return;
            c.queue.push_back(std::move(d));
        }

        void ExternalHub::accept(const std::vector<int> &vehicle_ids, const wire::Welcome &welcome,
                                 std::chrono::milliseconds timeout)
        {
            welcome_ = welcome;
            for (const int id : vehicle_ids)
                clients_[id];
            const auto deadline = Clock::now() + timeout;
            auto missing = [&] {
                return std::any_of(clients_.begin(), clients_.end(), [](const auto &kv) { return !kv.second.joined; });
            };
            while (missing())
            {
                const auto left = deadline - Clock::now();
                if (left <= Clock::duration::zero())
                {
                    std::string ids;
                    for (const auto &[id, c] : clients_)
                        if (!c.joined)
                            ids += (ids.empty() ? "" : ", ") + std::to_string(id);
                    throw RunError("external vehicles did not connect in time: " + ids);
                }
                pump(std::chrono::duration_cast<std::chrono::microseconds>(left));
            }
        }

        const std::vector<std::string> &ExternalHub::subscriptions(int vehicle_id) const
        {
            return clients_.at(vehicle_id).subscriptions;
        }

        bool ExternalHub::step(int vehicle_id, let::StepContext &ctx)
        {
            Client &c = clients_.at(vehicle_id);
            if (c.left)
                return false;
            const auto period = static_cast<std::uint64_t>(ctx.period());
            send(c, {wire::Kind::Step, period, ctx.self(), "", 0, wire::encode_inputs(ctx.inputs())});
            ++stats_.steps;

            std::vector<wire::Datagram> outputs;
            std::optional<std::uint64_t> expected;
            const auto deadline = Clock::now() + step_timeout_;
            while (true)
            {
                for (auto &d : c.queue)
                {
                    if (d.kind == wire::Kind::Bye)
                        c.left = true;
                    else if (d.period != period)
                        ++stats_.late;
                    else if (d.kind == wire::Kind::Publish)
                        outputs.push_back(std::move(d));
                    else if (d.kind == wire::Kind::Step)
                        expected = d.sequence;
                }
                c.queue.clear();
                if (c.left || (expected && outputs.size() >= *expected))
                    break;
                const auto left = deadline - Clock::now();
                if (left <= Clock::duration::zero())
                {
                    ++stats_.timeouts;
                    spdlog::warn("external vehicle {} missed period {} ({} of {} outputs)", vehicle_id, period,
                                 outputs.size(), expected ? std::to_string(*expected) : "?");
                    break;
                }
                pump(std::chrono::duration_cast<std::chrono::microseconds>(left));
            }
            std::sort(outputs.begin(), outputs.end(), [](const auto &a, const auto &b) { return a.sequence < b.sequence; });
            for (auto &d : outputs)
                ctx.publish(std::move(d.topic), std::move(d.payload));
            if (c.left)
            {
                ++stats_.left;
                spdlog::info("external vehicle {} left at period {}", vehicle_id, period);
                return false;
            }
            return true;
        }

        void ExternalHub::close()
        {
            if (closed_)
                return;
            closed_ = true;
            for (const auto &[id, c] : clients_)
                if (c.joined && !c.left)
                    send(c, {wire::Kind::Bye, 0, 0, "", 0, {}});
        }
    } // namespace detail

    ClientReport run_external_vehicle(const ScenarioSpec &spec_in, int vehicle_id, const let::Endpoint &runner,
                                      const ClientOptions &options)
    {
        ScenarioSpec spec = spec_in;
        const auto &vs = spec.vehicle(vehicle_id);
        if (!vs.external)
            spdlog::warn("vehicle {} is not marked external in scenario '{}'", vehicle_id, spec.name);

        let::UdpSocket socket;
        socket.bind({0, 0});
        const auto me = static_cast<std::uint32_t>(vehicle_id);
        auto send = [&](const wire::Datagram &d) { socket.send_to(runner, wire::encode(d)); };

        // The proxy carries everything the mid-level controller needs except the on-board sensor link.
        std::vector<std::string> subs;
        for (auto &t : MidLevelController(vs.pose, vs.speed, mlc_config(spec, vs)).subscriptions())
            if (t != topics::sensors(vehicle_id))
                subs.push_back(std::move(t));
        const auto hello = wire::Datagram{wire::Kind::Hello, 0, me, "", 0, wire::encode_subscriptions(subs)};

        std::optional<wire::Welcome> welcome;
        const auto give_up = Clock::now() + options.connect_timeout;
        while (!welcome)
        {
            if (Clock::now() >= give_up)
                throw RunError(fmt::format("no answer from runner at {}", runner.to_string()));
            send(hello);
            const auto until = Clock::now() + options.hello_interval;
            while (!welcome && Clock::now() < until)
            {
                auto got = socket.receive(std::chrono::duration_cast<std::chrono::microseconds>(until - Clock::now()));
                if (!got)
                    break;
                try
                {
                    const auto d = wire::decode(got->data);
                    if (d.kind == wire::Kind::Welcome)
                        welcome = wire::decode_welcome(d.payload);
                }
                catch (const DecodeError &)
                {
                }
            }
        }
        spec.seed = welcome->seed;
        if (welcome->base_period != spec.base_period())
            throw RunError(fmt::format("runner base period {} ns does not match the scenario", welcome->base_period));
        spdlog::info("vehicle {} connected to {}", vehicle_id, runner.to_string());

        auto stack = make_vehicle_stack(spec, vehicle_id);
        const Duration dt = welcome->base_period;
        std::vector<let::Envelope> to_mlc, to_llc; // on-board links, one period of latency
        std::map<std::string, std::uint64_t> llc_seq, mlc_seq;
        std::optional<std::uint64_t> last_period;
        ClientReport report;

        auto to_envelopes = [](const std::vector<Outgoing> &out, let::ParticipantId sender, std::int64_t period,
                               std::map<std::string, std::uint64_t> &seq) {
            std::vector<let::Envelope> env;
            for (const auto &o : out)
                env.push_back({o.topic, sender, period, seq[o.topic]++, o.payload});
            return env;
        };

        while (true)
        {
            auto got = socket.receive(std::chrono::duration_cast<std::chrono::microseconds>(options.idle_timeout));
            if (!got)
            {
                spdlog::warn("vehicle {}: runner went silent", vehicle_id);
                break;
            }
            wire::Datagram d;
            try
            {
                d = wire::decode(got->data);
            }
            catch (const DecodeError &e)
            {
                spdlog::debug("vehicle {}: malformed datagram: {}", vehicle_id, e.what());
                continue;
            }
            if (d.kind == wire::Kind::Bye)
            {
                report.clean_exit = true;
                break;
            }
            if (d.kind != wire::Kind::Step || (last_period && d.period <= *last_period))
                continue;
            last_period = d.period;
            const auto k = static_cast<std::int64_t>(d.period);
            const Time now = k * dt;

            auto mlc_in = wire::decode_inputs(d.payload);
            mlc_in.insert(mlc_in.end(), to_mlc.begin(), to_mlc.end());
            std::sort(mlc_in.begin(), mlc_in.end(), let::delivery_order);
            const auto mo = stack.mlc.step(mlc_in, now, dt);
            const auto lo = stack.llc.step(to_llc, now, dt);

            std::vector<Outgoing> published;
            to_llc.clear();
            for (auto &e : to_envelopes(mo, participant::mlc(vehicle_id), k, mlc_seq))
            {
                published.push_back({e.topic, e.payload});
                if (e.topic == topics::command(vehicle_id))
                    to_llc.push_back(std::move(e));
            }
            to_mlc.clear();
            for (auto &e : to_envelopes(lo, participant::llc(vehicle_id), k, llc_seq))
            {
                if (e.topic == topics::sensors(vehicle_id))
                    to_mlc.push_back(std::move(e));
                else
                    published.push_back({e.topic, e.payload});
            }
            std::uint64_t seq = 0;
            for (auto &o : published)
                send({wire::Kind::Publish, d.period, me, std::move(o.topic), seq++, std::move(o.payload)});
            send({wire::Kind::Step, d.period, me, "", seq, {}});
            ++report.steps;
        }
        if (!report.clean_exit)
            send({wire::Kind::Bye, last_period.value_or(0), me, "", 0, {}});
        return report;
    }
} // namespace cpmsim
