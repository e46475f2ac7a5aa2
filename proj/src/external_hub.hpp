#pragma once

// Runner side of the external-vehicle protocol. One socket serves every
// remote vehicle; each remote vehicle is a proxy participant on the bus.

#include "cpmsim/let/udp.hpp"
#include "cpmsim/let/wire.hpp"
#include "cpmsim/runner.hpp"

#include <chrono>
#include <map>
#include <vector>

namespace cpmsim::detail
{
    class ExternalHub
    {
    public:
        ExternalHub(const let::Endpoint &listen, std::chrono::milliseconds step_timeout);
        ~ExternalHub();

        let::Endpoint endpoint() const { return socket_.local_endpoint(); }

        /// Waits for a HELLO from every vehicle and answers with `welcome`. Throws RunError on timeout.
        void accept(const std::vector<int> &vehicle_ids, const let::wire::Welcome &welcome,
                    std::chrono::milliseconds timeout);
        const std::vector<std::string> &subscriptions(int vehicle_id) const;

        /// Forwards the inputs, waits for the outputs and publishes them. False once the client has left.
        bool step(int vehicle_id, let::StepContext &ctx);

        /// Sends BYE to every client still connected.
        void close();

        const ExternalStats &stats() const noexcept { return stats_; }

    private:
        struct Client
        {
            let::Endpoint endpoint;
            bool joined = false;
            bool left = false;
            std::vector<std::string> subscriptions;
            std::vector<let::wire::Datagram> queue;
        };

        void pump(std::chrono::microseconds timeout);
        void send(const Client &c, const let::wire::Datagram &d);

        let::UdpSocket socket_;
        std::chrono::milliseconds step_timeout_;
        let::wire::Welcome welcome_;
        std::map<int, Client> clients_;
        ExternalStats stats_;
        bool closed_ = false;
    };
} // namespace cpmsim::detail
