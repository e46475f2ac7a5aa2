#pragma once

#include "cpmsim/codec.hpp"

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <netinet/in.h>

namespace cpmsim::let
{
    struct Endpoint
    {
        std::uint32_t address = 0; // host byte order
        std::uint16_t port = 0;

        /// Parses "a.b.c.d:port"; "localhost" is accepted for 127.0.0.1.
        static Endpoint parse(std::string_view text);
        std::string to_string() const;
        friend bool operator==(const Endpoint &, const Endpoint &) = default;
    };

    struct Received
    {
        Bytes data;
        Endpoint from;
    };

    /// Thin RAII wrapper over an IPv4 datagram socket.
    class UdpSocket
    {
    public:
        UdpSocket();
        ~UdpSocket();
        UdpSocket(UdpSocket &&other) noexcept;
        UdpSocket &operator=(UdpSocket &&other) noexcept;
        UdpSocket(const UdpSocket &) = delete;
        UdpSocket &operator=(const UdpSocket &) = delete;

        void bind(const Endpoint &local);
        /// Actual bound endpoint (useful with port 0).
        Endpoint local_endpoint() const;
        void send_to(const Endpoint &to, std::span<const std::uint8_t> data);
        /// Waits at most `timeout`; nullopt on timeout.
        std::optional<Received> receive(std::chrono::microseconds timeout);

    private:
        int fd_ = -1;
    };
} // namespace cpmsim::let
