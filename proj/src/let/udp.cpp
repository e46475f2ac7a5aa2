#include "cpmsim/let/udp.hpp"

#include "cpmsim/let/scheduler.hpp"

#include <fmt/format.h>

#include <arpa/inet.h>
#include <cerrno>
#include <cstring>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace cpmsim::let
{
    namespace
    {
        sockaddr_in to_sockaddr(const Endpoint &e)
        {
            sockaddr_in sa{};
            sa.sin_family = AF_INET;
            sa.sin_addr.s_addr = htonl(e.address);
            sa.sin_port = htons(e.port);
            return sa;
        }

        [[noreturn]] void fail(const char *what)
        {
            throw LetError(fmt::format("udp {}: {}", what, std::strerror(errno)));
        }
    } // namespace

    Endpoint Endpoint::parse(std::string_view text)
    {
        const auto colon = text.rfind(':');
        if (colon == std::string_view::npos)
            throw LetError(fmt::format("endpoint '{}' lacks ':port'", text));
        std::string host(text.substr(0, colon));
        if (host == "localhost")
            host = "127.0.0.1";
        in_addr addr{};
        if (inet_pton(AF_INET, host.c_str(), &addr) != 1)
            throw LetError(fmt::format("endpoint '{}': bad IPv4 address", text));
        const std::string port_text(text.substr(colon + 1));
        char *end = nullptr;
        const long port = std::strtol(port_text.c_str(), &end, 10);
        if (port_text.empty() || *end != '\0' || port < 0 || port > 65535)
            throw LetError(fmt::format("endpoint '{}': bad port", text));
        return Endpoint{ntohl(addr.s_addr), static_cast<std::uint16_t>(port)};
    }

    std::string Endpoint::to_string() const
    {
        return fmt::format("{}.{}.{}.{}:{}", (address >> 24) & 0xFF, (address >> 16) & 0xFF, (address >> 8) & 0xFF,
                           address & 0xFF, port);
    }

    UdpSocket::UdpSocket()
    {
        fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
        if (fd_ < 0)
            fail("socket");
    }

    UdpSocket::~UdpSocket()
    {
        if (fd_ >= 0)
            ::close(fd_);
    }

    UdpSocket::UdpSocket(UdpSocket &&other) noexcept : fd_(std::exchange(other.fd_, -1)) {}

    UdpSocket &UdpSocket::operator=(UdpSocket &&other) noexcept
    {
        if (this != &other)
        {
            if (fd_ >= 0)
                ::close(fd_);
            fd_ = std::exchange(other.fd_, -1);
        }
        return *this;
    }

    void UdpSocket::bind(const Endpoint &local)
    {
        const auto sa = to_sockaddr(local);
        if (::bind(fd_, reinterpret_cast<const sockaddr *>(&sa), sizeof sa) != 0)
            fail("bind");
    }

    Endpoint UdpSocket::local_endpoint() const
    {
        sockaddr_in sa{};
        socklen_t len = sizeof sa;
        if (::getsockname(fd_, reinterpret_cast<sockaddr *>(&sa), &len) != 0)
            fail("getsockname");
        return Endpoint{ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port)};
    }

    void UdpSocket::send_to(const Endpoint &to, std::span<const std::uint8_t> data)
    {
        const auto sa = to_sockaddr(to);
        const auto n = ::sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<const sockaddr *>(&sa), sizeof sa);
        if (n < 0)
            fail("sendto");
    }

    std::optional<Received> UdpSocket::receive(std::chrono::microseconds timeout)
    {
        pollfd pfd{fd_, POLLIN, 0};
        const int ms = static_cast<int>((timeout.count() + 999) / 1000);
        const int ready = ::poll(&pfd, 1, ms);
        if (ready < 0)
        {
            if (errno == EINTR)
                return std::nullopt;
            fail("poll");
        }
        if (ready == 0)
            return std::nullopt;

        Received r;
        r.data.resize(65536);
        sockaddr_in sa{};
        socklen_t len = sizeof sa;
        const auto n = ::recvfrom(fd_, r.data.data(), r.data.size(), 0, reinterpret_cast<sockaddr *>(&sa), &len);
        if (n < 0)
            fail("recvfrom");
        r.data.resize(static_cast<std::size_t>(n));
        r.from = Endpoint{ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port)};
        return r;
    }
} // namespace cpmsim::let
