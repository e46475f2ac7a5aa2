#pragma once

// Datagram protocol for participants hosted in another process.
//
//   magic   u32  0x43504D31 ("CPM1")
//   version u8   1
//   kind    u8   HELLO=0 WELCOME=1 STEP=2 PUBLISH=3 BYE=4
//   period  u64
//   sender  u32
//   topic   u16 length + UTF-8 bytes
//   seq     u64
//   payload u32 length + bytes
//
// All integers little-endian.

#include "cpmsim/codec.hpp"
#include "cpmsim/let/scheduler.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cpmsim::let::wire
{
    inline constexpr std::uint32_t kMagic = 0x43504D31;
    inline constexpr std::uint8_t kVersion = 1;
    inline constexpr std::size_t kHeaderSize = 4 + 1 + 1 + 8 + 4;

    enum class Kind : std::uint8_t
    {
        Hello = 0,
        Welcome = 1,
        Step = 2,
        Publish = 3,
        Bye = 4,
    };

    struct Datagram
    {
        Kind kind = Kind::Hello;
        std::uint64_t period = 0;
        std::uint32_t sender = 0;
        std::string topic;
        std::uint64_t sequence = 0;
        Bytes payload;

        friend bool operator==(const Datagram &, const Datagram &) = default;
    };

    Bytes encode(const Datagram &d);
    /// Throws DecodeError on bad magic, unknown version or kind, or malformed lengths.
    Datagram decode(std::span<const std::uint8_t> bytes);

    /// HELLO payload: the topic patterns the remote participant subscribes to.
    Bytes encode_subscriptions(const std::vector<std::string> &topics);
    std::vector<std::string> decode_subscriptions(std::span<const std::uint8_t> payload);

    struct Welcome
    {
        std::uint64_t seed = 0;
        Duration base_period = 0;
        std::uint32_t period_multiple = 1;
        PeriodIndex first_period = 0;

        friend bool operator==(const Welcome &, const Welcome &) = default;
    };
    Bytes encode_welcome(const Welcome &w);
    Welcome decode_welcome(std::span<const std::uint8_t> payload);

    /// STEP payload sent to the remote side: the LET-frozen input snapshot.
    Bytes encode_inputs(std::span<const Envelope> inputs);
    std::vector<Envelope> decode_inputs(std::span<const std::uint8_t> payload);
} // namespace cpmsim::let::wire
