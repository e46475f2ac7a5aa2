#include "cpmsim/let/wire.hpp"

#include <fmt/format.h>

namespace cpmsim::let::wire
{
    Bytes encode(const Datagram &d)
    {
        ByteWriter w;
        w.u32(kMagic);
        w.u8(kVersion);
        w.u8(static_cast<std::uint8_t>(d.kind));
        w.u64(d.period);
        w.u32(d.sender);
        w.str16(d.topic);
        w.u64(d.sequence);
        w.bytes32(d.payload);
        return w.take();
    }

    Datagram decode(std::span<const std::uint8_t> bytes)
    {
        ByteReader r(bytes);
        const auto magic = r.u32();
        if (magic != kMagic)
            throw DecodeError(fmt::format("bad magic 0x{:08X}", magic));
        const auto version = r.u8();
        if (version != kVersion)
            throw DecodeError(fmt::format("unsupported protocol version {}", version));
        const auto kind = r.u8();
        if (kind > static_cast<std::uint8_t>(Kind::Bye))
            throw DecodeError(fmt::format("unknown message kind {}", kind));

        Datagram d;
        d.kind = static_cast<Kind>(kind);
        d.period = r.u64();
        d.sender = r.u32();
        d.topic = r.str16();
        d.sequence = r.u64();
        d.payload = r.bytes32();
        r.expect_done();
        return d;
    }

    Bytes encode_subscriptions(const std::vector<std::string> &topics)
    {
        ByteWriter w;
        w.u16(static_cast<std::uint16_t>(topics.size()));
        for (const auto &t : topics)
            w.str16(t);
        return w.take();
    }

    std::vector<std::string> decode_subscriptions(std::span<const std::uint8_t> payload)
    {
        ByteReader r(payload);
        const auto n = r.u16();
        if (n * std::size_t{2} > r.remaining())
            throw DecodeError("subscription count exceeds payload");
        std::vector<std::string> out(n);
        for (auto &t : out)
            t = r.str16();
        r.expect_done();
        return out;
    }

    Bytes encode_welcome(const Welcome &w)
    {
        ByteWriter b;
        b.u64(w.seed);
        b.i64(w.base_period);
        b.u32(w.period_multiple);
        b.i64(w.first_period);
        return b.take();
    }

    Welcome decode_welcome(std::span<const std::uint8_t> payload)
    {
        ByteReader r(payload);
        Welcome w;
        w.seed = r.u64();
        w.base_period = r.i64();
        w.period_multiple = r.u32();
        w.first_period = r.i64();
        r.expect_done();
        return w;
    }

    Bytes encode_inputs(std::span<const Envelope> inputs)
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(inputs.size()));
        for (const auto &e : inputs)
        {
            w.i64(e.publish_period);
            w.u32(e.sender_id);
            w.str16(e.topic);
            w.u64(e.sequence);
            w.bytes32(e.payload);
        }
        return w.take();
    }

    std::vector<Envelope> decode_inputs(std::span<const std::uint8_t> payload)
    {
        ByteReader r(payload);
        const auto n = r.u32();
        if (n > r.remaining())
            throw DecodeError("input count exceeds payload");
        std::vector<Envelope> out(n);
        for (auto &e : out)
        {
            e.publish_period = r.i64();
            e.sender_id = r.u32();
            e.topic = r.str16();
            e.sequence = r.u64();
            e.payload = r.bytes32();
        }
        r.expect_done();
        return out;
    }
} // namespace cpmsim::let::wire
