#pragma once

// Fixed-width little-endian byte encoding shared by payloads, the wire
// protocol and the trace format.

#include "cpmsim/types.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cpmsim
{
    using Bytes = std::vector<std::uint8_t>;

    class DecodeError : public Error
    {
    public:
        using Error::Error;
    };

    class ByteWriter
    {
    public:
        ByteWriter() = default;
        explicit ByteWriter(Bytes &out) : out_(&out) {}

        void u8(std::uint8_t v) { buf().push_back(v); }
        void u16(std::uint16_t v) { put_le(v); }
        void u32(std::uint32_t v) { put_le(v); }
        void u64(std::uint64_t v) { put_le(v); }
        void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
        void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
        void str16(std::string_view s);
        void bytes32(std::span<const std::uint8_t> b);
        void raw(std::span<const std::uint8_t> b) { buf().insert(buf().end(), b.begin(), b.end()); }

        Bytes take() { return std::move(own_); }
        const Bytes &data() const { return out_ ? *out_ : own_; }

    private:
        Bytes &buf() { return out_ ? *out_ : own_; }

        template <typename T>
        void put_le(T v)
        {
            for (std::size_t i = 0; i < sizeof(T); ++i)
                buf().push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }

        Bytes *out_ = nullptr;
        Bytes own_;
    };

    class ByteReader
    {
    public:
        explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

        std::uint8_t u8() { return get_le<std::uint8_t>(); }
        std::uint16_t u16() { return get_le<std::uint16_t>(); }
        std::uint32_t u32() { return get_le<std::uint32_t>(); }
        std::uint64_t u64() { return get_le<std::uint64_t>(); }
        std::int64_t i64() { return static_cast<std::int64_t>(get_le<std::uint64_t>()); }
        double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
        std::string str16();
        Bytes bytes32();
        std::span<const std::uint8_t> raw(std::size_t n);

        std::size_t remaining() const noexcept { return data_.size() - pos_; }
        bool done() const noexcept { return pos_ == data_.size(); }
        void expect_done() const
        {
            if (!done())
                throw DecodeError("trailing bytes after message");
        }

    private:
        void need(std::size_t n) const
        {
            if (remaining() < n)
                throw DecodeError("truncated message");
        }

        template <typename T>
        T get_le()
        {
            need(sizeof(T));
            T v = 0;
            for (std::size_t i = 0; i < sizeof(T); ++i)
                v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
            pos_ += sizeof(T);
            return v;
        }

        std::span<const std::uint8_t> data_;
        std::size_t pos_ = 0;
    };

    inline void ByteWriter::str16(std::string_view s)
    {
        if (s.size() > 0xFFFF)
            throw Error("string too long for 16-bit length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        buf().insert(buf().end(), s.begin(), s.end());
    }

    inline void ByteWriter::bytes32(std::span<const std::uint8_t> b)
    {
        u32(static_cast<std::uint32_t>(b.size()));
        raw(b);
    }

    inline std::string ByteReader::str16()
    {
        const auto n = u16();
        auto r = raw(n);
        return std::string(r.begin(), r.end());
    }

    inline Bytes ByteReader::bytes32()
    {
        const auto n = u32();
        auto r = raw(n);
        return Bytes(r.begin(), r.end());
    }

    inline std::span<const std::uint8_t> ByteReader::raw(std::size_t n)
    {
        need(n);
        auto r = data_.subspan(pos_, n);
        pos_ += n;
        return r;
    }
} // namespace cpmsim
