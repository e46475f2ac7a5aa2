#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace cpmsim
{
    constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
    {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ull) noexcept
    {
        for (const char c : s)
        {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ull;
        }
        return h;
    }

    inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xCBF29CE484222325ull) noexcept
    {
        for (const auto b : bytes)
        {
            h ^= b;
            h *= 0x100000001B3ull;
        }
        return h;
    }

    /// Order-sensitive combination of two 64-bit keys.
    constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept
    {
        return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ull));
    }

    /// Key of the named stream (seed, owner, name).
    constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t owner, std::string_view name) noexcept
    {
        return hash_combine(hash_combine(seed, owner), fnv1a(name));
    }

    /// Uniform double in [0, 1) from a 64-bit hash (53 significant bits).
    constexpr double unit_from_hash(std::uint64_t h) noexcept
    {
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    }

    /// Deterministic random stream identified by (seed, owner id, name).
    ///
    /// Streams with different keys are independent, so adding an owner never
    /// perturbs the draws seen by others.
    class RngStream
    {
    public:
        RngStream() : RngStream(0, 0, "default") {}
        RngStream(std::uint64_t seed, std::uint64_t owner, std::string_view name)
            : engine_(stream_key(seed, owner, name))
        {
        }

        double uniform() { return unit_from_hash(engine_()); }
        double gaussian(double sigma)
        {
            if (sigma == 0.0)
                return 0.0;
            return sigma * normal_(engine_);
        }
        bool bernoulli(double p) { return uniform() < p; }
        std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
        std::uint64_t next_u64() { return engine_(); }

    private:
        std::mt19937_64 engine_;
        std::normal_distribution<double> normal_{0.0, 1.0};
    };
} // namespace cpmsim
