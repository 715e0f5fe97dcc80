#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace isac {

/// Counter-based Philox4x32-10 generator (Salmon et al., Random123).
///
/// A stream is identified by (seed, run, substream): the seed is the key and
/// run/substream occupy the high counter words, so distinct streams never
/// share a counter block. Draws within a stream walk the low 64 counter bits.
class Philox4x32 {
public:
    using result_type = std::uint64_t;
    using Block = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    Philox4x32(std::uint64_t seed, std::uint32_t run = 0, std::uint32_t substream = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          run_(run), substream_(substream)
    {
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()()
    {
        if (lane_ == 2) {
            refill();
        }
        const auto lo = static_cast<std::uint64_t>(buffer_[2 * lane_]);
        const auto hi = static_cast<std::uint64_t>(buffer_[2 * lane_ + 1]);
        ++lane_;
        return lo | (hi << 32);
    }

    void discard(std::uint64_t n)
    {
        for (std::uint64_t i = 0; i < n; ++i) {
            (*this)();
        }
    }

    static Block bijection(Block ctr, Key key)
    {
        constexpr std::uint32_t m0 = 0xD2511F53u;
        constexpr std::uint32_t m1 = 0xCD9E8D57u;
        constexpr std::uint32_t w0 = 0x9E3779B9u;
        constexpr std::uint32_t w1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const auto lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const auto lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += w0;
            key[1] += w1;
        }
        return ctr;
    }

private:
    void refill()
    {
        const Block ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32), run_,
                        substream_};
        buffer_ = bijection(ctr, key_);
        ++block_;
        lane_ = 0;
    }

    Key key_;
    std::uint32_t run_;
    std::uint32_t substream_;
    std::uint64_t block_ = 0;
    Block buffer_{};
    int lane_ = 2;
};

/// Independent substreams used by one Monte-Carlo replication.
enum class Substream : std::uint32_t { Truth = 0, Measurement = 1, Init = 2 };

/// Standard-normal source bound to one stream.
class GaussianSource {
public:
    explicit GaussianSource(Philox4x32 engine) : engine_(engine) {}

    double operator()() { return normal_(engine_); }

private:
    Philox4x32 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

inline GaussianSource make_stream(std::uint64_t seed, std::uint32_t run, Substream which)
{
    return GaussianSource(Philox4x32(seed, run, static_cast<std::uint32_t>(which)));
}

} // namespace isac
