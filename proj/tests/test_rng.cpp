#include "isac/rng.hpp"

#include <gtest/gtest.h>

#include <set>

using isac::Philox4x32;

// Known-answer vectors of the Philox4x32-10 reference implementation.
TEST(Philox, KnownAnswerZero)
{
    const auto out = Philox4x32::bijection({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(out, (Philox4x32::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerOnes)
{
    const auto out = Philox4x32::bijection({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                           {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(out, (Philox4x32::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi)
{
    const auto out = Philox4x32::bijection({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                           {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(out, (Philox4x32::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, SameStreamRepeats)
{
    Philox4x32 a(42, 3, 1);
    Philox4x32 b(42, 3, 1);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a(), b());
    }
}

TEST(Philox, DiscardMatchesDrawing)
{
    Philox4x32 a(5, 0, 0);
    Philox4x32 b(5, 0, 0);
    for (int i = 0; i < 7; ++i) {
        a();
    }
    b.discard(7);
    EXPECT_EQ(a(), b());
}

TEST(Philox, NeighbouringSeedsRunsAndSubstreamsDoNotOverlap)
{
    std::set<std::uint64_t> seen;
    std::size_t total = 0;
    for (std::uint64_t seed : {7ull, 8ull}) {
        for (std::uint32_t run = 0; run < 4; ++run) {
            for (std::uint32_t sub = 0; sub < 3; ++sub) {
                Philox4x32 g(seed, run, sub);
                for (int i = 0; i < 2000; ++i) {
                    seen.insert(g());
                    ++total;
                }
            }
        }
    }
    EXPECT_EQ(seen.size(), total);
}

TEST(GaussianSource, MomentsAreStandard)
{
    auto g = isac::make_stream(1, 0, isac::Substream::Measurement);
    constexpr int n = 200000;
    double sum = 0.0;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = g();
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
    EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.02);
}
