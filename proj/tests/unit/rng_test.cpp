#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "miniprune/rng.hpp"

using namespace miniprune;

// Known-answer vectors published with the Philox4x32-10 reference code.
TEST(Philox, KnownAnswerZero) {
    const PhiloxBlock b = philox4x32_10(0, 0, 0);
    EXPECT_EQ(b.w[0], 0x6627e8d5u);
    EXPECT_EQ(b.w[1], 0xe169c58du);
    EXPECT_EQ(b.w[2], 0xbc57ac4cu);
    EXPECT_EQ(b.w[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerOnes) {
    const PhiloxBlock b = philox4x32_10(~0ull, ~0ull, ~0ull);
    EXPECT_EQ(b.w[0], 0x408f276du);
    EXPECT_EQ(b.w[1], 0x41c83b0eu);
    EXPECT_EQ(b.w[2], 0xa20bc7c6u);
    EXPECT_EQ(b.w[3], 0x6d5451fdu);
}

TEST(RngStream, StateIsTriple) {
    RngStream a(9, 4);
    for (int i = 0; i < 5; ++i) a.next_u64();
    RngStream b(9, 4, a.counter());
    EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, StreamsDiffer) {
    RngStream a(1, 1), b(1, 2), c(2, 1);
    const auto x = a.next_u64();
    EXPECT_NE(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
}

TEST(RngStream, UniformAndBelowRanges) {
    RngStream r(5, 5);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const double u = r.next_uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        const auto k = r.next_below(7);
        ASSERT_LT(k, 7u);
        seen.insert(k);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(PortableLog, AgreesWithStdLog) {
    for (double x : {1e-300, 1e-9, 0.1, 0.5, 1.0, 2.0, 3.14159, 1e10, 1e300}) {
        EXPECT_NEAR(portable_log(x), std::log(x), 1e-13 * std::max(1.0, std::fabs(std::log(x)))) << x;
    }
}

TEST(Hashing, FnvKnownValues) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
    EXPECT_NE(mix64(1), mix64(2));
}
