#pragma once

#include <cstdint>
#include <string_view>

namespace miniprune {

/// Counter-based random stream (Philox4x32-10).
///
/// The full state is (seed, stream_id, counter); each draw consumes one
/// Philox block and increments the counter. Integer arithmetic only, so
/// sequences are identical on every platform. Gaussian draws go through a
/// polar method built on basic IEEE operations and a portable logarithm.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
        : seed_(seed), stream_id_(stream_id), counter_(counter) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64();
    // Uniform in [0, 1) with 53 random bits.
    double next_uniform();
    // Uniform integer in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n);
    double next_gaussian();
    // +1 or -1 with equal probability.
    float next_sign();

    bool operator==(const RngStream&) const = default;

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t counter_;
};

struct PhiloxBlock {
    std::uint32_t w[4];
};
PhiloxBlock philox4x32_10(std::uint64_t counter, std::uint64_t stream, std::uint64_t key);

/// Natural log from +, -, *, / only; bit-identical on IEEE-754 targets.
double portable_log(double x);

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t mix64(std::uint64_t x);

}  // namespace miniprune
