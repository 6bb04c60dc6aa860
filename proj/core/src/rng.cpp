#include "miniprune/rng.hpp"

#include <cmath>

// This translation unit is compiled with -ffp-contract=off so that no
// fused multiply-add can change the bits of a draw between targets.

namespace miniprune {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

inline double bits_to_unit(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace

PhiloxBlock philox4x32_10(std::uint64_t counter, std::uint64_t stream, std::uint64_t key) {
    std::uint32_t c0 = static_cast<std::uint32_t>(counter);
    std::uint32_t c1 = static_cast<std::uint32_t>(counter >> 32);
    std::uint32_t c2 = static_cast<std::uint32_t>(stream);
    std::uint32_t c3 = static_cast<std::uint32_t>(stream >> 32);
    std::uint32_t k0 = static_cast<std::uint32_t>(key);
    std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kPhiloxM0, c0, hi0, lo0);
        mulhilo(kPhiloxM1, c2, hi1, lo1);
        const std::uint32_t n0 = hi1 ^ c1 ^ k0;
        const std::uint32_t n2 = hi0 ^ c3 ^ k1;
        c0 = n0;
        c1 = lo1;
        c2 = n2;
        c3 = lo0;
        k0 += kPhiloxW0;
        k1 += kPhiloxW1;
    }
    return PhiloxBlock{{c0, c1, c2, c3}};
}

std::uint64_t RngStream::next_u64() {
    const PhiloxBlock b = philox4x32_10(counter_++, stream_id_, seed_);
    return (static_cast<std::uint64_t>(b.w[1]) << 32) | b.w[0];
}

double RngStream::next_uniform() { return bits_to_unit(next_u64()); }

std::uint64_t RngStream::next_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double RngStream::next_gaussian() {
    // Marsaglia polar method, one Philox block per attempt.
    for (;;) {
        const PhiloxBlock b = philox4x32_10(counter_++, stream_id_, seed_);
        const double u =
            2.0 * bits_to_unit((static_cast<std::uint64_t>(b.w[1]) << 32) | b.w[0]) - 1.0;
        const double v =
            2.0 * bits_to_unit((static_cast<std::uint64_t>(b.w[3]) << 32) | b.w[2]) - 1.0;
        const double s = u * u + v * v;
        if (s >= 1.0 || s == 0.0) continue;
        return u * std::sqrt(-2.0 * portable_log(s) / s);
    }
}

float RngStream::next_sign() {
    const PhiloxBlock b = philox4x32_10(counter_++, stream_id_, seed_);
    return (b.w[0] & 1u) ? 1.0f : -1.0f;
}

double portable_log(double x) {
    if (!(x > 0.0) || std::isinf(x)) return std::log(x);
    constexpr double kLn2Hi = 6.93147180369123816490e-01;
    constexpr double kLn2Lo = 1.90821492927058770002e-10;
    constexpr double kSqrtHalf = 0.70710678118654752440;
    int e = 0;
    double m = std::frexp(x, &e);
    if (m < kSqrtHalf) {
        m *= 2.0;
        e -= 1;
    }
    // log(m) = 2 atanh(s), s = (m-1)/(m+1), |s| <= 0.1716.
    const double s = (m - 1.0) / (m + 1.0);
    const double s2 = s * s;
    double p = 1.0 / 23.0;
    for (int i = 10; i >= 0; --i) p = p * s2 + 1.0 / static_cast<double>(2 * i + 1);
    const double log_m = 2.0 * s * p;
    const double de = static_cast<double>(e);
    return de * kLn2Hi + (de * kLn2Lo + log_m);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

}  // namespace miniprune
