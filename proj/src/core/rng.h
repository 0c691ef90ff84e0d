#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace m2repa {

// splitmix64 step; doubles as the mixer for seed derivation.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Named stream splitting: every random draw in the project comes from a
// stream derived as (master seed, purpose tag, index). Same inputs, same
// stream, on any platform.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t s = master;
    (void)splitmix64(s);
    s ^= fnv1a64(tag);
    (void)splitmix64(s);
    s ^= 0x9E3779B97F4A7C15ull + index;
    return splitmix64(s);
}

// Self-contained generator (no std::*_distribution, whose output is
// implementation-defined). uniform() has 24 mantissa bits; normal() is
// Box-Muller evaluated in double.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    float uniform() {
        return static_cast<float>((next_u64() >> 40) * (1.0 / 16777216.0));
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // [0, n); n > 0
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so log() stays finite
        double u1 = ((next_u64() >> 11) + 1.0) * (1.0 / 9007199254740993.0);
        double u2 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        has_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

private:
    std::uint64_t state_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

}  // namespace m2repa
