#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace voidkit {

// splitmix64; used to derive independent stream seeds from (seed, salt).
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_name(std::string_view name) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

/// PCG32: deterministic across platforms, unlike std:: distributions.
/// All randomness in the toolkit flows through this generator.
class Pcg32 {
public:
    explicit Pcg32(uint64_t seed, uint64_t stream = 0) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    // uniform in [0,1)
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(static_cast<uint64_t>(next_u32()) * static_cast<uint64_t>(n) >> 32);
    }

    // Box-Muller; draws two uniforms per sample, spare discarded so the
    // generator state never depends on call history.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-12) u1 = 1e-12;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
    uint64_t inc_;
};

/// Named substream: weights of component "detector.conv1" etc. depend only on
/// (seed, component name), never on construction order.
inline Pcg32 stream_for(uint64_t seed, std::string_view component) {
    uint64_t h = hash_name(component);
    return Pcg32(mix_seed(seed, h), h | 1u);
}

}  // namespace voidkit
