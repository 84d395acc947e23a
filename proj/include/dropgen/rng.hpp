#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace dropgen {

// splitmix64, used for seeding and for hashing small key tuples into stream seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

// xoshiro256++ with explicit, copyable state. All sampling in the project goes
// through this generator so that runs are bit-reproducible across platforms;
// std:: distributions are avoided because their algorithms are unspecified.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. No cached spare draw: the generator state
    // alone determines the stream, which keeps serialization/resume trivial.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Unbiased-enough bounded draw (Lemire multiply-shift); deterministic.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
    }

    const std::array<uint64_t, 4>& state() const { return state_; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

// Stream tags keep independent random purposes (init, batching, masks, ...)
// on provably disjoint seeds derived from one run seed.
enum class StreamTag : uint64_t {
    init = 0x11,
    batch = 0x22,
    mask = 0x33,
    label = 0x44,
    stable = 0x55,
    unstable = 0x66,
    noise = 0x77,
    misc = 0x88,
};

inline Rng stream_rng(uint64_t seed, StreamTag tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t s = mix64(seed, static_cast<uint64_t>(tag));
    s = mix64(s, a);
    s = mix64(s, b);
    return Rng(s);
}

}  // namespace dropgen
