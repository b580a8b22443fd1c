#pragma once

#include <cmath>
#include <cstdint>

namespace duvsynth {

namespace detail {

// splitmix64 finalizer. Pure integer arithmetic, so the stream is
// bit-identical on every platform.
inline uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

}  // namespace detail

// Counter-based deterministic RNG. State is (seed, counter); sample i of a
// stream is a pure function of both, so streams can be forked without
// touching the parent and replayed exactly.
struct Rng {
    uint64_t seed = 0;
    uint64_t counter = 0;

    Rng() = default;
    explicit Rng(uint64_t s) : seed(s) {}

    uint64_t next_u64() {
        uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
        return detail::mix64(z);
    }

    // Derives an independent stream; fork(a) != fork(b) for a != b and the
    // child stream does not advance this one.
    Rng fork(uint64_t stream) const {
        return Rng(detail::mix64(seed ^ (0xD1B54A32D192ED03ULL + stream * 0x8CB92BA72F3D8DD7ULL)));
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the pair is cached so consecutive
    // calls consume uniforms two at a time.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    bool coin(double p_true) { return uniform() < p_true; }

  private:
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace duvsynth
