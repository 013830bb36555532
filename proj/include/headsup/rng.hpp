#pragma once

#include <cmath>
#include <cstdint>

#include "headsup/common.hpp"

namespace headsup {

// splitmix64 finalizer. Good avalanche, trivially portable.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// Counter-based generator: every draw is mix64(key, counter++). Streams derived
// from the same seed with distinct salts are independent, so inserting a new
// consumer never perturbs the draws of existing ones.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix64(seed)) {}
    Rng(uint64_t seed, uint64_t salt) : key_(hash_combine(mix64(seed), salt)) {}

    Rng stream(uint64_t salt) const { return Rng(FromKey{}, hash_combine(key_, salt)); }

    uint64_t next_u64() { return mix64(key_ ^ (0x632be59bd9b4e019ULL * ++counter_)); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw RangeError("uniform_int: hi < lo");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        double r = std::sqrt(-2.0 * std::log(u1 + 1e-300));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    struct FromKey {};
    Rng(FromKey, uint64_t key) : key_(key) {}

    uint64_t key_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace headsup
