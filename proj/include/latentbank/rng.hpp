#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "latentbank/common.hpp"

namespace latentbank {

// Splittable counter-based generator. A stream is keyed by (seed, label);
// sample i is a pure function of (key, i), so re-runs and platforms agree
// bit-for-bit as long as libm's log/cos do (in practice: everywhere we ship).
class Rng {
  public:
    explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

    // Derive an independent substream; the label is the recorded subkey.
    Rng stream(std::string_view label) const {
        uint64_t h = fnv1a64(label.data(), label.size(), key_);
        return Rng(FromKey{}, mix(h));
    }
    Rng stream(uint64_t index) const {
        return Rng(FromKey{}, mix(key_ ^ (0xd1342543de82ef95ULL * (index + 1))));
    }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // (0, 1]
    double uniform_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    // Box-Muller; one pair of uniforms per pair of normals.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

  private:
    struct FromKey {};
    Rng(FromKey, uint64_t key) : key_(key) {}

    static uint64_t mix(uint64_t z) {
        // splitmix64 finaliser
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace latentbank
