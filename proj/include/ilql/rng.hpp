#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ilql/error.hpp"

namespace ilql {

// splitmix64; used to derive independent stream seeds from (seed, stream id).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG: mt19937_64 core with our own value mappings so results do not
// depend on standard-library distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Independent stream for (seed, id); reproducible regardless of draw order in
    // other streams. Used per episode / per game.
    static Rng stream(uint64_t seed, uint64_t id) {
        return Rng(mix64(mix64(seed) ^ mix64(id + 0x51ed2701ull)));
    }

    uint64_t u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); rejection keeps it unbiased.
    uint64_t uniform_int(uint64_t n) {
        require(n > 0, ErrorKind::domain, "uniform_int: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = u64();
        while (x >= limit) x = u64();
        return x % n;
    }

    bool coin(double p = 0.5) { return uniform01() < p; }

    // Standard normal via Box-Muller; one spare cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace ilql
