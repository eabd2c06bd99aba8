#ifndef MINIWEAVE_RNG_HPP
#define MINIWEAVE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace miniweave {

// Deterministic RNG. mt19937 output is fully specified by the standard and the
// distributions below are implemented here rather than via std::*_distribution
// (whose algorithms are implementation-defined), so identical seeds give
// identical streams on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return engine_(); }

    // uniform in [0, 1) with 32 bits of resolution
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(static_cast<uint64_t>(uniform() * static_cast<double>(span)) % span);
    }

    // standard normal via Box-Muller, one spare cached
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-12) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // derive an independent child stream; distinct salts give distinct streams
    Rng fork(uint64_t salt) {
        uint64_t s = (static_cast<uint64_t>(next_u32()) << 32) | next_u32();
        return Rng(s ^ (salt * 0x9e3779b97f4a7c15ull));
    }

private:
    std::mt19937 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace miniweave

#endif
