#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "meft/matrix.hpp"

namespace meft {

// Independent deterministic stream id: tensors drawn from their own stream
// never shift when another tensor's size changes.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ull * (stream + 1));
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

// Deterministic RNG: mt19937_64 raw draws (bit-exact across platforms per the
// standard) plus hand-rolled uniform/normal transforms, since the standard
// distributions are implementation-defined.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [lo, hi] inclusive, unbiased via rejection.
    index_t uniform_int(index_t lo, index_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return lo + static_cast<index_t>(x % range);
    }

    // Box-Muller; the second sample of each pair is discarded so the draw
    // count stays a pure function of call count.
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    Matrix uniform_matrix(index_t rows, index_t cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (auto& x : m.data) x = uniform(lo, hi);
        return m;
    }

    Matrix normal_matrix(index_t rows, index_t cols, double stddev) {
        Matrix m(rows, cols);
        for (auto& x : m.data) x = stddev * normal();
        return m;
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace meft
