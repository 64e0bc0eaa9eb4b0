#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "uedkl/mat.hpp"

namespace uedkl {

// Deterministic random source. The raw engine is std::mt19937_64 (bit-exact
// across platforms by the standard); all derived draws are computed here with
// fixed formulas rather than through distribution classes, whose outputs are
// implementation defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; generates pairs and caches the second.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ContractError("uniform_int: empty range");
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    Mat normal_mat(int rows, int cols, double stddev = 1.0) {
        Mat m(rows, cols);
        for (size_t i = 0; i < m.size(); ++i) m[i] = normal() * stddev;
        return m;
    }

    Mat uniform_mat(int rows, int cols, double lo, double hi) {
        Mat m(rows, cols);
        for (size_t i = 0; i < m.size(); ++i) m[i] = lo + (hi - lo) * uniform();
        return m;
    }

    // Fisher-Yates shuffle, deterministic given the engine state.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Derives independent child seeds from a parent seed and a stream index.
inline uint64_t mix_seed(uint64_t parent, uint64_t stream) {
    return detail::splitmix64(detail::splitmix64(parent) ^ detail::splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

inline uint64_t mix_seed(uint64_t parent, uint64_t a, uint64_t b) {
    return mix_seed(mix_seed(parent, a), b);
}

}  // namespace uedkl
