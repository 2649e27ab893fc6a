#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mpseg/tensor.hpp"

namespace mpseg {

/// Seeded deterministic generator. The engine is std::mt19937_64, whose
/// output sequence is fully specified by the standard, and all variates are
/// derived from raw 64-bit draws here (never via std::*_distribution, whose
/// algorithms are implementation-defined). Identical seed therefore yields an
/// identical value stream on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0,1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (cosine branch); consumes two draws.
    double normal() {
        double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Uniform integer in [0, n) by rejection, bias-free and deterministic.
    uint64_t bounded(uint64_t n) {
        if (n == 0) return 0;
        uint64_t threshold = (~uint64_t{0} - n + 1) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            uint64_t j = bounded(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean, double stdev) {
        for (auto& v : t.data) v = static_cast<T>(mean + stdev * normal());
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mpseg
