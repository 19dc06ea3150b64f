#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "langneck/common.hpp"

namespace langneck {

// FNV-1a 64-bit. Used for seed derivation and artifact hashes.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives an independent stream seed from (master, tag, index).
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = fnv1a_u64(master);
    h = fnv1a(tag, h);
    h = fnv1a_u64(index, h);
    // splitmix64 finalizer to spread low-entropy inputs
    h += 0x9e3779b97f4a7c15ULL;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    return h ^ (h >> 31);
}

// Deterministic generator with the distributions the artifact needs.
// All sampling goes through explicit member functions so results are
// reproducible regardless of standard-library distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // modulo bias is negligible for the small n used here
        return engine_() % n;
    }

    // Standard normal via Box-Muller (no cached spare, for simple replay).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    // Poisson via inverse-transform CDF walk; exact for the lambdas used
    // by shot noise (<= ~700 before exp(-lambda) underflows).
    std::uint64_t poisson(double lambda) {
        if (lambda < 0.0) throw ArgumentError("poisson: negative lambda");
        if (lambda == 0.0) return 0;
        double u = uniform();
        double p = std::exp(-lambda);
        double cdf = p;
        std::uint64_t k = 0;
        while (u > cdf && k < 100000) {
            ++k;
            p *= lambda / static_cast<double>(k);
            cdf += p;
        }
        return k;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace langneck
