#pragma once
#include <cstdint>

namespace lab {

// Counter-based deterministic RNG: every value is a pure function of
// (seed, stream, counter), so weight init and sampling are reproducible
// bit-for-bit regardless of evaluation order or thread count.
struct Rng {
    uint64_t seed = 0;
    uint64_t stream = 0;

    static constexpr uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Raw 64-bit value at a counter position.
    uint64_t bits(uint64_t counter) const {
        return mix(mix(mix(seed) ^ stream) ^ counter);
    }

    // Uniform double in [0, 1).
    double u01(uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    // Uniform double in [-1, 1).
    double sym(uint64_t counter) const { return 2.0 * u01(counter) - 1.0; }

    // Derive an independent stream (e.g. per weight tensor or per sample).
    Rng fork(uint64_t substream) const { return Rng{seed, mix(stream) ^ substream}; }
};

// Stateful convenience wrapper for sequential draws (sampling loops).
struct RngSequence {
    Rng rng;
    uint64_t counter = 0;
    explicit RngSequence(Rng r) : rng(r) {}
    uint64_t bits() { return rng.bits(counter++); }
    double u01() { return rng.u01(counter++); }
    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? bits() % n : 0; }
};

} // namespace lab
