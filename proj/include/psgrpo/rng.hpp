#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>

namespace psgrpo {

// SplitMix64 generator. Used for every stochastic decision in the project so
// that runs are bit-reproducible across platforms, independent of standard
// library distribution internals.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1), 53 random bits.
    double next_double01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Unbiased uniform integer in [0,n).
    uint64_t next_below(uint64_t n) {
        if (n == 0) {
            throw std::invalid_argument("SplitMix64::next_below: n must be positive");
        }
        const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
        for (;;) {
            const uint64_t r = next();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

private:
    uint64_t state_;
};

// FNV-1a over bytes; used to derive seeds from strings.
inline uint64_t fnv1a64(const char* data, std::size_t size) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derives an independent child seed from a master seed and an index path
// (role id, update index, task index, rollout index, ...). Streams derived
// with different paths are decorrelated, so adding a consumer of randomness
// in one place never shifts the draws seen elsewhere.
inline uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> path) {
    uint64_t h = master ^ 0x6a09e667f3bcc909ull;
    for (uint64_t v : path) {
        h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        h = SplitMix64(h).next();
    }
    return h;
}

}  // namespace psgrpo
