#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace semalign {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Independent stream keyed by (seed, tag): used for per-sample and per-layer RNGs.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag) {
    return Rng(splitmix64(seed ^ splitmix64(fnv1a(tag))));
}

inline Rng derive_rng(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix64(splitmix64(seed) + index));
}

/// Seed for the (a, b)-th draw of a tagged stream, e.g. (step, sample).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(seed ^ splitmix64(fnv1a(tag))) + splitmix64(a) * 31 + b);
}

}  // namespace semalign
