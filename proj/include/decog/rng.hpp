#ifndef DECOG_RNG_HPP
#define DECOG_RNG_HPP

#include <cstdint>
#include <random>
#include <span>

namespace decog {

// Uniform double in [0,1) built from raw engine output; avoids
// distribution objects so streams are identical across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// splitmix64, used to derive independent per-item seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Index into a cumulative scan of (possibly unnormalized) weights.
inline std::size_t sample_index(std::span<const double> weights, double total,
                                std::mt19937_64& rng) {
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    return weights.size() - 1;  // guard against fp round-off at the top end
}

}  // namespace decog

#endif
