#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mgcg {

// All run-level randomness flows through seeded mt19937_64 streams. Derived
// streams (one per task, per purpose) come from splitmix64 seed mixing so that
// parallel task execution stays reproducible.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 1));
}

// Uniform integer in [0, n). Multiply-shift keeps the draw count fixed at one
// 64-bit word per call, independent of n.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

inline double uniform_real(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller, one value per call (spare discarded for simplicity).
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform_real(rng);
    double u2 = uniform_real(rng);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
}

// Draw an index from an explicit probability vector (cumulative scan).
inline std::size_t weighted_index(Rng& rng, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = uniform_real(rng) * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        cum += weights[i];
        if (r < cum) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
}

}  // namespace mgcg
