#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace bitmar {

// mt19937_64's output sequence is fixed by the standard; the helpers below
// avoid std distributions, whose algorithms vary between library vendors.
using Rng = std::mt19937_64;

/// Uniform in [0, 1) with 53 bits of resolution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n). n must be > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = rng();
    while (x >= limit) x = rng();
    return x % n;
}

/// Standard normal via Box-Muller.
double normal01(Rng& rng);

std::string rng_state(const Rng& rng);
void set_rng_state(Rng& rng, const std::string& state);

}  // namespace bitmar
