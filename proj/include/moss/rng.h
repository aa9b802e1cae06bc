#pragma once

#include <cstdint>
#include <string_view>

namespace moss {

// Counter-based 64-bit generator (splitmix64 core). Every source of
// randomness in the project owns one of these, seeded through
// derive_seed with a purpose label, so independent streams never share
// state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare is cached.
    double normal();

    // Integer in [0, n).
    int uniform_int(int n);

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stable seed derivation: mixes a base seed with an FNV-1a hash of the
// purpose label (and an optional index). Same inputs give the same
// stream on every run.
std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose, std::uint64_t index = 0);

} // namespace moss
