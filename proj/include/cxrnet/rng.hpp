#pragma once

// Deterministic random source shared by shuffling, augmentation, dropout and
// weight initialization.
//
// Algorithm: xoshiro256** (Blackman & Vigna) with its 256-bit state expanded
// from a 64-bit seed by SplitMix64. Uniform reals take the top 53 bits of one
// output; normals use the Box-Muller transform and cache the second variate.
// Nothing here touches platform entropy or <random> distributions, so every
// sequence is identical across compilers and platforms.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

#include "cxrnet/error.hpp"

namespace cxr {

constexpr std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    // Independent stream keyed by a base seed and a path of stream ids, e.g.
    // (seed, epoch, image index).
    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
        std::uint64_t h = seed;
        std::uint64_t mix = splitmix64(h);
        for (std::uint64_t id : ids) {
            std::uint64_t x = mix ^ (id + 0x632be59bd9b4e019ULL);
            mix = splitmix64(x);
        }
        return Rng(mix);
    }

    void reseed(std::uint64_t seed) {
        seed_ = seed;
        std::uint64_t x = seed;
        for (auto& s : s_) s = splitmix64(x);
        has_spare_ = false;
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t uniform_index(std::uint64_t n) {
        require(n > 0, ErrorKind::parameter, "uniform_index requires n > 0");
        const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n + 1) % n;
        std::uint64_t v = next_u64();
        while (v > limit) v = next_u64();
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename Container>
    void shuffle(Container& c) {
        for (std::size_t i = c.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_index(i));
            using std::swap;
            swap(c[i - 1], c[j]);
        }
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t s_[4]{};
    std::uint64_t seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace cxr
