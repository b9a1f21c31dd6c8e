#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace jotr {

// splitmix64; used to derive independent child seeds from one root seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic generator with explicit distribution code so streams are
// byte-stable across standard libraries (std::*_distribution is not).
// xoshiro256** core.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& w : state_) {
            s = mix64(s);
            w = s;
        }
    }

    // Child stream for a named purpose; independent of draws made so far.
    Rng fork(std::uint64_t purpose) const {
        return Rng(mix64(state_[0] ^ mix64(purpose + 0x1234)));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n); n > 0. Rejection-free modulo is fine here: n is
    // tiny relative to 2^64 in every call site.
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (deterministic, no cached spare).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // k distinct indices from [0, n) when k <= n, otherwise k draws with
    // replacement. Returns true when replacement was needed.
    bool sample_indices(std::size_t population, std::size_t k, std::vector<std::size_t>& out) {
        out.clear();
        out.reserve(k);
        if (k <= population) {
            // partial Fisher-Yates over an index vector
            std::vector<std::size_t> idx(population);
            for (std::size_t i = 0; i < population; ++i) idx[i] = i;
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t j = i + std::size_t(below(population - i));
                std::swap(idx[i], idx[j]);
                out.push_back(idx[i]);
            }
            return false;
        }
        for (std::size_t i = 0; i < k; ++i) out.push_back(std::size_t(below(population)));
        return true;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t state_[4];
};

} // namespace jotr
