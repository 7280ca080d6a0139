#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "fedlora/common.hpp"

namespace fedlora {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent stream id from a base seed and a textual tag. Every
// random decision in the project is keyed this way, so results never depend
// on the order in which components draw.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = splitmix64(seed ^ 0x517cc1b727220a95ull);
    for (char c : tag) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag, std::uint64_t a) {
    return splitmix64(mix_seed(seed, tag) ^ splitmix64(a + 0x9e3779b97f4a7c15ull));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b) {
    return splitmix64(mix_seed(seed, tag, a) ^ splitmix64(b + 0x2545f4914f6cdd1dull));
}

// Deterministic RNG with hand-rolled distributions. std:: distributions are
// implementation-defined, which would break bit-level reproducibility of
// results across toolchains; everything here is fully specified.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x8f2f35b3a5d0c5e1ull)) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n)
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ContractError("Rng::uniform_index: n must be positive");
        std::uint64_t threshold = (~std::uint64_t{0} - n + 1) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return static_cast<std::size_t>(r % n);
        }
    }

    // Standard normal via Box-Muller; caches the paired draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Marsaglia-Tsang gamma sampler, shape > 0, unit scale.
    double gamma(double shape) {
        if (shape <= 0.0) throw ContractError("Rng::gamma: shape must be positive");
        if (shape < 1.0) {
            double u = uniform();
            while (u <= 0.0) u = uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Symmetric Dirichlet(beta) over k coordinates.
    std::vector<double> dirichlet(double beta, std::size_t k) {
        std::vector<double> p(k);
        double total = 0.0;
        for (auto& v : p) {
            v = gamma(beta);
            total += v;
        }
        if (total <= 0.0) throw NumericError("Rng::dirichlet: degenerate draw");
        for (auto& v : p) v /= total;
        return p;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fedlora
