#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>

namespace ehrgpt {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Seed of the named sub-stream `name`, element `index`, under a top-level seed.
/// Streams depend only on (seed, name, index), never on consumption order elsewhere.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ fnv1a64(name)) + splitmix64(index + 0x632BE59BD9B4E019ull));
}

/// mt19937_64 plus portable transforms. std:: distributions are implementation
/// defined, so everything that feeds serialized output goes through these.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0)
        : engine_(derive_seed(seed, stream, index)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) {
            return static_cast<std::int64_t>(engine_());
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Box-Muller, no cached spare (keeps streams stateless between calls).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Number of failures before the first success, success probability p.
    std::int64_t geometric(double p) {
        if (p >= 1.0) {
            return 0;
        }
        double u = uniform();
        while (u <= 0.0) {
            u = uniform();
        }
        return static_cast<std::int64_t>(std::floor(std::log(u) / std::log1p(-p)));
    }

    /// Index drawn proportionally to nonnegative weights (cumulative scan).
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) {
            total += w;
        }
        double r = uniform() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (r < weights[i]) {
                return i;
            }
            r -= weights[i];
        }
        return weights.size() - 1;
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            const auto j = uniform_int(0, i);
            std::swap(first[i], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace ehrgpt
