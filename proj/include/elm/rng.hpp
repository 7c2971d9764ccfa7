#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace elm {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for a child stream identified by `tag` under `parent`.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) noexcept {
    return mix64(mix64(parent) ^ mix64(tag + 0x632BE59BD9B4E019ULL));
}

/// FNV-1a over a byte string, for deriving seeds from names or gene bits.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// 64-bit seedable generator with portable derived distributions.
///
/// The engine is std::mt19937_64 (fully specified by the standard); every
/// distribution below is implemented here rather than through <random>
/// distribution classes, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal();

    /// Normal(0, stddev) resampled until within two standard deviations.
    double truncated_normal(double stddev);

    Rng split(std::uint64_t tag) { return Rng(derive_seed(engine_(), tag)); }

    /// Text serialization of the full engine state.
    std::string serialize() const;
    static Rng deserialize(const std::string& state);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace elm
