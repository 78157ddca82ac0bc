#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pamas {

// Error taxonomy. The CLI maps these onto exit codes
// (ConfigError -> 1, DataError -> 2, BackendError -> 3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class BackendError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic hashing / RNG.
//
// Everything random in the engine is derived from the run seed through these
// helpers, never from std:: distributions, so results are bit-identical
// across platforms and across re-runs of any prefix of the pipeline.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= static_cast<std::uint64_t>(p[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a_init() { return 14695981039346656037ULL; }

inline std::uint64_t fnv1a(std::uint64_t h, std::string_view s) {
    return fnv1a_bytes(h, s.data(), s.size());
}

inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
    return fnv1a_bytes(h, &v, sizeof(v));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stateless keyed uniform in [0, 1). Callers pass a seed plus a handful of
// string/integer key parts; identical keys always produce the identical draw.
struct HashKey {
    std::uint64_t h = fnv1a_init();

    HashKey& add(std::string_view s) {
        h = fnv1a(h, s);
        h = fnv1a(h, static_cast<std::uint64_t>(0x1f));  // part separator
        return *this;
    }
    HashKey& add(std::uint64_t v) {
        h = fnv1a(h, v);
        h = fnv1a(h, static_cast<std::uint64_t>(0x1f));
        return *this;
    }
    HashKey& add(std::int64_t v) { return add(static_cast<std::uint64_t>(v)); }

    std::uint64_t finish() const { return splitmix64(h); }

    double uniform() const {
        // 53 mantissa bits -> [0, 1)
        return static_cast<double>(finish() >> 11) * 0x1.0p-53;
    }
};

template <typename... Parts>
std::uint64_t keyed_hash(std::uint64_t seed, Parts&&... parts) {
    HashKey k;
    k.add(seed);
    (k.add(std::forward<Parts>(parts)), ...);
    return k.finish();
}

template <typename... Parts>
double keyed_uniform(std::uint64_t seed, Parts&&... parts) {
    HashKey k;
    k.add(seed);
    (k.add(std::forward<Parts>(parts)), ...);
    return k.uniform();
}

// Small sequential PRNG (splitmix64 stream) for the few places that need
// ordered draws (shuffles, synthetic data). Deterministic everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Unbiased-enough bounded draw; n must be > 0.
    std::uint64_t bounded(std::uint64_t n) { return next() % n; }

    // Standard normal via Box-Muller (std::normal_distribution is not
    // reproducible across library implementations).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace pamas
