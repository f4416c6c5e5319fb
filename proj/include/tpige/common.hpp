#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpige {

using Vec = std::vector<double>;

// Error taxonomy shared by all modules. Exit-code mapping lives in the CLI.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ConditionError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ProviderError : Error {
    using Error::Error;
};

inline void check_same_dim(const Vec& a, const Vec& b, const char* what) {
    if (a.size() != b.size())
        throw DimensionError(std::string(what) + ": dimension mismatch (" +
                             std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
}

inline double dot(const Vec& a, const Vec& b) {
    check_same_dim(a, b, "dot");
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double sq_dist(const Vec& a, const Vec& b) {
    check_same_dim(a, b, "sq_dist");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline Vec axpy(double alpha, const Vec& x, const Vec& y) {
    check_same_dim(x, y, "axpy");
    Vec r(x.size());
    for (size_t i = 0; i < x.size(); ++i) r[i] = alpha * x[i] + y[i];
    return r;
}

inline Vec scaled(double alpha, const Vec& x) {
    Vec r(x.size());
    for (size_t i = 0; i < x.size(); ++i) r[i] = alpha * x[i];
    return r;
}

// FNV-1a, used for content addressing of cache entries and config digests.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex_digest(std::string_view data) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(data)));
    return std::string(buf);
}

// All randomness in the library flows through this generator, seeded explicitly.
using Rng = std::mt19937_64;

inline Vec gaussian_vec(Rng& rng, size_t dim) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Vec v(dim);
    for (auto& x : v) x = n01(rng);
    return v;
}

// Per-sample seed derivation: single run seed XOR sample index, documented in the CLI help.
inline std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t index) {
    return run_seed ^ index;
}

inline constexpr int kSchemaVersion = 1;

}  // namespace tpige
