// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace flowcd {

/// Bad input values or shapes. CLI maps this to exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem / format failures. CLI maps this to exit code 1.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite losses and other numerical aborts. CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic splitmix64 generator. std::mt19937 would also be fine, but the
// distributions on top of it are implementation-defined; dataset bytes must be
// reproducible across toolchains, so the transforms are spelled out here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    /// Standard normal via Box-Muller (cosine branch only, stateless).
    double normal();

    /// Derive an independent stream, e.g. one per dataset sample.
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0x6a09e667f3bcc909ull + stream * 0x9e3779b97f4a7c15ull));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

} // namespace flowcd
