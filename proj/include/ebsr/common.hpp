#pragma once

// Shared error types and the deterministic RNG used across the library.
//
// All randomness flows through Rng so that runs are reproducible from a
// single seed and the generator state can be checkpointed and restored
// bit-exactly. std::mt19937_64 supplies the raw bits; the floating-point
// helpers here avoid std distributions, whose internal caching would not
// survive a serialize/restore cycle.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ebsr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument values (thresholds, scales, time points out of range, ...).
struct ArgumentError : Error {
    using Error::Error;
};

// Shape or geometry mismatch between tensors / images / sensors.
struct DimensionError : Error {
    using Error::Error;
};

// Malformed binary or JSON artifact. `offset` is the byte position where
// parsing failed, when known.
struct FormatError : Error {
    explicit FormatError(const std::string& msg, std::int64_t offset = -1)
        : Error(offset >= 0 ? msg + " (byte offset " + std::to_string(offset) + ")" : msg),
          offset(offset) {}
    std::int64_t offset = -1;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Deterministic random source. One instance per independent stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ArgumentError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller. Always consumes exactly two uniforms,
    // so the stream position is a pure function of the call count.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Normal(0, std) truncated to [-2*std, 2*std].
    double trunc_normal(double std_dev) {
        for (;;) {
            const double z = normal();
            if (std::fabs(z) <= 2.0) return z * std_dev;
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream is(state);
        is >> engine_;
        if (is.fail()) throw FormatError("Rng::deserialize: bad engine state");
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace ebsr
