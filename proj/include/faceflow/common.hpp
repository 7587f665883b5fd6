#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace faceflow {

// Error taxonomy. Everything user-visible derives from Error so the CLI can
// map library failures to a single runtime exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Tensor/operand dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};
// Bad argument values (out-of-range pose, empty batch, ...).
struct ValueError : Error {
    using Error::Error;
};
// Operations invoked in an illegal state (missing gradients, terminated curriculum).
struct StateError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
// Malformed text input; message carries file and line number.
struct ParseError : Error {
    using Error::Error;
};
// AUC is undefined when only one class is present.
struct UndefinedAucError : ValueError {
    using ValueError::ValueError;
};

// splitmix64; used to derive independent RNG streams from (seed, counter)
// pairs so that resuming a run at step k replays the exact same randomness.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void set_max_threads(int n);
int max_threads();

// Shortest round-trip decimal form, locale independent.
inline std::string fmt_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string fmt_real(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace faceflow
