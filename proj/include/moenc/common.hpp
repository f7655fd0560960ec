#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moenc {

// Base error for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/operand shapes do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration: unknown keys, invalid values, missing inputs.
struct ConfigError : Error {
    using Error::Error;
};

// File I/O, serialization, and checkpoint integrity problems.
struct IoError : Error {
    using Error::Error;
};

// splitmix64, used to derive independent seed streams from one run seed.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace moenc
