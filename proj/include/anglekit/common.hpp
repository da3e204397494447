#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace anglekit {

// Thrown for bad user input: malformed files, invalid configs, violated preconditions.
// The CLI maps this to exit code 1; all other exceptions map to 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64: cheap stateless mixing used to derive independent RNG streams
// from (seed, index) pairs so plans and epochs are order-independent.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(seed ^ mix64(a)) ^ mix64(b ^ 0xd1b54a32d192ed03ULL));
}

}  // namespace anglekit
