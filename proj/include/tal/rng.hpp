#ifndef TAL_RNG_HPP
#define TAL_RNG_HPP

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace tal {

/// The single random engine used everywhere. Its textual state is checkpointable.
using Rng = std::mt19937_64;

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Derives an independent child seed so that sub-streams do not share state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// b distinct indices from [0, n), uniform without replacement (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t b, Rng& rng) {
    if (b > n) {
        throw ConfigError("cannot sample " + std::to_string(b) + " of " + std::to_string(n) + " items");
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t j = i + uniform_index(rng, n - i);
        std::swap(perm[i], perm[j]);
    }
    perm.resize(b);
    return perm;
}

inline std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline Rng rng_from_state(const std::string& state) {
    Rng rng;
    std::istringstream is(state);
    is >> rng;
    if (!is) throw ConfigError("corrupt RNG state");
    return rng;
}

}  // namespace tal

#endif
