#pragma once

#include <cstdint>
#include <random>

namespace cag {

// Stream keys are derived, never drawn: every random draw in a run is a pure
// function of (seed, domain, a, b) so any step can be replayed in isolation.
enum class StreamDomain : std::uint64_t {
    init = 1,
    sampler_mask = 2,
    stats_mask = 3,
    training = 4,
    evaluation = 5,
};

std::uint64_t splitmix64(std::uint64_t x);

// Per-sample stream key = hash(seed, domain, sample_index, step_index).
std::uint64_t stream_key(std::uint64_t seed, StreamDomain domain, std::uint64_t a, std::uint64_t b);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t key) { return Rng(key); }

inline Rng make_stream(std::uint64_t seed, StreamDomain domain, std::uint64_t a, std::uint64_t b) {
    return Rng(stream_key(seed, domain, a, b));
}

}  // namespace cag
