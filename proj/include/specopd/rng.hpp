// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "specopd/common.hpp"

namespace specopd {

/// Counter-based random stream: stateless hash of (key, counter).
///
/// Streams are named and forkable, so every random decision in a rollout
/// (drafting, acceptance uniforms, residual resampling) can be replayed
/// independently of how many draws the other streams consumed.
class RngStream {
public:
    RngStream() = default;
    explicit RngStream(uint64_t key) : key_(key) {}

    static RngStream from_seed(uint64_t seed, std::string_view name) {
        uint64_t k = fnv1a64(name);
        k ^= seed + 0x9e3779b97f4a7c15ull + (k << 6) + (k >> 2);
        return RngStream(mix_(k));
    }

    /// Independent child stream; does not consume from this stream.
    RngStream fork(std::string_view name) const {
        uint64_t k = fnv1a64(name, key_);
        return RngStream(mix_(k));
    }

    RngStream fork(uint64_t index) const {
        return RngStream(mix_(key_ ^ (0xd1342543de82ef95ull * (index + 1))));
    }

    uint64_t next_u64() { return mix_(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    /// Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n must be positive.
    uint64_t next_below(uint64_t n) {
        require(n > 0, "RngStream::next_below: n must be positive");
        // Rejection sampling over the top bits to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    double next_gaussian() {
        // Box-Muller, no caching so the draw count stays predictable.
        const double u1 = 1.0 - next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }

private:
    static uint64_t mix_(uint64_t z) {
        // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t key_{0};
    uint64_t counter_{0};
};

} // namespace specopd
