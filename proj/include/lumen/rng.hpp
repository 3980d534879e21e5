#pragma once

// Counter-based random generator. Every draw is a hash of
// (seed, stream, counter), so substreams never share mutable state and a
// stream can be replayed from its ids alone. Pipeline code derives one
// stream per purpose (init, per-sample noise, shuffling, ...) instead of
// passing a shared engine around.

#include <cmath>
#include <cstdint>
#include <numbers>

#include "lumen/tensor.hpp"

namespace lumen {

namespace detail {

// SplitMix64 finalizer; full avalanche on 64 bits.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a + 0x9E3779B97F4A7C15ull * (b + 0x165667B19E3779F9ull));
}

}  // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(detail::hash_combine(detail::mix64(seed ^ 0x6C756D656E000000ull), stream)) {}

    std::uint64_t seed_key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

    // independent substream (same seed material, new stream id)
    Rng substream(std::uint64_t stream_id) const {
        Rng r(0);
        r.key_ = detail::hash_combine(key_, stream_id);
        r.counter_ = 0;
        return r;
    }

    std::uint64_t next_u64() { return detail::hash_combine(key_, counter_++); }

    // uniform in (0,1]; never returns 0 so log() stays finite
    double uniform01() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    double gaussian() {
        const double u1 = uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void fill_gaussian(Tensor<T>& t) {
        for (auto& v : t.data) v = static_cast<T>(gaussian());
    }

    template <typename It>
    void shuffle(It first, It last) {
        const std::size_t n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

// i.i.d. standard normal tensor, deterministic per (seed, stream) of rng
template <typename T>
Tensor<T> gaussian(Rng& rng, const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("gaussian: empty shape");
    Tensor<T> t(shape);
    rng.fill_gaussian(t);
    return t;
}

}  // namespace lumen
