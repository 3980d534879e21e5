#pragma once

// Blockwise absmax 8-bit quantization, used for optimizer moment storage.
// Each block of `block_size` values stores one fp32 scale (the block absmax)
// and signed codes in [-127,127]; dequantization is code * scale / 127, so
// the per-element error is bounded by scale/127 and a value equal to the
// block absmax round-trips exactly.

#include <cmath>
#include <cstdint>
#include <vector>

#include "lumen/tensor.hpp"

namespace lumen {

struct QuantBlock8 {
    std::size_t block_size = 64;
    Shape shape;
    std::vector<float> scales;      // per-block absmax
    std::vector<std::int8_t> codes;
};

template <typename T>
QuantBlock8 q8_encode(const Tensor<T>& x, std::size_t block_size = 64) {
    if (block_size < 1) throw std::invalid_argument("q8_encode: block_size must be >= 1");
    QuantBlock8 q;
    q.block_size = block_size;
    q.shape = x.shape;
    const std::size_t n = x.size();
    const std::size_t nblocks = (n + block_size - 1) / block_size;
    q.scales.resize(nblocks);
    q.codes.resize(n);
    for (std::size_t b = 0; b < nblocks; ++b) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        float absmax = 0.0f;
        for (std::size_t i = lo; i < hi; ++i)
            absmax = std::max(absmax, std::abs(static_cast<float>(x[i])));
        q.scales[b] = absmax;
        if (absmax == 0.0f) {
            for (std::size_t i = lo; i < hi; ++i) q.codes[i] = 0;
            continue;
        }
        for (std::size_t i = lo; i < hi; ++i) {
            const float scaled = static_cast<float>(x[i]) * 127.0f / absmax;
            long c = std::lround(scaled);
            c = std::min(127l, std::max(-127l, c));
            q.codes[i] = static_cast<std::int8_t>(c);
        }
    }
    return q;
}

template <typename T>
Tensor<T> q8_decode(const QuantBlock8& q) {
    Tensor<T> out(q.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float scale = q.scales[i / q.block_size];
        out[i] = static_cast<T>(static_cast<float>(q.codes[i]) * scale / 127.0f);
    }
    return out;
}

}  // namespace lumen
