#pragma once

// IEEE-754 binary16 codec for half-precision checkpoint storage.
// Encode rounds to nearest-even; values beyond the half range saturate to
// +-65504 and bump a warning counter instead of producing inf.

#include <bit>
#include <cstdint>
#include <cstddef>

#include "lumen/tensor.hpp"

namespace lumen {

inline constexpr float kFp16Max = 65504.0f;

// float32 -> binary16 bits, round to nearest even
inline std::uint16_t fp16_encode(float f, std::size_t* overflow_count = nullptr) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((u >> 16) & 0x8000u);
    const std::uint32_t mag = u & 0x7FFFFFFFu;

    // 65520 is the halfway point between 65504 and the next (unrepresentable)
    // half value; nearest-even sends it up, so anything >= 65520 saturates.
    if (mag >= 0x477FF000u) {
        if (overflow_count) ++(*overflow_count);
        return static_cast<std::uint16_t>(sign | 0x7BFFu);  // +-max finite
    }
    if (mag == 0) return sign;  // signed zero preserved

    const int e = static_cast<int>(mag >> 23) - 127;
    const std::uint32_t man = (mag & 0x7FFFFFu) | 0x800000u;  // implicit bit, 24 bits

    if (e < -25) return sign;  // below half the smallest subnormal: flush to zero

    // normal halves drop 13 mantissa bits; subnormals drop more
    int shift = 13;
    std::uint32_t half_exp = 0;
    if (e >= -14) {
        half_exp = static_cast<std::uint32_t>(e + 15);
    } else {
        shift = -e - 1;  // e in [-25,-15] -> shift in [14,24]
    }

    const std::uint32_t dropped = man & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    std::uint32_t rounded = man >> shift;
    if (dropped > halfway || (dropped == halfway && (rounded & 1u))) ++rounded;

    if (half_exp == 0) {
        // subnormal; a carry into bit 10 lands in the smallest normal exponent,
        // which the plain OR below already encodes
        return static_cast<std::uint16_t>(sign | rounded);
    }
    if (rounded >= 0x800u) {  // mantissa carry
        rounded >>= 1;
        ++half_exp;
    }
    return static_cast<std::uint16_t>(sign | (half_exp << 10) | (rounded & 0x3FFu));
}

inline float fp16_decode(std::uint16_t h) {
    const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t man = h & 0x3FFu;

    std::uint32_t out;
    if (exp == 0) {
        if (man == 0) {
            out = sign;  // signed zero
        } else {
            // renormalize a subnormal
            int e = -14;
            std::uint32_t m = man;
            while ((m & 0x400u) == 0) {
                m <<= 1;
                --e;
            }
            m &= 0x3FFu;
            out = sign | (static_cast<std::uint32_t>(e + 127) << 23) | (m << 13);
        }
    } else if (exp == 31) {
        out = sign | 0x7F800000u | (man << 13);  // inf/nan passthrough
    } else {
        out = sign | ((exp - 15 + 127) << 23) | (man << 13);
    }
    return std::bit_cast<float>(out);
}

// encode-then-decode an entire tensor; saturations are counted, not fatal
template <typename T>
Tensor<T> fp16_roundtrip(const Tensor<T>& x, std::size_t* overflow_count = nullptr) {
    Tensor<T> out = x;
    for (auto& v : out.data)
        v = static_cast<T>(fp16_decode(fp16_encode(static_cast<float>(v), overflow_count)));
    return out;
}

}  // namespace lumen
