#pragma once

// Dense row-major tensor, the numeric carrier for every module.
// Scalar type is a template parameter: float for production runs,
// double for verification mode.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lumen {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("tensor: shape/data mismatch " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // 2-D view (rows, cols)
    T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    // 3-D view (chan, row, col)
    T& at(std::size_t ch, std::size_t r, std::size_t c) {
        return data[(ch * shape[1] + r) * shape[2] + c];
    }
    const T& at(std::size_t ch, std::size_t r, std::size_t c) const {
        return data[(ch * shape[1] + r) * shape[2] + c];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
    Tensor<T> out = a;
    for (auto& v : out.data) v *= s;
    return out;
}

template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
    return a * s;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "dot");
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T mean(const Tensor<T>& a) {
    if (a.empty()) return T(0);
    T acc = 0;
    for (T v : a.data) acc += v;
    return acc / T(a.size());
}

template <typename T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (T v : a.data) m = std::max(m, std::abs(v));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    Tensor<T> out = a;
    for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
    return out;
}

}  // namespace lumen
