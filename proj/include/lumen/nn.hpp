#pragma once

// Layer primitives with explicit reverse-mode derivatives. Everything is a
// pure function of its inputs; networks cache forward intermediates
// themselves and feed them back for the gradient pass. Convolutions are
// stride-1, zero-padded to keep spatial size ("same"), formulated as
// shifted-row accumulations so the inner loops vectorize.

#include <cmath>
#include <cstddef>

#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
    const T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
Tensor<T> silu_forward(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (auto& v : y.data) v = silu(v);
    return y;
}

// dL/dx from dL/dy and the pre-activation input
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
    check_same_shape(x, gy, "silu_backward");
    Tensor<T> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= silu_grad(x[i]);
    return gx;
}

// ----------------------------- conv2d -----------------------------
// x: (IC,H,W)  w: (OC,IC,K,K) odd K  b: (OC) optional  y: (OC,H,W)

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y) {
    const std::size_t ic_n = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const std::size_t oc_n = w.shape[0], k = w.shape[2];
    if (w.shape[1] != ic_n) throw std::invalid_argument("conv2d: channel mismatch");
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(k / 2);
    y.shape = {oc_n, h, wd};
    y.data.assign(oc_n * h * wd, T(0));
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        T* yc = &y.data[oc * h * wd];
        if (!b.empty())
            for (std::size_t i = 0; i < h * wd; ++i) yc[i] = b[oc];
        for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* xc = &x.data[ic * h * wd];
            for (std::size_t dy = 0; dy < k; ++dy) {
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const T wv = w.data[((oc * ic_n + ic) * k + dy) * k + dx];
                    const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - p;
                    const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - p;
                    const std::size_t i0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -oy));
                    const std::size_t i1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h),
                                                 static_cast<std::ptrdiff_t>(h) - oy));
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -ox));
                    const std::size_t j1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(wd),
                                                 static_cast<std::ptrdiff_t>(wd) - ox));
                    for (std::size_t i = i0; i < i1; ++i) {
                        T* yr = yc + i * wd + j0;
                        const T* xs = xc +
                                      static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + oy) * wd +
                                      static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j0) + ox);
                        for (std::size_t n = 0; n < j1 - j0; ++n) yr[n] += wv * xs[n];
                    }
                }
            }
        }
    }
}

// accumulates into gx/gw/gb, which must be preallocated (gx may be empty to skip)
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb) {
    const std::size_t ic_n = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const std::size_t oc_n = w.shape[0], k = w.shape[2];
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(k / 2);
    if (gb && !gb->empty()) {
        for (std::size_t oc = 0; oc < oc_n; ++oc) {
            T acc = 0;
            const T* gc = &gy.data[oc * h * wd];
            for (std::size_t i = 0; i < h * wd; ++i) acc += gc[i];
            gb->data[oc] += acc;
        }
    }
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        const T* gc = &gy.data[oc * h * wd];
        for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* xc = &x.data[ic * h * wd];
            T* gxc = (gx && !gx->empty()) ? &gx->data[ic * h * wd] : nullptr;
            for (std::size_t dy = 0; dy < k; ++dy) {
                for (std::size_t dx = 0; dx < k; ++dx) {
                    const std::size_t widx = ((oc * ic_n + ic) * k + dy) * k + dx;
                    const T wv = w.data[widx];
                    const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - p;
                    const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - p;
                    const std::size_t i0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -oy));
                    const std::size_t i1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h),
                                                 static_cast<std::ptrdiff_t>(h) - oy));
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -ox));
                    const std::size_t j1 = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(wd),
                                                 static_cast<std::ptrdiff_t>(wd) - ox));
                    T wacc = 0;
                    for (std::size_t i = i0; i < i1; ++i) {
                        const T* gr = gc + i * wd + j0;
                        const std::size_t xoff =
                            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + oy) * wd +
                            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j0) + ox);
                        const T* xs = xc + xoff;
                        if (gw) {
                            for (std::size_t n = 0; n < j1 - j0; ++n) wacc += gr[n] * xs[n];
                        }
                        if (gxc) {
                            T* gxs = gxc + xoff;
                            for (std::size_t n = 0; n < j1 - j0; ++n) gxs[n] += wv * gr[n];
                        }
                    }
                    if (gw) gw->data[widx] += wacc;
                }
            }
        }
    }
}

// ----------------------------- linear -----------------------------
// w: (OUT,IN)  x: (IN)  y: (OUT)

template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y) {
    const std::size_t out_n = w.shape[0], in_n = w.shape[1];
    if (x.size() != in_n) throw std::invalid_argument("linear: input size mismatch");
    y.shape = {out_n};
    y.data.assign(out_n, T(0));
    for (std::size_t o = 0; o < out_n; ++o) {
        T acc = b.empty() ? T(0) : b[o];
        const T* wr = &w.data[o * in_n];
        for (std::size_t i = 0; i < in_n; ++i) acc += wr[i] * x[i];
        y[o] = acc;
    }
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb) {
    const std::size_t out_n = w.shape[0], in_n = w.shape[1];
    if (gx && !gx->empty()) {
        for (std::size_t o = 0; o < out_n; ++o) {
            const T g = gy[o];
            const T* wr = &w.data[o * in_n];
            for (std::size_t i = 0; i < in_n; ++i) gx->data[i] += wr[i] * g;
        }
    }
    if (gw) {
        for (std::size_t o = 0; o < out_n; ++o) {
            const T g = gy[o];
            T* gwr = &gw->data[o * in_n];
            for (std::size_t i = 0; i < in_n; ++i) gwr[i] += g * x[i];
        }
    }
    if (gb && !gb->empty())
        for (std::size_t o = 0; o < out_n; ++o) gb->data[o] += gy[o];
}

// ----------------------------- pooling / resize -----------------------------

// 2x2 mean pool, even H and W
template <typename T>
Tensor<T> avgpool2_forward(const Tensor<T>& x) {
    const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    if (h % 2 || w % 2) throw std::invalid_argument("avgpool2: odd spatial size");
    Tensor<T> y({c, h / 2, w / 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h / 2; ++i)
            for (std::size_t j = 0; j < w / 2; ++j)
                y.at(ch, i, j) = (x.at(ch, 2 * i, 2 * j) + x.at(ch, 2 * i, 2 * j + 1) +
                                  x.at(ch, 2 * i + 1, 2 * j) + x.at(ch, 2 * i + 1, 2 * j + 1)) /
                                 T(4);
    return y;
}

template <typename T>
Tensor<T> avgpool2_backward(const Tensor<T>& gy, const Shape& xshape) {
    Tensor<T> gx(xshape);
    const std::size_t c = xshape[0], h = xshape[1], w = xshape[2];
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h / 2; ++i)
            for (std::size_t j = 0; j < w / 2; ++j) {
                const T g = gy.at(ch, i, j) / T(4);
                gx.at(ch, 2 * i, 2 * j) += g;
                gx.at(ch, 2 * i, 2 * j + 1) += g;
                gx.at(ch, 2 * i + 1, 2 * j) += g;
                gx.at(ch, 2 * i + 1, 2 * j + 1) += g;
            }
    return gx;
}

template <typename T>
Tensor<T> upsample2_forward(const Tensor<T>& x) {
    const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor<T> y({c, h * 2, w * 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const T v = x.at(ch, i, j);
                y.at(ch, 2 * i, 2 * j) = v;
                y.at(ch, 2 * i, 2 * j + 1) = v;
                y.at(ch, 2 * i + 1, 2 * j) = v;
                y.at(ch, 2 * i + 1, 2 * j + 1) = v;
            }
    return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& gy) {
    const std::size_t c = gy.shape[0], h = gy.shape[1] / 2, w = gy.shape[2] / 2;
    Tensor<T> gx({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                gx.at(ch, i, j) = gy.at(ch, 2 * i, 2 * j) + gy.at(ch, 2 * i, 2 * j + 1) +
                                  gy.at(ch, 2 * i + 1, 2 * j) + gy.at(ch, 2 * i + 1, 2 * j + 1);
    return gx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
        throw std::invalid_argument("concat_channels: spatial mismatch");
    Tensor<T> y({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return y;
}

template <typename T>
void split_channels(const Tensor<T>& gy, Tensor<T>& ga, Tensor<T>& gb) {
    std::copy(gy.data.begin(), gy.data.begin() + static_cast<std::ptrdiff_t>(ga.size()),
              ga.data.begin());
    std::copy(gy.data.begin() + static_cast<std::ptrdiff_t>(ga.size()), gy.data.end(),
              gb.data.begin());
}

// ----------------------------- softmax losses -----------------------------

// softmax cross-entropy over a logit vector; returns loss, writes dL/dlogits
template <typename T>
T softmax_ce(const Tensor<T>& logits, int target, Tensor<T>& glogits) {
    const std::size_t n = logits.size();
    T mx = logits[0];
    for (T v : logits.data) mx = std::max(mx, v);
    T z = 0;
    glogits.shape = logits.shape;
    glogits.data.assign(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        glogits[i] = std::exp(logits[i] - mx);
        z += glogits[i];
    }
    const T logz = std::log(z) + mx;
    const T loss = logz - logits[static_cast<std::size_t>(target)];
    for (std::size_t i = 0; i < n; ++i) glogits[i] /= z;
    glogits[static_cast<std::size_t>(target)] -= T(1);
    return loss;
}

// per-pixel softmax cross-entropy over (C,H,W) logits vs integer mask
template <typename T>
T softmax_ce_map(const Tensor<T>& logits, const Tensor<int>& target, Tensor<T>& glogits) {
    const std::size_t c = logits.shape[0], h = logits.shape[1], w = logits.shape[2];
    glogits.shape = logits.shape;
    glogits.data.assign(logits.size(), T(0));
    T total = 0;
    const T inv_n = T(1) / T(h * w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            T mx = logits.at(0, i, j);
            for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, logits.at(ch, i, j));
            T z = 0;
            for (std::size_t ch = 0; ch < c; ++ch) z += std::exp(logits.at(ch, i, j) - mx);
            const int tgt = target.at(i, j);
            total += (std::log(z) + mx - logits.at(static_cast<std::size_t>(tgt), i, j)) * inv_n;
            for (std::size_t ch = 0; ch < c; ++ch) {
                T p = std::exp(logits.at(ch, i, j) - mx) / z;
                if (static_cast<int>(ch) == tgt) p -= T(1);
                glogits.at(ch, i, j) = p * inv_n;
            }
        }
    }
    return total;
}

// ----------------------------- init -----------------------------

// He-style scaled Gaussian, std = sqrt(2 / fan_in)
template <typename T>
void init_he(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.data) v = static_cast<T>(std * rng.gaussian());
}

// ----------------------------- flat Adam -----------------------------

// plain Adam over a flat list of tensors; used by the auxiliary networks
// (feature encoder, segmentation net) whose training is not the artifact
// under study
template <typename T>
struct FlatAdam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<Tensor<T>> m, v;

    void update(std::vector<Tensor<T>*> params, const std::vector<Tensor<T>*>& grads, double lr) {
        if (m.empty()) {
            for (auto* p : params) {
                m.emplace_back(p->shape);
                v.emplace_back(p->shape);
            }
        }
        ++step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor<T>& theta = *params[k];
            const Tensor<T>& g = *grads[k];
            for (std::size_t j = 0; j < theta.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                const double mj = beta1 * static_cast<double>(m[k][j]) + (1 - beta1) * gj;
                const double vj = beta2 * static_cast<double>(v[k][j]) + (1 - beta2) * gj * gj;
                m[k][j] = static_cast<T>(mj);
                v[k][j] = static_cast<T>(vj);
                theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                          lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
            }
        }
    }
};

}  // namespace lumen
