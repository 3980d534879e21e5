#pragma once

// Image-quality metrics and their pairing protocols: Gaussian-windowed SSIM,
// multi-scale SSIM with auto-reduced scale count, random-pair MS-SSIM
// averaging, Frechet distance between feature Gaussians (matrix square root
// via a cyclic Jacobi eigensolver), FID over an arbitrary feature extractor,
// and the Dice overlap coefficient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lumen/parallel.hpp"
#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

// ----------------------------- ssim -----------------------------

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;  // images live in [0,1]
};

namespace detail {

inline std::vector<double> gaussian_window_1d(int n, double sigma) {
    std::vector<double> g(static_cast<std::size_t>(n));
    const double c = (n - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
        sum += g[static_cast<std::size_t>(i)];
    }
    for (auto& v : g) v /= sum;
    return g;
}

// separable valid-mode filter: rows then columns
template <typename T>
Tensor<double> filter_valid(const Tensor<T>& img, const std::vector<double>& g) {
    const std::size_t h = img.shape[0], w = img.shape[1], k = g.size();
    Tensor<double> rows({h, w - k + 1});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j + k <= w; ++j) {
            double acc = 0;
            for (std::size_t u = 0; u < k; ++u)
                acc += g[u] * static_cast<double>(img.at(i, j + u));
            rows.at(i, j) = acc;
        }
    Tensor<double> out({h - k + 1, w - k + 1});
    for (std::size_t i = 0; i + k <= h; ++i)
        for (std::size_t j = 0; j < rows.shape[1]; ++j) {
            double acc = 0;
            for (std::size_t u = 0; u < k; ++u) acc += g[u] * rows.at(i + u, j);
            out.at(i, j) = acc;
        }
    return out;
}

}  // namespace detail

struct SsimValue {
    double ssim = 0;  // mean luminance * contrast-structure
    double cs = 0;    // mean contrast-structure only (for MS-SSIM)
};

template <typename T>
SsimValue ssim_full(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
    check_same_shape(a, b, "ssim");
    if (a.shape.size() != 2) throw std::invalid_argument("ssim: want HxW images");
    const int n = static_cast<int>(std::min(a.shape[0], a.shape[1]));
    if (n < p.window) throw std::invalid_argument("ssim: image smaller than the window");

    const auto g = detail::gaussian_window_1d(p.window, p.sigma);
    Tensor<T> aa(a.shape), bb(a.shape), ab(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = detail::filter_valid(a, g);
    const auto mu_b = detail::filter_valid(b, g);
    const auto m_aa = detail::filter_valid(aa, g);
    const auto m_bb = detail::filter_valid(bb, g);
    const auto m_ab = detail::filter_valid(ab, g);

    const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
    const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
    double sum_ssim = 0, sum_cs = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = m_aa[i] - ma * ma;
        const double vb = m_bb[i] - mb * mb;
        const double cov = m_ab[i] - ma * mb;
        const double lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        const double cs = (2 * cov + c2) / (va + vb + c2);
        sum_ssim += lum * cs;
        sum_cs += cs;
    }
    SsimValue out;
    out.ssim = sum_ssim / static_cast<double>(mu_a.size());
    out.cs = sum_cs / static_cast<double>(mu_a.size());
    return out;
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
    return ssim_full(a, b, p).ssim;
}

// ----------------------------- ms-ssim -----------------------------

inline const std::vector<double>& msssim_standard_weights() {
    static const std::vector<double> w = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    return w;
}

// scales halve resolution; stop while the smallest stays >= window
inline int msssim_scale_count(const Shape& shape, int window = 11, int max_scales = 5) {
    int scales = 1;
    std::size_t h = shape[0], w = shape[1];
    while (scales < max_scales && std::min(h / 2, w / 2) >= static_cast<std::size_t>(window)) {
        h /= 2;
        w /= 2;
        ++scales;
    }
    return scales;
}

namespace detail {

template <typename T>
Tensor<T> downsample2(const Tensor<T>& img) {
    const std::size_t h = img.shape[0] / 2, w = img.shape[1] / 2;
    Tensor<T> out({h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            out.at(i, j) = (img.at(2 * i, 2 * j) + img.at(2 * i, 2 * j + 1) +
                            img.at(2 * i + 1, 2 * j) + img.at(2 * i + 1, 2 * j + 1)) /
                           T(4);
    return out;
}

}  // namespace detail

template <typename T>
double ms_ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
    check_same_shape(a, b, "ms_ssim");
    if (static_cast<int>(std::min(a.shape[0], a.shape[1])) < p.window)
        throw std::invalid_argument("ms_ssim: image smaller than the window");
    const int scales = msssim_scale_count(a.shape, p.window);
    std::vector<double> weights(msssim_standard_weights().begin(),
                                msssim_standard_weights().begin() + scales);
    double wsum = 0;
    for (double w : weights) wsum += w;
    for (auto& w : weights) w /= wsum;

    Tensor<T> ca = a, cb = b;
    double value = 1.0;
    for (int s = 0; s < scales; ++s) {
        const auto sv = ssim_full(ca, cb, p);
        // negative terms have no meaningful power; clamp at zero
        const double cs = std::max(0.0, sv.cs);
        const double lum_cs = std::max(0.0, sv.ssim);
        if (s + 1 < scales) {
            value *= std::pow(cs, weights[static_cast<std::size_t>(s)]);
            ca = detail::downsample2(ca);
            cb = detail::downsample2(cb);
        } else {
            value *= std::pow(lum_cs, weights[static_cast<std::size_t>(s)]);
        }
    }
    return value;
}

// ----------------------------- pairing protocol -----------------------------

struct PairScore {
    double mean = 0;
    double stddev = 0;
    int n_pairs = 0;
};

// Random image pairs between two sets (or within one set when both arguments
// are the same container: the intra-set diversity score, i != j whenever the
// set has more than one element). Deterministic per rng.
template <typename T>
PairScore pair_msssim(const std::vector<Tensor<T>>& set_a, const std::vector<Tensor<T>>& set_b,
                      int n_pairs, Rng& rng, const SsimParams& p = {}) {
    if (set_a.empty() || set_b.empty())
        throw std::invalid_argument("pair_msssim: empty image set");
    const bool within = &set_a == &set_b;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(static_cast<std::size_t>(n_pairs));
    for (int k = 0; k < n_pairs; ++k) {
        std::size_t i = static_cast<std::size_t>(rng.below(set_a.size()));
        std::size_t j = static_cast<std::size_t>(rng.below(set_b.size()));
        if (within && set_a.size() > 1)
            while (j == i) j = static_cast<std::size_t>(rng.below(set_b.size()));
        pairs.emplace_back(i, j);
    }
    std::vector<double> scores(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t k) {
        scores[k] = ms_ssim(set_a[pairs[k].first], set_b[pairs[k].second], p);
    });
    PairScore out;
    out.n_pairs = n_pairs;
    for (double s : scores) out.mean += s;
    out.mean /= static_cast<double>(scores.size());
    for (double s : scores) out.stddev += (s - out.mean) * (s - out.mean);
    out.stddev = scores.size() > 1 ? std::sqrt(out.stddev / static_cast<double>(scores.size() - 1))
                                   : 0.0;
    return out;
}

// ----------------------------- symmetric eigensolver -----------------------------

namespace detail {

// cyclic Jacobi; A symmetric n x n, returns eigenvalues and column eigenvectors
inline void jacobi_eigh(const Tensor<double>& a_in, std::vector<double>& eigvals,
                        Tensor<double>& eigvecs) {
    const std::size_t n = a_in.shape[0];
    Tensor<double> a = a_in;
    eigvecs = Tensor<double>({n, n});
    for (std::size_t i = 0; i < n; ++i) eigvecs.at(i, i) = 1.0;

    double frob = 0;
    for (double v : a.data) frob += v * v;
    const double tol = 1e-14 * std::max(1.0, std::sqrt(frob));

    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (std::sqrt(off) < tol) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < tol / (static_cast<double>(n) * static_cast<double>(n)))
                    continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double theta = (aqq - app) / (2 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1.0 / std::sqrt(t * t + 1);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = eigvecs.at(k, p), vkq = eigvecs.at(k, q);
                    eigvecs.at(k, p) = c * vkp - s * vkq;
                    eigvecs.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigvals[i] = a.at(i, i);
}

inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t n = a.shape[0], m = b.shape[1], k = a.shape[1];
    Tensor<double> out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a.at(i, l);
            for (std::size_t j = 0; j < m; ++j) out.at(i, j) += av * b.at(l, j);
        }
    return out;
}

// V f(D) V^T from the eigendecomposition
inline Tensor<double> eig_apply(const Tensor<double>& vecs, const std::vector<double>& vals,
                                const std::function<double(double)>& f) {
    const std::size_t n = vals.size();
    Tensor<double> scaled({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) scaled.at(i, j) = vecs.at(i, j) * f(vals[j]);
    Tensor<double> vt({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) vt.at(i, j) = vecs.at(j, i);
    return matmul(scaled, vt);
}

}  // namespace detail

// ----------------------------- frechet / fid -----------------------------

// d^2 = |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2); eigenvalues in
// (-1e-6, 0) are treated as roundoff and clamped, anything lower is rejected
inline double frechet_distance(const std::vector<double>& mu1, const Tensor<double>& cov1,
                               const std::vector<double>& mu2, const Tensor<double>& cov2) {
    const std::size_t d = mu1.size();
    if (mu2.size() != d || cov1.shape != Shape{d, d} || cov2.shape != Shape{d, d})
        throw std::invalid_argument("frechet_distance: dimension mismatch");

    auto clamp_or_reject = [](double lambda, const char* what) {
        if (lambda < -1e-6)
            throw std::invalid_argument(std::string("frechet_distance: ") + what +
                                        " has strongly negative eigenvalue " +
                                        std::to_string(lambda));
        return std::max(0.0, lambda);
    };

    std::vector<double> vals1;
    Tensor<double> vecs1;
    detail::jacobi_eigh(cov1, vals1, vecs1);
    for (auto& v : vals1) v = clamp_or_reject(v, "cov1");
    const auto sqrt1 = detail::eig_apply(vecs1, vals1, [](double l) { return std::sqrt(l); });

    auto inner = detail::matmul(detail::matmul(sqrt1, cov2), sqrt1);
    // symmetrize against roundoff before the second decomposition
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.at(i, j) = s;
            inner.at(j, i) = s;
        }
    std::vector<double> vals2;
    Tensor<double> vecs2;
    detail::jacobi_eigh(inner, vals2, vecs2);

    double tr_sqrt = 0;
    for (double l : vals2) tr_sqrt += std::sqrt(clamp_or_reject(l, "product"));
    double tr1 = 0, tr2 = 0, dmu = 0;
    for (std::size_t i = 0; i < d; ++i) {
        tr1 += cov1.at(i, i);
        tr2 += cov2.at(i, i);
        dmu += (mu1[i] - mu2[i]) * (mu1[i] - mu2[i]);
    }
    return std::max(0.0, dmu + tr1 + tr2 - 2.0 * tr_sqrt);
}

struct FeatureMoments {
    std::vector<double> mu;
    Tensor<double> cov;
    int n = 0;
};

// sample moments with diagonal shrinkage (covariance stays usable when the
// sample count is close to the feature dimension)
inline FeatureMoments feature_moments(const std::vector<std::vector<double>>& feats,
                                      double shrinkage = 1e-6) {
    if (feats.size() < 2) throw std::invalid_argument("feature_moments: need n >= 2");
    const std::size_t n = feats.size(), d = feats[0].size();
    FeatureMoments m;
    m.n = static_cast<int>(n);
    m.mu.assign(d, 0.0);
    for (const auto& f : feats)
        for (std::size_t i = 0; i < d; ++i) m.mu[i] += f[i];
    for (auto& v : m.mu) v /= static_cast<double>(n);
    m.cov = Tensor<double>({d, d});
    for (const auto& f : feats)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                m.cov.at(i, j) += (f[i] - m.mu[i]) * (f[j] - m.mu[j]);
    for (auto& v : m.cov.data) v /= static_cast<double>(n - 1);
    for (std::size_t i = 0; i < d; ++i) m.cov.at(i, i) += shrinkage;
    return m;
}

// FID over the first n images of each set with an arbitrary feature map
template <typename T, typename FeatFn>
double fid(const std::vector<Tensor<T>>& real, const std::vector<Tensor<T>>& synth,
           FeatFn&& features, int n) {
    if (n < 2) throw std::invalid_argument("fid: need n >= 2");
    if (static_cast<std::size_t>(n) > real.size() || static_cast<std::size_t>(n) > synth.size())
        throw std::invalid_argument("fid: n exceeds a set size");
    auto extract = [&](const std::vector<Tensor<T>>& set) {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
        parallel_for(static_cast<std::size_t>(n),
                     [&](std::size_t i) { out[i] = features(set[i]); });
        return out;
    };
    const auto m_real = feature_moments(extract(real));
    const auto m_synth = feature_moments(extract(synth));
    return frechet_distance(m_real.mu, m_real.cov, m_synth.mu, m_synth.cov);
}

// ----------------------------- dice -----------------------------

struct DiceValue {
    double value = 1.0;
    bool both_empty = false;  // convention: empty vs empty counts as 1.0
};

inline DiceValue dice(const Tensor<int>& pred, const Tensor<int>& gt, int label) {
    if (pred.shape != gt.shape) throw std::invalid_argument("dice: shape mismatch");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool pa = pred[i] == label;
        const bool pb = gt[i] == label;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    DiceValue out;
    if (a + b == 0) {
        out.both_empty = true;
        out.value = 1.0;
        return out;
    }
    out.value = 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
    return out;
}

}  // namespace lumen
