#pragma once

// Exact O(n^2) t-SNE over encoder features, plus the MS-SSIM nearest-real
// overlay. Perplexity calibration is a per-row binary search on the kernel
// bandwidth; the embedding loop follows the classic recipe: early
// exaggeration, momentum switch, per-iteration recentering.

#include <cmath>
#include <limits>
#include <vector>

#include "lumen/metrics.hpp"
#include "lumen/parallel.hpp"
#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 500;
    double learning_rate = 200.0;
    double momentum_start = 0.5;
    double momentum_final = 0.8;
    int momentum_switch = 250;
    double early_exaggeration = 12.0;
    int exaggeration_iters = 100;
    std::uint64_t seed = 0;
};

struct PerplexityFit {
    double sigma = 0;
    std::vector<double> probs;  // row of P_{j|i}, sums to 1
    bool converged = true;
};

// Calibrate the Gaussian bandwidth of one neighbor row so the perplexity
// 2^H(P) hits the target within 1e-5 (<= 50 bisections). `sq_dists` holds
// squared distances to the other points (self excluded). Falls back to the
// bracket midpoint with converged=false when the target is unreachable.
inline PerplexityFit perplexity_search(const std::vector<double>& sq_dists,
                                       double target_perplexity) {
    if (sq_dists.size() < 2)
        throw std::invalid_argument("perplexity_search: need at least 2 neighbors");
    PerplexityFit fit;
    fit.probs.resize(sq_dists.size());

    double beta = 1.0, beta_lo = 0.0, beta_hi = std::numeric_limits<double>::infinity();
    double perp = 0;
    auto eval = [&](double b) {
        double dmin = sq_dists[0];
        for (double d : sq_dists) dmin = std::min(dmin, d);
        double sum = 0;
        for (std::size_t j = 0; j < sq_dists.size(); ++j) {
            fit.probs[j] = std::exp(-b * (sq_dists[j] - dmin));
            sum += fit.probs[j];
        }
        double h = 0;  // entropy in bits
        for (auto& p : fit.probs) {
            p /= sum;
            if (p > 0) h -= p * std::log2(p);
        }
        return std::exp2(h);
    };

    int iter = 0;
    for (; iter < 50; ++iter) {
        perp = eval(beta);
        if (std::abs(perp - target_perplexity) <= 1e-5) break;
        if (perp > target_perplexity) {
            beta_lo = beta;
            beta = std::isinf(beta_hi) ? beta * 2 : 0.5 * (beta_lo + beta_hi);
        } else {
            beta_hi = beta;
            beta = beta_lo == 0.0 ? beta / 2 : 0.5 * (beta_lo + beta_hi);
        }
    }
    if (iter == 50) {
        fit.converged = false;
        const double mid = std::isinf(beta_hi) ? beta : 0.5 * (beta_lo + beta_hi);
        eval(mid);
        beta = mid;
    }
    fit.sigma = 1.0 / std::sqrt(2.0 * beta);
    return fit;
}

namespace detail {

inline Tensor<double> pairwise_sq_dists(const Tensor<double>& x) {
    const std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<double> dist({n, n});
    parallel_for(n, [&](std::size_t i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = x.at(i, k) - x.at(j, k);
                s += diff * diff;
            }
            dist.at(i, j) = s;
            dist.at(j, i) = s;
        }
    });
    return dist;
}

}  // namespace detail

// symmetrized joint probabilities, sum_ij P = 1
inline Tensor<double> tsne_p_matrix(const Tensor<double>& features, double perplexity,
                                    int* warnings = nullptr) {
    const std::size_t n = features.shape[0];
    const auto d2 = detail::pairwise_sq_dists(features);
    Tensor<double> cond({n, n});
    std::vector<int> row_warn(n, 0);
    parallel_for(n, [&](std::size_t i) {
        std::vector<double> row;
        row.reserve(n - 1);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) row.push_back(d2.at(i, j));
        auto fit = perplexity_search(row, perplexity);
        if (!fit.converged) row_warn[i] = 1;
        std::size_t k = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cond.at(i, j) = fit.probs[k++];
    });
    if (warnings)
        for (int w : row_warn) *warnings += w;
    Tensor<double> p({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            p.at(i, j) = (cond.at(i, j) + cond.at(j, i)) / (2.0 * static_cast<double>(n));
    return p;
}

// KL(P||Q) and its gradient wrt the embedding:
// grad_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)
inline double tsne_kl_and_grad(const Tensor<double>& p, const Tensor<double>& y,
                               Tensor<double>* grad = nullptr) {
    const std::size_t n = y.shape[0];
    Tensor<double> w({n, n});
    double z = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 2; ++k) {
                const double diff = y.at(i, k) - y.at(j, k);
                s += diff * diff;
            }
            const double wij = 1.0 / (1.0 + s);
            w.at(i, j) = wij;
            w.at(j, i) = wij;
            z += 2 * wij;
        }
    double kl = 0;
    if (grad) {
        grad->shape = y.shape;
        grad->data.assign(y.size(), 0.0);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double pij = p.at(i, j);
            const double qij = std::max(w.at(i, j) / z, 1e-12);
            if (pij > 0) kl += pij * std::log(pij / qij);
            if (grad) {
                const double mult = 4.0 * (pij - qij) * w.at(i, j);
                for (std::size_t k = 0; k < 2; ++k)
                    grad->at(i, k) += mult * (y.at(i, k) - y.at(j, k));
            }
        }
    return kl;
}

struct TsneResult {
    Tensor<double> embedding;  // n x 2
    double initial_kl = 0;
    double final_kl = 0;
    int perplexity_warnings = 0;
};

inline TsneResult tsne(const Tensor<double>& features, const TsneConfig& cfg = {}) {
    if (features.shape.size() != 2) throw std::invalid_argument("tsne: want n x d features");
    const std::size_t n = features.shape[0];
    if (n < 10) throw std::invalid_argument("tsne: need n >= 10");
    if (!(cfg.perplexity < (static_cast<double>(n) - 1) / 3.0))
        throw std::invalid_argument("tsne: perplexity must be < (n-1)/3");
    {
        const auto d2 = detail::pairwise_sq_dists(features);
        double dmax = 0;
        for (double v : d2.data) dmax = std::max(dmax, v);
        if (dmax == 0.0) throw std::invalid_argument("tsne: all features identical");
    }

    TsneResult res;
    res.perplexity_warnings = 0;
    Tensor<double> p = tsne_p_matrix(features, cfg.perplexity, &res.perplexity_warnings);

    Rng rng(cfg.seed, 0x75E);
    Tensor<double> y({n, 2});
    for (auto& v : y.data) v = 1e-4 * rng.gaussian();
    Tensor<double> velocity({n, 2});

    res.initial_kl = tsne_kl_and_grad(p, y);

    Tensor<double> p_eff = p;
    Tensor<double> grad;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const bool exaggerate = iter < cfg.exaggeration_iters;
        for (std::size_t i = 0; i < p.size(); ++i)
            p_eff[i] = exaggerate ? p[i] * cfg.early_exaggeration : p[i];
        tsne_kl_and_grad(p_eff, y, &grad);
        const double momentum =
            iter < cfg.momentum_switch ? cfg.momentum_start : cfg.momentum_final;
        for (std::size_t i = 0; i < y.size(); ++i) {
            velocity[i] = momentum * velocity[i] - cfg.learning_rate * grad[i];
            y[i] += velocity[i];
        }
        // recenter
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += y.at(i, 0);
            my += y.at(i, 1);
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            y.at(i, 0) -= mx;
            y.at(i, 1) -= my;
        }
    }
    res.final_kl = tsne_kl_and_grad(p, y);
    res.embedding = std::move(y);
    return res;
}

// ----------------------------- nearest real -----------------------------

// For each synthetic image, the k most MS-SSIM-similar real images
// (ties broken toward the lowest index). Brute force over all pairs.
template <typename T>
std::vector<std::vector<std::size_t>> nearest_real(const std::vector<Tensor<T>>& synth,
                                                   const std::vector<Tensor<T>>& real,
                                                   std::size_t k = 1) {
    if (synth.empty() || real.empty())
        throw std::invalid_argument("nearest_real: empty image set");
    k = std::min(k, real.size());
    std::vector<std::vector<std::size_t>> out(synth.size());
    parallel_for(synth.size(), [&](std::size_t i) {
        std::vector<std::pair<double, std::size_t>> scored(real.size());
        for (std::size_t j = 0; j < real.size(); ++j)
            scored[j] = {ms_ssim(synth[i], real[j]), j};
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        out[i].resize(k);
        for (std::size_t j = 0; j < k; ++j) out[i][j] = scored[j].second;
    });
    return out;
}

}  // namespace lumen
