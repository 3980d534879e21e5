#pragma once

// Reverse-process samplers with classifier-free guidance and negative
// conditioning.
//
//   ddpm     ancestral chain over all T steps:
//            x_{t-1} = mean(x_t, eps_hat) + sigma_t * z, no noise at t=1
//   euler    deterministic ODE walk on a descending sigma grid,
//            x_{i+1} = x_i + (sigma_{i+1} - sigma_i) * d,  d = eps_hat
//   euler_a  Euler step to sigma_down plus fresh noise sigma_up with
//            sigma_up^2 + sigma_down^2 = sigma_{i+1}^2 (zero at the end)
//
// The ODE samplers keep the state in sigma space (x = x0 + sigma * eps);
// the network is queried in the variance-preserving frame via
// c_in = 1/sqrt(sigma^2+1) at the nearest discrete timestep. The sigma grid
// is linear in sigma^(1/rho) with rho = 7.
//
// Guidance: eps = eps_neg + g * (eps_pos - eps_neg). g = 1 and g = 0
// collapse to a single branch, bitwise, and cost one evaluation per step.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lumen/denoiser.hpp"
#include "lumen/rng.hpp"
#include "lumen/schedule.hpp"

namespace lumen {

enum class SamplerMethod { ddpm, euler, euler_a };

inline SamplerMethod sampler_method_from(const std::string& s) {
    if (s == "ddpm") return SamplerMethod::ddpm;
    if (s == "euler") return SamplerMethod::euler;
    if (s == "euler_a" || s == "euler-a") return SamplerMethod::euler_a;
    throw std::invalid_argument("unknown sampler method: " + s);
}

inline const char* sampler_method_name(SamplerMethod m) {
    switch (m) {
        case SamplerMethod::ddpm: return "ddpm";
        case SamplerMethod::euler: return "euler";
        default: return "euler_a";
    }
}

struct SamplerConfig {
    SamplerMethod method = SamplerMethod::euler;
    int steps = 26;            // ODE grid size (ddpm walks the full chain)
    double guidance = 4.0;     // g
    int pos_token = 1;
    int neg_token = kNullToken;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;  // per-image substream
    int height = 64, width = 64;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
        if (guidance < 0) throw std::invalid_argument("sampler: guidance must be >= 0");
        if (pos_token < 0 || pos_token >= kNumTokens || neg_token < 0 || neg_token >= kNumTokens)
            throw std::invalid_argument("sampler: tokens must be in 0..5");
    }
};

// bookkeeping asserted by tests: evaluation counts and injected noise
struct SampleTrace {
    long model_evals = 0;
    double injected_noise_sq = 0;  // sum of squares of all noise added mid-chain
    int guidance_branches = 1;
};

template <typename T>
struct SampleResult {
    Tensor<T> image;  // [0,1]
    Tensor<T> raw;    // final state before clamping/rescaling, x0 scale
    SampleTrace trace;
};

// guided noise prediction; g=1 returns the conditional branch bitwise,
// g=0 the negative branch
template <typename T>
Tensor<T> cfg_predict(const ModelParams<T>& p, const Tensor<T>& x, int t, const SamplerConfig& cfg,
                      SampleTrace* trace = nullptr) {
    if (cfg.guidance == 1.0) {
        if (trace) ++trace->model_evals;
        return forward(p, x, t, cfg.pos_token);
    }
    if (cfg.guidance == 0.0) {
        if (trace) ++trace->model_evals;
        return forward(p, x, t, cfg.neg_token);
    }
    auto pos = forward(p, x, t, cfg.pos_token);
    auto neg = forward(p, x, t, cfg.neg_token);
    if (trace) trace->model_evals += 2;
    const T g = static_cast<T>(cfg.guidance);
    Tensor<T> out = neg;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = neg[i] + g * (pos[i] - neg[i]);
    return out;
}

inline int cfg_branches(const SamplerConfig& cfg) {
    return (cfg.guidance == 0.0 || cfg.guidance == 1.0) ? 1 : 2;
}

namespace detail {

template <typename T>
Tensor<T> to_unit_image(const Tensor<T>& raw) {
    Tensor<T> img = clamp(raw, T(-1), T(1));
    for (auto& v : img.data) v = (v + T(1)) / T(2);
    return img;
}

// Karras-style grid: linear in sigma^(1/rho), descending, plus final 0
template <typename T>
std::vector<T> sigma_grid(const NoiseSchedule<T>& sched, int steps, double rho = 7.0) {
    const T sig_max = sigma_of_t(sched.steps, sched);
    const T sig_min = sigma_of_t(1, sched);
    std::vector<T> grid(static_cast<std::size_t>(steps) + 1);
    if (steps == 1) {
        grid[0] = sig_max;
    } else {
        const double hi = std::pow(static_cast<double>(sig_max), 1.0 / rho);
        const double lo = std::pow(static_cast<double>(sig_min), 1.0 / rho);
        for (int i = 0; i < steps; ++i) {
            const double u = hi + (lo - hi) * static_cast<double>(i) / (steps - 1);
            grid[static_cast<std::size_t>(i)] = static_cast<T>(std::pow(u, rho));
        }
    }
    grid[static_cast<std::size_t>(steps)] = T(0);
    return grid;
}

// nearest discrete timestep for a sigma level (sigma_of_t is increasing)
template <typename T>
int nearest_t(const NoiseSchedule<T>& sched, T sigma) {
    int lo = 1, hi = sched.steps;
    while (lo < hi) {
        const int mid = (lo + hi) / 2;
        if (sigma_of_t(mid, sched) < sigma)
            lo = mid + 1;
        else
            hi = mid;
    }
    if (lo > 1) {
        const T d_lo = std::abs(sigma_of_t(lo, sched) - sigma);
        const T d_prev = std::abs(sigma_of_t(lo - 1, sched) - sigma);
        if (d_prev <= d_lo) return lo - 1;
    }
    return lo;
}

template <typename T>
void check_finite_or_abort(const Tensor<T>& x, const char* method, int step) {
    for (T v : x.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string(method) + ": non-finite state at step " +
                                     std::to_string(step));
}

}  // namespace detail

// ----------------------------- ddpm -----------------------------

// one deterministic posterior-mean step x_t -> x_{t-1} given eps_hat;
// the x_t coefficient vanishes at t=1 because alpha_bar[0] = 1, so the
// final step is a pure inversion of the forward blend
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& x, const Tensor<T>& eps_hat, int t,
                    const NoiseSchedule<T>& sched) {
    if (t < 1 || t > sched.steps) throw std::invalid_argument("ddpm_step: t out of range");
    const T abar = sched.alpha_bar[t];
    const T abar_prev = sched.alpha_bar[t - 1];
    const T beta = sched.beta[t];
    const T c0 = std::sqrt(abar_prev) * beta / (T(1) - abar);
    const T ct = std::sqrt(sched.alpha[t]) * (T(1) - abar_prev) / (T(1) - abar);
    const T sa = std::sqrt(abar);
    const T sb = std::sqrt(T(1) - abar);
    Tensor<T> out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T x0_hat = (x[i] - sb * eps_hat[i]) / sa;
        out[i] = c0 * x0_hat + ct * x[i];
    }
    return out;
}

template <typename T>
SampleResult<T> ddpm_sample(const ModelParams<T>& p, const NoiseSchedule<T>& sched,
                            const SamplerConfig& cfg) {
    cfg.validate();
    SampleResult<T> res;
    res.trace.guidance_branches = cfg_branches(cfg);
    Rng rng(cfg.seed, 0xD000u + cfg.stream);
    Tensor<T> x = gaussian<T>(rng, {static_cast<std::size_t>(cfg.height),
                                    static_cast<std::size_t>(cfg.width)});
    for (int t = sched.steps; t >= 1; --t) {
        auto eps = cfg_predict(p, x, t, cfg, &res.trace);
        x = ddpm_step(x, eps, t, sched);
        if (t > 1) {
            const T sig = sched.sigma[t];
            for (auto& v : x.data) {
                const T z = static_cast<T>(rng.gaussian());
                v += sig * z;
                res.trace.injected_noise_sq += static_cast<double>(sig * z) * static_cast<double>(sig * z);
            }
        }
        detail::check_finite_or_abort(x, "ddpm_sample", t);
    }
    res.raw = x;
    res.image = detail::to_unit_image(x);
    return res;
}

// ----------------------------- euler / euler_a -----------------------------

template <typename T>
SampleResult<T> euler_sample_impl(const ModelParams<T>& p, const NoiseSchedule<T>& sched,
                                  const SamplerConfig& cfg, bool ancestral) {
    cfg.validate();
    if (cfg.steps > sched.steps)
        throw std::invalid_argument("euler: steps must be <= schedule T");
    SampleResult<T> res;
    res.trace.guidance_branches = cfg_branches(cfg);
    Rng rng(cfg.seed, 0xE000u + cfg.stream);

    const auto grid = detail::sigma_grid(sched, cfg.steps);
    Tensor<T> x = gaussian<T>(rng, {static_cast<std::size_t>(cfg.height),
                                    static_cast<std::size_t>(cfg.width)});
    for (auto& v : x.data) v *= grid[0];  // x_T in sigma space

    for (int i = 0; i < cfg.steps; ++i) {
        const T sig = grid[static_cast<std::size_t>(i)];
        const T sig_next = grid[static_cast<std::size_t>(i) + 1];
        const int t = detail::nearest_t(sched, sig);

        // query the model in the variance-preserving frame
        const T c_in = T(1) / std::sqrt(sig * sig + T(1));
        Tensor<T> x_in = x * c_in;
        auto eps = cfg_predict(p, x_in, t, cfg, &res.trace);

        T sig_down = sig_next;
        T sig_up = T(0);
        if (ancestral && sig_next > T(0)) {
            // variance split: sig_up^2 + sig_down^2 = sig_next^2
            sig_up = std::sqrt((sig_next * sig_next) * (sig * sig - sig_next * sig_next) /
                               (sig * sig));
            sig_down = std::sqrt(sig_next * sig_next - sig_up * sig_up);
        }

        // d = (x - x0_hat)/sigma = eps_hat for the eps parameterization
        const T dt = sig_down - sig;
        for (std::size_t j = 0; j < x.size(); ++j) x[j] += dt * eps[j];

        if (sig_up > T(0)) {
            for (auto& v : x.data) {
                const T z = static_cast<T>(rng.gaussian());
                v += sig_up * z;
                res.trace.injected_noise_sq +=
                    static_cast<double>(sig_up * z) * static_cast<double>(sig_up * z);
            }
        }
        detail::check_finite_or_abort(x, ancestral ? "euler_ancestral_sample" : "euler_sample", i);
    }
    res.raw = x;  // sigma = 0: state is the denoised image estimate
    res.image = detail::to_unit_image(x);
    return res;
}

template <typename T>
SampleResult<T> euler_sample(const ModelParams<T>& p, const NoiseSchedule<T>& sched,
                             const SamplerConfig& cfg) {
    return euler_sample_impl(p, sched, cfg, false);
}

template <typename T>
SampleResult<T> euler_ancestral_sample(const ModelParams<T>& p, const NoiseSchedule<T>& sched,
                                       const SamplerConfig& cfg) {
    return euler_sample_impl(p, sched, cfg, true);
}

template <typename T>
SampleResult<T> sample(const ModelParams<T>& p, const NoiseSchedule<T>& sched,
                       const SamplerConfig& cfg) {
    switch (cfg.method) {
        case SamplerMethod::ddpm: return ddpm_sample(p, sched, cfg);
        case SamplerMethod::euler: return euler_sample(p, sched, cfg);
        default: return euler_ancestral_sample(p, sched, cfg);
    }
}

}  // namespace lumen
