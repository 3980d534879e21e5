#pragma once

// Discrete-time noise schedule and forward diffusion process.
// Index 0 is the clean-data sentinel: beta[0]=0, alpha_bar[0]=1.
// sigma[t] is the posterior std used by ancestral sampling; the ODE
// samplers use sigma_of_t = sqrt((1-abar)/abar) instead.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "lumen/tensor.hpp"

namespace lumen {

enum class ScheduleKind { linear, scaled_linear };

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "scaled" || s == "scaled_linear") return ScheduleKind::scaled_linear;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

template <typename T>
struct NoiseSchedule {
    int steps = 0;                 // T
    std::vector<T> beta;           // beta[0] = 0
    std::vector<T> alpha;          // 1 - beta
    std::vector<T> alpha_bar;      // running product, alpha_bar[0] = 1
    std::vector<T> sigma;          // posterior std, sigma[0] = sigma[1] = 0
};

template <typename T>
NoiseSchedule<T> make_schedule(ScheduleKind kind, int T_steps, T beta_start, T beta_end) {
    if (T_steps < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule<T> s;
    s.steps = T_steps;
    s.beta.assign(T_steps + 1, T(0));
    s.alpha.assign(T_steps + 1, T(1));
    s.alpha_bar.assign(T_steps + 1, T(1));
    s.sigma.assign(T_steps + 1, T(0));

    for (int t = 1; t <= T_steps; ++t) {
        const T frac = (T_steps == 1) ? T(0) : T(t - 1) / T(T_steps - 1);
        T b;
        if (kind == ScheduleKind::linear) {
            b = beta_start + frac * (beta_end - beta_start);
        } else {
            const T r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            b = r * r;
        }
        s.beta[t] = b;
        s.alpha[t] = T(1) - b;
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    for (int t = 2; t <= T_steps; ++t) {
        const T var = s.beta[t] * (T(1) - s.alpha_bar[t - 1]) / (T(1) - s.alpha_bar[t]);
        s.sigma[t] = std::sqrt(var);
    }
    return s;
}

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps ; t = 0 returns x0
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, const Tensor<T>& eps, int t, const NoiseSchedule<T>& s) {
    check_same_shape(x0, eps, "add_noise");
    if (t < 0 || t > s.steps)
        throw std::invalid_argument("add_noise: t out of range: " + std::to_string(t));
    if (t == 0) return x0;
    const T a = std::sqrt(s.alpha_bar[t]);
    const T b = std::sqrt(T(1) - s.alpha_bar[t]);
    Tensor<T> out = x0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// ODE-space noise level, strictly increasing in t
template <typename T>
T sigma_of_t(int t, const NoiseSchedule<T>& s) {
    if (t < 1 || t > s.steps)
        throw std::invalid_argument("sigma_of_t: t out of range: " + std::to_string(t));
    return std::sqrt((T(1) - s.alpha_bar[t]) / s.alpha_bar[t]);
}

template <typename T>
void schedule_to_csv(const NoiseSchedule<T>& s, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("schedule_to_csv: cannot open " + path);
    os << "t,beta,alpha_bar,sigma\n";
    os.precision(12);
    for (int t = 1; t <= s.steps; ++t)
        os << t << "," << s.beta[t] << "," << s.alpha_bar[t] << "," << sigma_of_t(t, s) << "\n";
}

}  // namespace lumen
