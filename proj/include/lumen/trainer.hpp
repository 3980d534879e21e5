#pragma once

// Training loop machinery: the noise-prediction objective, prior-preserving
// fine-tuning, AdamW with fp32 or blockwise-8-bit moment storage, LoRA
// fine-tune mode with a frozen base, and fp16/fp32 checkpointing.
//
// Randomness contract: every loss evaluation pre-draws its (dropout, t, eps)
// triples sequentially from the caller's Rng, then computes per-sample
// gradients (possibly in parallel) and reduces them in index order. Equal
// seeds give bit-identical results in fp64 mode regardless of thread count.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "lumen/denoiser.hpp"
#include "lumen/io.hpp"
#include "lumen/parallel.hpp"
#include "lumen/phantom.hpp"
#include "lumen/quant8.hpp"
#include "lumen/rng.hpp"
#include "lumen/schedule.hpp"

namespace lumen {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 2;
    double lr = 1e-4;
    bool q8_state = false;  // 8-bit optimizer moments
    bool lora = false;
    int lora_rank = 4;
    double lora_alpha = 4.0;
    double prior_lambda = 1.0;
    double cond_dropout = 0.1;
    std::uint64_t seed = 0;
    // AdamW defaults
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // global-norm gradient clip; tiny batches are noisy
    int prior_count = 32;    // prior images drawn from the frozen base
    int prior_steps = 26;    // sampler steps for prior generation

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("train config: lr must be > 0");
        if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    }
};

// one training example: image already mapped to [-1,1]
template <typename T>
struct TrainItem {
    Tensor<T> x0;
    int token = 0;
};

template <typename T>
TrainItem<T> to_train_item(const PhantomSample& ph) {
    TrainItem<T> it;
    it.token = class_token(ph.class_id);
    it.x0 = Tensor<T>(ph.image.shape);
    for (std::size_t i = 0; i < ph.image.size(); ++i)
        it.x0[i] = static_cast<T>(2.0 * ph.image[i] - 1.0);
    return it;
}

// ----------------------------- losses -----------------------------

template <typename T>
struct LossResult {
    double loss = 0;
    ModelParams<T> grads;
};

template <typename T>
struct NoiseDraw {
    int token;
    int t;
    Tensor<T> eps;
};

// the (dropout, t, eps) plan is always drawn sequentially up front, so the
// result is independent of how the per-sample work is scheduled
template <typename T>
std::vector<NoiseDraw<T>> draw_noise_plan(const std::vector<TrainItem<T>>& batch,
                                          const NoiseSchedule<T>& sched, Rng& rng,
                                          double cond_dropout) {
    std::vector<NoiseDraw<T>> draws(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        draws[i].token = (rng.uniform01() < cond_dropout) ? kNullToken : batch[i].token;
        draws[i].t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps)));
        draws[i].eps = gaussian<T>(rng, batch[i].x0.shape);
    }
    return draws;
}

// loss only, with an arbitrary predictor(x_t, t, token) -> eps_hat;
// shares the draw plan logic with the gradient path
template <typename T, typename Pred>
double diffusion_loss_eval(Pred&& predictor, const std::vector<TrainItem<T>>& batch,
                           const NoiseSchedule<T>& sched, Rng& rng, double cond_dropout = 0.0) {
    if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
    const auto draws = draw_noise_plan(batch, sched, rng, cond_dropout);
    double total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto x_t = add_noise(batch[i].x0, draws[i].eps, draws[i].t, sched);
        Tensor<T> pred = predictor(x_t, draws[i].t, draws[i].token);
        double l = 0;
        for (std::size_t j = 0; j < pred.size(); ++j) {
            const double d = static_cast<double>(pred[j]) - static_cast<double>(draws[i].eps[j]);
            l += d * d;
        }
        total += l / static_cast<double>(pred.size());
    }
    return total / static_cast<double>(batch.size());
}

// mean squared error between predicted and true noise over a batch,
// with conditioning dropout to the null token
template <typename T>
LossResult<T> diffusion_loss(const ModelParams<T>& p, const std::vector<TrainItem<T>>& batch,
                             const NoiseSchedule<T>& sched, Rng& rng, double cond_dropout = 0.0) {
    if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
    const std::size_t n = batch.size();
    const auto draws = draw_noise_plan(batch, sched, rng, cond_dropout);

    std::vector<double> losses(n, 0.0);
    std::vector<ModelParams<T>> grads(n);
    parallel_for(n, [&](std::size_t i) {
        const auto& item = batch[i];
        const auto& d = draws[i];
        auto x_t = add_noise(item.x0, d.eps, d.t, sched);
        ForwardCache<T> cache;
        auto pred = forward(p, x_t, d.t, d.token, &cache);
        Tensor<T> resid = pred - d.eps;
        double l = 0;
        for (T v : resid.data) l += static_cast<double>(v) * static_cast<double>(v);
        losses[i] = l / static_cast<double>(resid.size());
        const T scale = T(2) / (T(resid.size()) * T(n));
        Tensor<T> go = resid * scale;
        grads[i] = zeros_like_grads(p);
        backward(p, cache, go, grads[i]);
    });

    LossResult<T> out;
    out.grads = zeros_like_grads(p);
    for (std::size_t i = 0; i < n; ++i) {
        out.loss += losses[i] / static_cast<double>(n);
        for_each_param(out.grads, [&](const char* name, Tensor<T>& acc, ParamKind) {
            for_each_param(grads[i], [&](const char* gname, Tensor<T>& gi, ParamKind) {
                if (acc.empty() || std::string(name) != gname) return;
                for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gi[j];
            });
        });
    }
    return out;
}

// Subject loss plus lambda-weighted loss on base-model prior samples;
// lambda = 0 reduces exactly to diffusion_loss on the subject batch.
// The prior term replays the subject's draw stream (common random numbers),
// so equal batches give exactly additive losses.
template <typename T>
LossResult<T> prior_preservation_loss(const ModelParams<T>& p,
                                      const std::vector<TrainItem<T>>& subject_batch,
                                      const std::vector<TrainItem<T>>& prior_batch,
                                      const NoiseSchedule<T>& sched, Rng& rng, double lambda,
                                      double cond_dropout = 0.0) {
    Rng prior_rng = rng;  // value copy: same stream position as the subject pass
    LossResult<T> subject = diffusion_loss(p, subject_batch, sched, rng, cond_dropout);
    if (lambda == 0.0) return subject;
    if (prior_batch.empty())
        throw std::invalid_argument("prior_preservation_loss: empty prior batch with lambda > 0");
    LossResult<T> prior = diffusion_loss(p, prior_batch, sched, prior_rng, cond_dropout);
    subject.loss += lambda * prior.loss;
    for_each_param(subject.grads, [&](const char* name, Tensor<T>& acc, ParamKind) {
        for_each_param(prior.grads, [&](const char* gname, Tensor<T>& gp, ParamKind) {
            if (acc.empty() || std::string(name) != gname) return;
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += static_cast<T>(lambda) * gp[j];
        });
    });
    return subject;
}

// ----------------------------- AdamW -----------------------------

// First/second moments per parameter tensor, stored fp32 or quantized.
// Tensors smaller than one quantization block stay dense even in q8 mode;
// the memory win is nil and a lone heterogeneous block is all noise.
inline constexpr std::size_t kMomentBlock = 64;

template <typename T>
struct MomentSlot {
    Tensor<T> dense;
    QuantBlock8 quant;
    bool q8 = false;

    Tensor<T> load(const Shape& shape) const {
        if (!quant.codes.empty()) return q8_decode<T>(quant);
        return dense.empty() ? Tensor<T>(shape) : dense;
    }
    // For the second moment: a small v that rounds to code 0 must not reach
    // the update denominator as exactly zero (that would explode m_hat/eps),
    // so dequantized entries are floored at half a quantization LSB.
    Tensor<T> load_floored(const Shape& shape) const {
        Tensor<T> v = load(shape);
        if (!quant.codes.empty()) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                const T lsb_half = static_cast<T>(quant.scales[i / quant.block_size] / 254.0f);
                v[i] = std::max(v[i], lsb_half);
            }
        }
        return v;
    }
    void store(const Tensor<T>& m) {
        if (q8 && m.size() >= kMomentBlock)
            quant = q8_encode(m, kMomentBlock);
        else
            dense = m;
    }
};

template <typename T>
struct OptState {
    long step = 0;
    long rejected = 0;  // steps skipped on non-finite gradients
    bool q8 = false;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    std::vector<std::string> names;
    std::vector<MomentSlot<T>> m, v;

    std::size_t slot(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::runtime_error("opt state: unknown parameter " + name);
    }
};

template <typename T>
OptState<T> init_opt_state(const ModelParams<T>& p, const TrainConfig& cfg) {
    OptState<T> st;
    st.q8 = cfg.q8_state;
    st.beta1 = cfg.beta1;
    st.beta2 = cfg.beta2;
    st.eps = cfg.adam_eps;
    st.weight_decay = cfg.weight_decay;
    for_each_param(p, [&](const char* name, const Tensor<T>&, ParamKind kind) {
        if (!params_trainable(p, kind)) return;
        st.names.emplace_back(name);
        MomentSlot<T> slot;
        slot.q8 = cfg.q8_state;
        st.m.push_back(slot);
        st.v.push_back(slot);
    });
    return st;
}

// bias-corrected AdamW update; returns false (and counts) on non-finite grads
template <typename T>
bool adamw_step(OptState<T>& st, ModelParams<T>& params, const ModelParams<T>& grads, double lr) {
    bool finite = true;
    for_each_param(grads, [&](const char*, const Tensor<T>& g, ParamKind) {
        for (T v : g.data)
            if (!std::isfinite(static_cast<double>(v))) finite = false;
    });
    if (!finite) {
        ++st.rejected;
        return false;
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));

    for_each_param(params, [&](const char* name, Tensor<T>& theta, ParamKind kind) {
        if (!params_trainable(params, kind)) return;
        const Tensor<T>* g = nullptr;
        for_each_param(grads, [&](const char* gname, const Tensor<T>& gt, ParamKind) {
            if (std::string(gname) == name) g = &gt;
        });
        if (!g || g->empty()) return;
        const double wd = params_decayable(kind) ? st.weight_decay : 0.0;
        const std::size_t i = st.slot(name);
        Tensor<T> m = st.m[i].load(theta.shape);
        Tensor<T> v = st.v[i].load_floored(theta.shape);
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double gj = static_cast<double>((*g)[j]);
            const double mj = st.beta1 * static_cast<double>(m[j]) + (1.0 - st.beta1) * gj;
            const double vj = st.beta2 * static_cast<double>(v[j]) + (1.0 - st.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            const double update =
                mhat / (std::sqrt(vhat) + st.eps) + wd * static_cast<double>(theta[j]);
            theta[j] = static_cast<T>(static_cast<double>(theta[j]) - lr * update);
        }
        st.m[i].store(m);
        st.v[i].store(v);
    });
    return true;
}

template <typename T>
double clip_global_norm(ModelParams<T>& grads, double max_norm) {
    double sq = 0;
    for_each_param(grads, [&](const char*, Tensor<T>& g, ParamKind) {
        for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    });
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for_each_param(grads, [&](const char*, Tensor<T>& g, ParamKind) {
            for (auto& v : g.data) v *= s;
        });
    }
    return norm;
}

// ----------------------------- training loops -----------------------------

struct LossCurve {
    std::vector<double> train;
    std::vector<double> val;

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,loss,val_loss\n";
        os.precision(12);
        for (std::size_t e = 0; e < train.size(); ++e) {
            os << e + 1 << "," << train[e] << ",";
            if (e < val.size()) os << val[e];
            os << "\n";
        }
        return os.str();
    }
};

namespace detail {

// validation loss with seed-fixed (t, eps) draws: comparable across epochs
template <typename T>
double fixed_val_loss(const ModelParams<T>& p, const std::vector<TrainItem<T>>& val,
                      const NoiseSchedule<T>& sched, std::uint64_t seed) {
    if (val.empty()) return 0.0;
    Rng rng(seed, 0xA117);
    double total = 0;
    std::vector<std::pair<int, Tensor<T>>> draws;
    draws.reserve(val.size());
    for (const auto& item : val) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps)));
        draws.emplace_back(t, gaussian<T>(rng, item.x0.shape));
    }
    std::vector<double> losses(val.size());
    parallel_for(val.size(), [&](std::size_t i) {
        const auto& [t, eps] = draws[i];
        auto x_t = add_noise(val[i].x0, eps, t, sched);
        auto pred = forward(p, x_t, t, val[i].token);
        double l = 0;
        for (std::size_t j = 0; j < pred.size(); ++j) {
            const double d = static_cast<double>(pred[j]) - static_cast<double>(eps[j]);
            l += d * d;
        }
        losses[i] = l / static_cast<double>(pred.size());
    });
    for (double l : losses) total += l;
    return total / static_cast<double>(val.size());
}

}  // namespace detail

template <typename T>
struct TrainOutput {
    ModelParams<T> params;
    LossCurve curve;
};

// base-model training on the train split only
template <typename T>
TrainOutput<T> train_base(const std::vector<TrainItem<T>>& train_items,
                          const std::vector<TrainItem<T>>& val_items, const DenoiserConfig& arch,
                          const TrainConfig& cfg, const NoiseSchedule<T>& sched) {
    cfg.validate();
    if (train_items.empty()) throw std::invalid_argument("train_base: empty training set");

    ModelParams<T> params = init_params<T>(Rng(cfg.seed, 0x1017), arch);
    OptState<T> opt = init_opt_state(params, cfg);
    TrainOutput<T> out;

    std::vector<std::size_t> order(train_items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double initial_loss = -1.0;
    int high_loss_epochs = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, 0x50000u + static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order.begin(), order.end());
        Rng loss_rng(cfg.seed, 0x60000u + static_cast<std::uint64_t>(epoch));

        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<TrainItem<T>> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
                batch.push_back(train_items[order[i]]);
            auto res = diffusion_loss(params, batch, sched, loss_rng, cfg.cond_dropout);
            clip_global_norm(res.grads, cfg.clip_norm);
            adamw_step(opt, params, res.grads, cfg.lr);
            epoch_loss += res.loss;
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);
        out.curve.train.push_back(epoch_loss);
        out.curve.val.push_back(detail::fixed_val_loss(params, val_items, sched, cfg.seed));

        if (initial_loss < 0) initial_loss = epoch_loss;
        if (epoch_loss > 10.0 * initial_loss) {
            if (++high_loss_epochs >= 3)
                throw std::runtime_error(
                    "train_base: diverged, loss " + std::to_string(epoch_loss) + " vs initial " +
                    std::to_string(initial_loss) + " for 3 epochs");
        } else {
            high_loss_epochs = 0;
        }
    }
    out.params = std::move(params);
    return out;
}

// LoRA fine-tuning on one subject class with prior preservation.
// Only the adapters and the subject token row move; the base stays frozen
// and is hash-checked.
template <typename T>
struct FinetuneOutput {
    ModelParams<T> params;  // base + trained adapters
    LossCurve curve;
    std::uint64_t base_hash_before = 0, base_hash_after = 0;
};

template <typename T>
FinetuneOutput<T> train_lora(const ModelParams<T>& base,
                             const std::vector<TrainItem<T>>& subject_items, int subject_token,
                             const std::vector<TrainItem<T>>& prior_items, const TrainConfig& cfg,
                             const NoiseSchedule<T>& sched) {
    cfg.validate();
    if (!cfg.lora) throw std::invalid_argument("train_lora: lora disabled in config");
    if (subject_items.empty()) throw std::invalid_argument("train_lora: empty subject set");
    if (cfg.prior_lambda > 0 && prior_items.empty())
        throw std::invalid_argument("train_lora: empty prior batch with lambda > 0");

    FinetuneOutput<T> out;
    out.params = base;
    out.params.frozen_base = true;
    if (!out.params.has_lora()) {
        Rng lora_rng(cfg.seed, 0x10AA);
        attach_lora(out.params, lora_rng, cfg.lora_rank, cfg.lora_alpha);
    }
    out.base_hash_before = base_weights_hash(out.params);

    OptState<T> opt = init_opt_state(out.params, cfg);

    std::vector<std::size_t> order(subject_items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, 0x70000u + static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order.begin(), order.end());
        Rng loss_rng(cfg.seed, 0x80000u + static_cast<std::uint64_t>(epoch));
        Rng prior_rng(cfg.seed, 0x90000u + static_cast<std::uint64_t>(epoch));

        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<TrainItem<T>> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
                batch.push_back(subject_items[order[i]]);
            std::vector<TrainItem<T>> prior_batch;
            if (cfg.prior_lambda > 0)
                for (std::size_t i = 0; i < batch.size(); ++i)
                    prior_batch.push_back(
                        prior_items[prior_rng.below(prior_items.size())]);

            // dropout disabled: fine-tuning must only touch the subject row
            auto res = prior_preservation_loss(out.params, batch, prior_batch, sched, loss_rng,
                                               cfg.prior_lambda, 0.0);
            // belt and braces: zero any non-subject embedding gradient
            if (!res.grads.cemb.empty()) {
                for (std::size_t row = 0; row < 6; ++row) {
                    if (static_cast<int>(row) == subject_token) continue;
                    for (std::size_t j = 0; j < res.grads.cemb.shape[1]; ++j)
                        res.grads.cemb.at(row, j) = T(0);
                }
            }
            clip_global_norm(res.grads, cfg.clip_norm);
            adamw_step(opt, out.params, res.grads, cfg.lr);
            epoch_loss += res.loss;
            ++batches;
        }
        out.curve.train.push_back(epoch_loss / static_cast<double>(batches));
    }

    out.base_hash_after = base_weights_hash(out.params);
    if (out.base_hash_before != out.base_hash_after)
        throw std::runtime_error("train_lora: frozen base weights changed");
    return out;
}

// ----------------------------- checkpoints -----------------------------

template <typename T>
void save_checkpoint(const ModelParams<T>& p, const std::string& path, TnsDtype precision,
                     std::size_t* overflow_count = nullptr) {
    write_ckpt1(path, params_to_checkpoint(p), precision, overflow_count);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::string& path) {
    return params_from_checkpoint<T>(read_ckpt1(path));
}

}  // namespace lumen
